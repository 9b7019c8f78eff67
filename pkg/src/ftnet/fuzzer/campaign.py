"""The fault-injection fuzzing loop.

Work is split into jobs: ``next_job`` picks and mutates a queue entry
using the shared state, a worker executes the job, and ``commit`` folds
the outcome back into the state.  With one worker the three steps
alternate strictly, which makes a campaign bit-reproducible under a fixed
seed; with several workers only the commit order varies.
"""

from __future__ import annotations

import concurrent.futures as cf
import multiprocessing
import os
import random
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import faults
from ..coverage import MAP_SIZE, NoveltyIndex
from ..orchestrator import Orchestrator, PeerSpec, PortAllocator, RunOutcome, Verdict
from ..stats import StatsWriter
from . import mutators
from .program import FaultProgram, Provenance, calibrated, save_program
from .triage import CrashTable, save_crash

ADMISSIBLE = (Verdict.CLEAN_EXIT, Verdict.WEIRD_CRASH_POST_CONNECT)


@dataclass
class SchedulerConfig:
    p_favored: float = 0.8
    weight_stream: int = 6
    weight_splice: int = 1
    weight_extend: int = 1
    probes_per_site: int = 8
    crash_threshold: int = 6
    dormant_weight: float = 0.1


class Scheduler:
    """Favored-first entry selection with dormant entries down-weighted."""

    def __init__(self, config: SchedulerConfig):
        self.config = config

    def pick(self, queue: list[FaultProgram], rng: random.Random) -> FaultProgram:
        favored = [p for p in queue if p.favored]
        pool = favored if favored and rng.random() < self.config.p_favored else queue
        weights = [self.config.dormant_weight if p.dormant else 1.0 for p in pool]
        return rng.choices(pool, weights)[0]

    def mutation_kind(self, rng: random.Random) -> str:
        c = self.config
        return rng.choices(("stream", "splice", "extend"), (c.weight_stream, c.weight_splice, c.weight_extend))[0]


@dataclass
class Job:
    kind: str  # baseline | probe | stream | splice | extend
    program: FaultProgram
    site: int | None = None
    parent: int | None = None


@dataclass
class IterationReport:
    iteration: int
    kind: str
    verdict: str
    site: int | None = None
    parent: int | None = None
    admitted: int | None = None
    crash_key: tuple[str, ...] | None = None
    new_bucket: bool = False
    novel: int = 0
    bug_id: str | None = None

    def line(self) -> str:
        crash = "|".join(self.crash_key) if self.crash_key else "-"
        return (f"{self.iteration} {self.kind} parent={self.parent} site={self.site} {self.verdict} "
                f"admitted={self.admitted} novel={self.novel} crash={crash}")


@dataclass
class CampaignState:
    queue: list[FaultProgram] = field(default_factory=list)
    novelty: NoveltyIndex = field(default_factory=NoveltyIndex)
    crashes: CrashTable = field(default_factory=CrashTable)
    skip: set[int] = field(default_factory=set)
    site_hits: dict[int, int] = field(default_factory=dict)
    probe_runs: Counter = field(default_factory=Counter)
    probe_crashes: Counter = field(default_factory=Counter)
    site_crashes: Counter = field(default_factory=Counter)
    verdicts: Counter = field(default_factory=Counter)
    ever_hit: np.ndarray = field(default_factory=lambda: np.zeros(MAP_SIZE, dtype=bool))
    iteration: int = 0
    next_id: int = 0
    baseline_done: bool = False
    baseline_hits: dict[int, int] = field(default_factory=dict)
    init_cursor: int = 0  # probe jobs handed out so far

    def reached(self, low: int, high: int = MAP_SIZE) -> bool:
        return bool(self.ever_hit[low:high].any())


def execute(orch: Orchestrator, job: Job) -> RunOutcome:
    return orch.run_once(job.program.entries, collect_hits=True)


class FaultCampaign:
    def __init__(self, sites: list[faults.FaultSite], seed: int = 0,
                 config: SchedulerConfig | None = None, out_dir: str | None = None):
        self.sites = {s.site_id: s for s in sites}
        self.widths = {s.site_id: s.width_bits for s in sites}
        self.config = config or SchedulerConfig()
        self.scheduler = Scheduler(self.config)
        self.rng = random.Random(seed)
        self.state = CampaignState()
        self.reports: list[IterationReport] = []
        self.out_dir = out_dir
        self.stats: StatsWriter | None = None
        self._t0 = time.monotonic()
        if out_dir:
            for sub in ("queue", "crashes"):
                os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
            self.stats = StatsWriter(os.path.join(out_dir, "stats.csv"))

    # job generation

    def probe_sites(self) -> list[int]:
        """Sites worth probing: those the identity run actually reaches."""
        return sorted(s for s in self.sites if self.state.baseline_hits.get(s, 0) > 0)

    @property
    def init_jobs_total(self) -> int:
        return len(self.probe_sites()) * self.config.probes_per_site

    @property
    def initializing(self) -> bool:
        return not self.state.baseline_done or self.state.init_cursor < self.init_jobs_total

    def _probe_job(self, site: int) -> Job:
        stream = mutators.fresh_stream(self.state.baseline_hits.get(site), self.widths[site], self.rng)
        prog = FaultProgram([(site, stream)], provenance=Provenance("probe", site=site))
        return Job("probe", prog, site)

    def next_job(self) -> Job:
        st = self.state
        if not st.baseline_done:
            return Job("baseline", FaultProgram([]))
        if st.init_cursor < self.init_jobs_total:
            site = self.probe_sites()[st.init_cursor // self.config.probes_per_site]
            st.init_cursor += 1
            return self._probe_job(site)
        if not st.queue:
            eligible = [s for s in self.probe_sites() if s not in st.skip] or \
                [s for s in sorted(self.sites) if s not in st.skip]
            if not eligible:
                raise RuntimeError("every fault site is skip-listed; nothing to fuzz")
            return self._probe_job(self.rng.choice(eligible))
        parent = self.scheduler.pick(st.queue, self.rng)
        kind = self.scheduler.mutation_kind(self.rng)
        result = None
        if kind == "splice" and len(st.queue) > 1:
            other = self.rng.choice([p for p in st.queue if p is not parent])
            result = mutators.splice(parent, other, self.rng)
        elif kind == "extend":
            result = mutators.extend(parent, self.widths, st.skip, self.rng, st.site_hits)
        if result is None:
            kind = "stream"
            result = mutators.mutate_stream(parent, self.rng)
        child, site = result
        return Job(kind, child, site, parent.id)

    # commit

    def commit(self, job: Job, outcome: RunOutcome) -> IterationReport:
        st = self.state
        st.iteration += 1
        verdict = outcome.verdict
        st.verdicts[verdict.value] += 1
        report = IterationReport(st.iteration, job.kind, verdict.value, job.site, job.parent,
                                 bug_id=outcome.bug_id)
        if outcome.hits:
            st.site_hits.update(outcome.hits)

        if job.kind == "baseline":
            st.baseline_done = True
            st.baseline_hits = dict(outcome.hits or {})
            if outcome.coverage is not None:
                st.ever_hit |= np.frombuffer(outcome.coverage.cells, dtype=np.uint8) > 0
                report.novel = len(st.novelty.observe(outcome.coverage).novel_cells)
        elif verdict is Verdict.WEIRD_CRASH_PRE_CONNECT:
            # discarded: coverage never reaches the novelty index
            if job.site is not None:
                st.site_crashes[job.site] += 1
                if job.kind == "probe":
                    st.probe_crashes[job.site] += 1
        else:
            if outcome.coverage is not None:
                st.ever_hit |= np.frombuffer(outcome.coverage.cells, dtype=np.uint8) > 0
            program = self._calibrate(job.program, outcome)
            if verdict is Verdict.TARGET_CRASH:
                program.id = self._take_id()
                program.discovery_time = st.iteration
                crash, new = st.crashes.record(outcome.crash_evidence or [], program, st.iteration, outcome.bug_id)
                report.crash_key, report.new_bucket = crash.bucket_key, new
                if new and self.out_dir:
                    save_crash(os.path.join(self.out_dir, "crashes"), crash)
            elif verdict in ADMISSIBLE and outcome.coverage is not None:
                obs = st.novelty.observe(outcome.coverage)
                report.novel = len(obs.novel_cells)
                if obs.is_novel and program.entries:
                    program.id = self._take_id()
                    program.discovery_time = st.iteration
                    program.novel_cells = tuple(obs.novel_cells)
                    program.favored = bool(obs.new_cells)
                    st.queue.append(program)
                    report.admitted = program.id
                    if self.out_dir:
                        save_program(os.path.join(self.out_dir, "queue"), program)

        if job.kind == "probe" and job.site is not None:
            st.probe_runs[job.site] += 1
            if (st.probe_runs[job.site] >= self.config.probes_per_site
                    and st.probe_crashes[job.site] >= self.config.crash_threshold):
                st.skip.add(job.site)

        self.reports.append(report)
        if self.stats:
            self.stats.row(st.iteration, (time.monotonic() - self._t0) * 1000.0, len(st.queue),
                           len(st.crashes), st.novelty.cells_covered(), verdict.value)
        return report

    def _take_id(self) -> int:
        self.state.next_id += 1
        return self.state.next_id

    def _calibrate(self, program: FaultProgram, outcome: RunOutcome) -> FaultProgram:
        if outcome.hits is None:
            return FaultProgram(program.entries, dict(program.calibration), program.provenance)
        return calibrated(program, outcome.hits, self.widths)

    # standalone operations

    def calibrate(self, orch: Orchestrator, program: FaultProgram) -> FaultProgram | None:
        """Run ``program`` once with hit counting; ``None`` if the run was
        not clean enough to trust its counts."""
        outcome = orch.run_once(program.entries, collect_hits=True)
        if outcome.verdict not in ADMISSIBLE or outcome.hits is None:
            return None
        return calibrated(program, outcome.hits, self.widths)

    # driving loops

    def run(self, orch_or_pool, iterations: int, wall_time_s: float | None = None,
            stop_when: Callable[["FaultCampaign", IterationReport], bool] | None = None) -> "FaultCampaign":
        """Run until ``iterations`` runs were committed (counting all earlier
        ones), the wall-time budget ran out, or ``stop_when`` says so."""
        deadline = None if not wall_time_s else time.monotonic() + wall_time_s
        if isinstance(orch_or_pool, WorkerPool):
            return self._run_pool(orch_or_pool, iterations, deadline, stop_when)
        try:
            while self.state.iteration < iterations:
                if deadline and time.monotonic() >= deadline:
                    break
                job = self.next_job()
                report = self.commit(job, execute(orch_or_pool, job))
                if stop_when and stop_when(self, report):
                    break
        finally:
            self.flush()
        return self

    def _run_pool(self, pool: "WorkerPool", iterations, deadline, stop_when) -> "FaultCampaign":
        pending: dict[cf.Future, Job] = {}
        issued = self.state.iteration
        stop = False
        try:
            while True:
                # the baseline must finish before any probe is generated
                while (not stop and issued < iterations and len(pending) < pool.workers
                       and (self.state.baseline_done or not pending)):
                    if deadline and time.monotonic() >= deadline:
                        break
                    job = self.next_job()
                    pending[pool.submit(job)] = job
                    issued += 1
                    if job.kind == "baseline":
                        break
                if not pending:
                    break
                done, _ = cf.wait(pending, return_when=cf.FIRST_COMPLETED)
                for fut in done:
                    job = pending.pop(fut)
                    report = self.commit(job, fut.result())
                    if stop_when and stop_when(self, report):
                        stop = True
        finally:
            self.flush()
        return self

    def flush(self) -> None:
        if self.stats:
            self.stats.flush()

    def close(self) -> None:
        if self.stats:
            self.stats.close()

    def summary(self) -> dict:
        st = self.state
        return {
            "iterations": st.iteration,
            "queue": len(st.queue),
            "crash_buckets": len(st.crashes),
            "bugs": sorted(st.crashes.bug_ids()),
            "novel_cells_total": st.novelty.cells_covered(),
            "skip_list": sorted(st.skip),
            "verdicts": dict(sorted(st.verdicts.items())),
        }


# multi-worker execution

_worker_orch: Orchestrator | None = None


def _worker_init(weird, target, workdir, workers, counter, orch_kwargs):
    global _worker_orch
    with counter.get_lock():
        index = counter.value
        counter.value += 1
    ports = PortAllocator(worker=index, workers=workers)
    _worker_orch = Orchestrator(weird, target, os.path.join(workdir, f"w{index}"), ports=ports, **orch_kwargs)


def _worker_run(job: Job) -> RunOutcome:
    assert _worker_orch is not None
    return execute(_worker_orch, job)


class WorkerPool:
    """W worker processes, each with its own orchestrator, port class,
    coverage map and working directory."""

    def __init__(self, weird: PeerSpec, target: PeerSpec, workdir: str, workers: int, **orch_kwargs):
        ctx = multiprocessing.get_context("fork")
        self.workers = workers
        counter = ctx.Value("i", 0)
        self._pool = cf.ProcessPoolExecutor(workers, mp_context=ctx, initializer=_worker_init,
                                            initargs=(weird, target, workdir, workers, counter, orch_kwargs))

    def submit(self, job: Job) -> cf.Future:
        return self._pool.submit(_worker_run, job)

    def close(self) -> None:
        self._pool.shutdown(wait=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
