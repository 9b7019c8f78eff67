"""Transcript-replay baseline fuzzer.

It mutates the client side of a recorded session with the same byte
operators as the fault fuzzer, replays it at the target and keeps
mutants that produce new coverage.  Server replies are read and thrown
away, so the replayer cannot adapt to per-session values such as nonces.
"""

from __future__ import annotations

import argparse
import os
import random
import socket
import time
from dataclasses import dataclass, field

import numpy as np

from .coverage import MAP_SIZE, NoveltyIndex
from .fuzzer import mutators
from .fuzzer.campaign import ADMISSIBLE, IterationReport
from .fuzzer.program import Provenance, corpus_name
from .fuzzer.triage import CrashTable
from .orchestrator import Orchestrator, PeerSpec, Role, RunOutcome, Side, Verdict
from .peer import exit_with, run_peer
from .stats import StatsWriter
from .testbed.wire import CLIENT_TO_SERVER, Transcript

ENV_REPLAY = "FTN_REPLAY_TRANSCRIPT"
REPLAY_ENTRY = "ftnet.baseline:replay_peer_main"
UDP_REPLY_WAIT_S = 0.005
TCP_DRAIN_S = 0.3


# the replaying peer

def _connect(sock_type: int, host: str, port: int) -> socket.socket:
    for attempt in range(2):
        sock = socket.socket(socket.AF_INET, sock_type)
        try:
            sock.connect((host, port))
            return sock
        except ConnectionRefusedError:
            sock.close()
            if attempt:
                raise
            time.sleep(0.01)
    raise AssertionError("unreachable")


def replay_tcp(records: list[bytes], host: str, port: int, drain_s: float = TCP_DRAIN_S) -> None:
    with _connect(socket.SOCK_STREAM, host, port) as sock:
        try:
            for rec in records:
                sock.sendall(rec)
            sock.shutdown(socket.SHUT_WR)
        except OSError:
            return  # the server hung up early; nothing left to learn
        sock.settimeout(drain_s)
        try:
            while sock.recv(65536):
                pass
        except OSError:
            pass


def replay_udp(records: list[bytes], host: str, port: int, wait_s: float = UDP_REPLY_WAIT_S) -> None:
    with _connect(socket.SOCK_DGRAM, host, port) as sock:
        sock.settimeout(wait_s)
        for rec in records:
            try:
                sock.send(rec)
            except OSError:
                return
            try:
                while sock.recv(65536):
                    pass
            except OSError:
                pass


def replay_peer_main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="ftnet-replay")
    p.add_argument("--transport", choices=("tcp", "udp"), default="tcp")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, required=True)
    p.add_argument("--transcript", default=None)
    args, _ = p.parse_known_args(argv)
    path = args.transcript or os.environ.get(ENV_REPLAY)
    if not path:
        p.error("no transcript given")
    records = Transcript.load(path).client_records()
    if args.transport == "tcp":
        replay_tcp(records, args.host, args.port)
    else:
        replay_udp(records, args.host, args.port)
    return 0


def replay_peer(target: PeerSpec, transport: str = "tcp") -> PeerSpec:
    side = Side.CLIENT if target.side is Side.SERVER else Side.SERVER
    return PeerSpec(Role.WEIRD, side, ["--transport", transport, "--host", "{host}", "--port", "{port}"],
                    entry=REPLAY_ENTRY, name="replay")


# the campaign

@dataclass
class ReplayEntry:
    records: list[bytes]
    provenance: Provenance
    discovery_time: int = 0
    id: int = 0

    def transcript(self) -> Transcript:
        return Transcript([(CLIENT_TO_SERVER, r) for r in self.records])


@dataclass
class ReplayState:
    corpus: list[ReplayEntry] = field(default_factory=list)
    novelty: NoveltyIndex = field(default_factory=NoveltyIndex)
    crashes: CrashTable = field(default_factory=CrashTable)
    ever_hit: np.ndarray = field(default_factory=lambda: np.zeros(MAP_SIZE, dtype=bool))
    iteration: int = 0
    next_id: int = 0
    failed: int = 0

    def reached(self, low: int, high: int = MAP_SIZE) -> bool:
        return bool(self.ever_hit[low:high].any())


class ReplayCampaign:
    def __init__(self, transcript: Transcript, seed: int = 0, out_dir: str | None = None):
        seed_records = transcript.client_records()
        if not seed_records:
            raise ValueError("transcript has no client records")
        self.rng = random.Random(seed)
        self.state = ReplayState()
        self.state.corpus.append(ReplayEntry(seed_records, Provenance("seed")))
        self.reports: list[IterationReport] = []
        self.out_dir = out_dir
        self.stats = None
        self._t0 = time.monotonic()
        if out_dir:
            for sub in ("queue", "crashes"):
                os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
            self.stats = StatsWriter(os.path.join(out_dir, "stats.csv"))

    def next_job(self) -> tuple[ReplayEntry, int | None]:
        """The mutated records and the index of the mutated record; the
        first iteration replays the seed unmodified."""
        if self.state.iteration == 0:
            return self.state.corpus[0], None
        parent = self.rng.choice(self.state.corpus)
        index = self.rng.randrange(len(parent.records))
        records = list(parent.records)
        records[index] = mutators.havoc_changed(records[index], self.rng) if records[index] else records[index]
        return ReplayEntry(records, Provenance("stream", (parent.id,))), index

    def execute(self, orch: Orchestrator, entry: ReplayEntry) -> RunOutcome:
        path = os.path.join(orch.workdir, "replay.bin")
        entry.transcript().save(path)
        return orch.run_once(None, extra_env={Role.WEIRD.value: {ENV_REPLAY: path}})

    def commit(self, entry: ReplayEntry, index: int | None, outcome: RunOutcome) -> IterationReport:
        st = self.state
        st.iteration += 1
        verdict = outcome.verdict
        report = IterationReport(st.iteration, "replay", verdict.value, index, entry.provenance.parents[0]
                                 if entry.provenance.parents else None, bug_id=outcome.bug_id)
        if outcome.coverage is not None:
            # every run counts toward reach, discarded ones included
            st.ever_hit |= np.frombuffer(outcome.coverage.cells, dtype=np.uint8) > 0
        if verdict is Verdict.WEIRD_CRASH_PRE_CONNECT:
            st.failed += 1
        elif outcome.coverage is not None:
            if verdict is Verdict.TARGET_CRASH:
                st.next_id += 1
                entry.id, entry.discovery_time = st.next_id, st.iteration
                crash, new = st.crashes.record(outcome.crash_evidence or [], entry, st.iteration, outcome.bug_id)
                report.crash_key, report.new_bucket = crash.bucket_key, new
                if new and self.out_dir:
                    path = self._save(os.path.join(self.out_dir, "crashes"), entry)
                    with open(path + ".txt", "w") as fh:
                        fh.write(crash.sidecar())
            elif verdict in ADMISSIBLE:
                obs = st.novelty.observe(outcome.coverage)
                report.novel = len(obs.novel_cells)
                if obs.is_novel and st.iteration > 1:
                    st.next_id += 1
                    entry.id, entry.discovery_time = st.next_id, st.iteration
                    st.corpus.append(entry)
                    report.admitted = entry.id
                    if self.out_dir:
                        self._save(os.path.join(self.out_dir, "queue"), entry)
        self.reports.append(report)
        if self.stats:
            self.stats.row(st.iteration, (time.monotonic() - self._t0) * 1000.0, len(st.corpus) - 1,
                           len(st.crashes), st.novelty.cells_covered(), verdict.value)
        return report

    def _save(self, directory: str, entry: ReplayEntry) -> str:
        path = os.path.join(directory, corpus_name(entry.id, entry.provenance, entry.discovery_time))
        entry.transcript().save(path)
        return path

    def run(self, orch: Orchestrator, iterations: int, wall_time_s: float | None = None,
            stop_when=None) -> "ReplayCampaign":
        deadline = None if not wall_time_s else time.monotonic() + wall_time_s
        try:
            while self.state.iteration < iterations:
                if deadline and time.monotonic() >= deadline:
                    break
                entry, index = self.next_job()
                report = self.commit(entry, index, self.execute(orch, entry))
                if stop_when and stop_when(self, report):
                    break
        finally:
            if self.stats:
                self.stats.flush()
        return self

    def close(self) -> None:
        if self.stats:
            self.stats.close()

    def summary(self) -> dict:
        st = self.state
        return {
            "iterations": st.iteration,
            "queue": len(st.corpus) - 1,
            "crash_buckets": len(st.crashes),
            "bugs": sorted(st.crashes.bug_ids()),
            "novel_cells_total": st.novelty.cells_covered(),
            "failed_iterations": st.failed,
        }


def record_transcript(weird: PeerSpec, target: PeerSpec, workdir: str, path: str) -> tuple[Transcript, RunOutcome]:
    """Record one identity session between the bundled testbed peers."""
    from .testbed.client import ENV_TRANSCRIPT_OUT

    with Orchestrator(weird, target, workdir) as orch:
        outcome = orch.run_once(None, extra_env={Role.WEIRD.value: {ENV_TRANSCRIPT_OUT: path}})
    return Transcript.load(path), outcome


if __name__ == "__main__":
    import sys

    exit_with(run_peer(replay_peer_main, sys.argv[1:]))
