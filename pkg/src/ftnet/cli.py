"""Command-line front end.

    ftnet run --mode fault --iterations 2000 --seed 7 --out out/
    ftnet reproduce out/crashes/id-000003,src-stream.1,time-000118
    ftnet stats run1/stats.csv run2/stats.csv -o merged.csv

Exit status: 0 on success, 2 on usage errors, 3 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, fields

from . import __version__, config as cfgmod, faults, stats
from .baseline import ENV_REPLAY, ReplayCampaign, record_transcript, replay_peer
from .config import CampaignConfig, ConfigError
from .coverage import CoverageMap
from .fuzzer.campaign import FaultCampaign, WorkerPool
from .fuzzer.program import load_program
from .fuzzer.triage import dedup_key, format_key, read_sidecar
from .orchestrator import Orchestrator, OrchestratorError, Role, Verdict
from .testbed import bugs
from .testbed.server import POST_HANDSHAKE_CELL_MIN

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


class UsageError(Exception):
    pass


# flags mirror config keys: --<key> for the module sections,
# --weird-<key>/--target-<key> for the peer sections

def _flag(section: str, key: str) -> str:
    name = key.replace("_", "-")
    return f"--{section}-{name}" if section in ("weird", "target") else f"--{name}"


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="campaign config file")
    defaults = CampaignConfig()
    for section in cfgmod.SECTIONS:
        group = p.add_argument_group(f"[{section}]")
        for f in fields(getattr(defaults, section)):
            flag = _flag(section, f.name)
            if f.name == "output_dir":
                group.add_argument("--out", flag, dest=f"{section}.{f.name}", metavar="DIR",
                                   help="output directory (config: campaign.output_dir)")
                continue
            group.add_argument(flag, dest=f"{section}.{f.name}", metavar=f.name.upper(),
                               help=f"config: {section}.{f.name} (default {getattr(getattr(defaults, section), f.name)!r})")


def config_from_args(args) -> CampaignConfig:
    config = cfgmod.load(args.config) if args.config else CampaignConfig()
    for dest, value in vars(args).items():
        if "." not in dest or value is None:
            continue
        section, key = dest.split(".", 1)
        cfgmod.set_value(config, section, key, value, where=_flag(section, key))
    return config.validate()


# run

def _prepare_out(config: CampaignConfig) -> str:
    out = os.path.abspath(config.campaign.output_dir)
    os.makedirs(out, exist_ok=True)
    cfgmod.dump(config, os.path.join(out, "campaign.ini"))
    return out


def _write_summary(out: str, summary: dict) -> None:
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_identity_check(config: CampaignConfig, out: str) -> dict:
    """Run the identity program repeatedly and compare maps and transcripts."""
    from .testbed.client import ENV_TRANSCRIPT_OUT

    weird, target = config.peer_specs()
    maps, transcripts, verdicts = [], [], []
    os.makedirs(os.path.join(out, "queue"), exist_ok=True)
    with Orchestrator(weird, target, os.path.join(out, "work"), **config.orchestrator_kwargs()) as orch:
        for i in range(config.campaign.identity_runs):
            path = os.path.join(out, "work", f"identity-{i}.transcript")
            outcome = orch.run_once(None, extra_env={Role.WEIRD.value: {ENV_TRANSCRIPT_OUT: path}})
            verdicts.append(outcome.verdict.value)
            maps.append(outcome.coverage.to_bytes() if outcome.coverage else b"")
            with open(path, "rb") if os.path.exists(path) else open(os.devnull, "rb") as fh:
                transcripts.append(fh.read())
    stable = len(set(maps)) == 1 and len(set(transcripts)) == 1 and set(verdicts) == {Verdict.CLEAN_EXIT.value}
    CoverageMap(maps[0]).dump(os.path.join(out, "baseline.map"))
    with open(os.path.join(out, "baseline.transcript"), "wb") as fh:
        fh.write(transcripts[0])
    return {"mode": "identity-check", "verdict": "stable" if stable else "unstable", "runs": len(maps),
            "queue": 0, "verdicts": verdicts, "cells": CoverageMap(maps[0]).hit_count()}


def run_fault(config: CampaignConfig, out: str) -> dict:
    weird, target = config.peer_specs()
    work = os.path.join(out, "work")
    kwargs = config.orchestrator_kwargs()
    with Orchestrator(weird, target, os.path.join(work, "main"), **kwargs) as orch:
        sites = orch.manifest()
        if not sites:
            raise UsageError("fault mode needs a weird peer that exports a site manifest")
        with open(os.path.join(out, "manifest.txt"), "w") as fh:
            fh.write("".join(s.manifest_line() + "\n" for s in sites))
        campaign = FaultCampaign(sites, config.campaign.seed, config.scheduler, out)
        try:
            if config.campaign.workers > 1:
                with WorkerPool(weird, target, work, config.campaign.workers, **kwargs) as pool:
                    campaign.run(pool, _budget(config), config.campaign.wall_time_s)
            else:
                campaign.run(orch, _budget(config), config.campaign.wall_time_s)
        finally:
            campaign.close()
            _write_summary(out, _fault_summary(campaign))
    return _fault_summary(campaign)


def _budget(config: CampaignConfig) -> int:
    return config.campaign.iterations if config.campaign.iterations > 0 else sys.maxsize


def _fault_summary(campaign) -> dict:
    summary = {"mode": "fault", **campaign.summary()}
    summary["post_handshake_reached"] = campaign.state.reached(POST_HANDSHAKE_CELL_MIN)
    return summary


def run_baseline(config: CampaignConfig, out: str) -> dict:
    weird, target = config.peer_specs()
    work = os.path.join(out, "work")
    path = config.campaign.transcript
    if not path:
        path = os.path.join(out, "seed.transcript")
        _, outcome = record_transcript(weird, target, os.path.join(work, "record"), path)
        if outcome.verdict is not Verdict.CLEAN_EXIT:
            raise OrchestratorError(f"recording the seed session ended with {outcome.verdict.value}")
    from .testbed.wire import Transcript

    transcript = Transcript.load(path)
    replayer = replay_peer(target, config.testbed.transport)
    with Orchestrator(replayer, target, os.path.join(work, "main"), **config.orchestrator_kwargs()) as orch:
        campaign = ReplayCampaign(transcript, config.campaign.seed, out)
        try:
            campaign.run(orch, _budget(config), config.campaign.wall_time_s)
        finally:
            campaign.close()
            summary = {"mode": "baseline", **campaign.summary(),
                       "post_handshake_reached": campaign.state.reached(POST_HANDSHAKE_CELL_MIN)}
            _write_summary(out, summary)
    return summary


def cmd_run(args) -> int:
    config = config_from_args(args)
    if config.campaign.mode == "reproduce":
        if not config.campaign.crash_entry:
            raise UsageError("reproduce mode needs campaign.crash_entry")
        return _print_reproduce(reproduce(config.campaign.crash_entry, config))
    out = _prepare_out(config)
    runner = {"fault": run_fault, "baseline": run_baseline, "identity-check": run_identity_check}
    summary = runner[config.campaign.mode](config, out)
    _write_summary(out, summary)
    for key in sorted(summary):
        print(f"{key}: {summary[key]}")
    return EXIT_OK


# reproduce

@dataclass
class ReproduceResult:
    runs: int
    reproduced: int
    key_match: bool
    expected_key: tuple[str, ...] | None
    observed_keys: list[tuple[str, ...]]
    hint: str = ""

    @property
    def ok(self) -> bool:
        return self.reproduced == self.runs and self.key_match


def _find_config(entry: str) -> str | None:
    directory = os.path.dirname(os.path.abspath(entry))
    for _ in range(3):
        candidate = os.path.join(directory, "campaign.ini")
        if os.path.exists(candidate):
            return candidate
        directory = os.path.dirname(directory)
    return None


def reproduce(entry: str, config: CampaignConfig, runs: int = 5, workdir: str | None = None) -> ReproduceResult:
    if not os.path.exists(entry):
        raise UsageError(f"crash entry {entry} does not exist")
    sidecar_path = entry + ".txt"
    if not os.path.exists(sidecar_path):
        raise UsageError(f"crash entry {entry} has no sidecar {os.path.basename(sidecar_path)}")
    sidecar = read_sidecar(sidecar_path)
    expected = sidecar.get("key")
    weird, target = config.peer_specs()
    with open(entry, "rb") as fh:
        is_program = fh.read(4) == faults.PROGRAM_MAGIC
    extra = {}
    program = None
    if is_program:
        program = load_program(entry).entries
    else:
        weird = replay_peer(target, config.testbed.transport)
        extra = {Role.WEIRD.value: {ENV_REPLAY: os.path.abspath(entry)}}
    workdir = workdir or os.path.join(os.path.abspath(config.campaign.output_dir), "work", "reproduce")
    keys = []
    with Orchestrator(weird, target, workdir, **config.orchestrator_kwargs()) as orch:
        for _ in range(runs):
            outcome = orch.run_once(program, extra_env=extra)
            if outcome.verdict is Verdict.TARGET_CRASH:
                keys.append(dedup_key(outcome.crash_evidence or []))
    key_match = bool(keys) and all(k == expected for k in keys)
    hint = ""
    bug = sidecar.get("bug", "-")
    if not keys and bug in bugs.BUG_IDS and bug not in bugs.parse_armed(config.testbed.arm):
        hint = f"bug not armed: {bug} is not in testbed.arm"
    return ReproduceResult(runs, len(keys), key_match, expected, keys, hint)


def _print_reproduce(result: ReproduceResult) -> int:
    print(f"reproduced: {result.reproduced}/{result.runs}")
    print(f"key-match: {'yes' if result.key_match else 'no'}")
    if result.expected_key:
        print(f"expected-key: {format_key(result.expected_key)}")
    for key in sorted(set(result.observed_keys)):
        print(f"observed-key: {format_key(key)}")
    if result.hint:
        print(f"hint: {result.hint}")
    return EXIT_OK


def cmd_reproduce(args) -> int:
    if not args.config:
        args.config = _find_config(args.entry)
    config = config_from_args(args)
    return _print_reproduce(reproduce(args.entry, config, args.runs))


# stats

def cmd_stats(args) -> int:
    try:
        rows = stats.merge_files(args.files)
    except OSError as exc:
        raise UsageError(f"cannot read {exc.filename}: {exc.strerror}") from None
    except stats.SchemaError as exc:
        raise UsageError(str(exc)) from None
    if args.output:
        with open(args.output, "w", newline="") as fh:
            stats.write_merged(rows, fh)
    else:
        stats.write_merged(rows, sys.stdout)
    return EXIT_OK


def cmd_config(args) -> int:
    sys.stdout.write(cfgmod.serialize(config_from_args(args)))
    return EXIT_OK


def cmd_testbed(args) -> int:
    from .peer import run_peer
    from .testbed import client, server

    main = server.main if args.role == "server" else client.main
    return run_peer(main, args.rest)


def cmd_manifest(args) -> int:
    from .testbed.client import RT

    sys.stdout.write(RT.manifest())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ftnet", description="Fault-injection fuzzing through a weird peer.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a campaign (fault, baseline, identity-check, reproduce)")
    _add_config_flags(run)
    run.set_defaults(func=cmd_run)

    rep = sub.add_parser("reproduce", help="re-run a crash entry and check its bucket key")
    rep.add_argument("entry")
    rep.add_argument("--runs", type=int, default=5)
    _add_config_flags(rep)
    rep.set_defaults(func=cmd_reproduce)

    st = sub.add_parser("stats", help="merge stats CSVs into median and 17/83 percentile columns")
    st.add_argument("files", nargs="+")
    st.add_argument("-o", "--output")
    st.set_defaults(func=cmd_stats)

    cf = sub.add_parser("config", help="print the effective config in file form")
    _add_config_flags(cf)
    cf.set_defaults(func=cmd_config)

    tb = sub.add_parser("testbed", help="run a testbed peer by hand")
    tb.add_argument("role", choices=("server", "client"))
    tb.add_argument("rest", nargs=argparse.REMAINDER)
    tb.set_defaults(func=cmd_testbed)

    mf = sub.add_parser("manifest", help="print the testbed client's fault-site manifest")
    mf.set_defaults(func=cmd_manifest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"ftnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OrchestratorError, OSError, RuntimeError) as exc:
        print(f"ftnet: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
