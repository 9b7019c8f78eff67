"""Crash bucketing."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

from .program import FaultProgram, save_program

KEY_DEPTH = 5
SENTINEL = "<none>"


def dedup_key(frames) -> tuple[str, ...]:
    head = list(frames)[:KEY_DEPTH]
    return tuple(head + [SENTINEL] * (KEY_DEPTH - len(head)))


KEY_SEPARATOR = " > "


def format_key(key) -> str:
    return KEY_SEPARATOR.join(key)


def parse_key(text: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in text.strip().split(KEY_SEPARATOR))


@dataclass
class CrashReport:
    bucket_key: tuple[str, ...]
    program: FaultProgram
    first_seen: int
    count: int = 1
    frames: list[str] = field(default_factory=list)
    bug_id: str | None = None

    def sidecar(self) -> str:
        lines = [f"key: {format_key(self.bucket_key)}",
                 f"bug: {self.bug_id or '-'}",
                 f"first_seen: {self.first_seen}"]
        lines += [f"frame: {f}" for f in self.frames]
        return "\n".join(lines) + "\n"


def read_sidecar(path: str) -> dict:
    out: dict = {"frames": []}
    with open(path) as fh:
        for line in fh:
            name, _, value = line.rstrip("\n").partition(": ")
            if name == "frame":
                out["frames"].append(value)
            elif name == "key":
                out["key"] = parse_key(value)
            elif name:
                out[name] = value
    return out


class CrashTable:
    def __init__(self):
        self.reports: dict[tuple[str, ...], CrashReport] = {}

    def __len__(self):
        return len(self.reports)

    def record(self, frames: list[str], program: FaultProgram, clock: int,
               bug_id: str | None = None) -> tuple[CrashReport, bool]:
        """Add one crash; returns the bucket's report and whether it is new."""
        key = dedup_key(frames)
        report = self.reports.get(key)
        if report is not None:
            report.count += 1
            return report, False
        report = CrashReport(key, program, clock, 1, list(frames), bug_id)
        self.reports[key] = report
        return report, True

    def bug_ids(self) -> set[str]:
        return {r.bug_id for r in self.reports.values() if r.bug_id}


def save_crash(directory: str, report: CrashReport) -> str:
    path = save_program(directory, report.program)
    with open(path + ".txt", "w") as fh:
        fh.write(report.sidecar())
    return path
