"""Seeded bug oracles.

A triggered oracle stands in for a sanitizer report: it prints a crash
record (``FTN-BUG <id>`` and ``FRAME <function>`` lines, innermost frame
first) to stderr and terminates the process with ``EXIT_BUG``.
"""

from __future__ import annotations

import os
import sys

from ..peer import EXIT_BUG

B1_LEN_COPY = "B1_len_copy"
B2_DUP_OVERFLOW = "B2_dup_overflow"
B3_USE_AFTER_CLOSE = "B3_use_after_close"
BUG_IDS = (B1_LEN_COPY, B2_DUP_OVERFLOW, B3_USE_AFTER_CLOSE)

TRIGGERS = {
    B1_LEN_COPY: "DATA frame whose inner length exceeds the bytes actually carried",
    B2_DUP_OVERFLOW: "DUP frame duplicating an entry that does not fit the declared table capacity",
    B3_USE_AFTER_CLOSE: "any frame processed after BYE released the session",
}

_TESTBED_DIR = os.path.dirname(os.path.abspath(__file__))


def parse_armed(spec: str | None) -> frozenset[str]:
    if not spec:
        return frozenset()
    armed = set()
    for token in spec.split(","):
        token = token.strip()
        if not token:
            continue
        matches = [b for b in BUG_IDS if b == token or b.split("_", 1)[0] == token]
        if not matches:
            raise ValueError(f"unknown bug id {token!r}")
        armed.add(matches[0])
    return frozenset(armed)


def crash_frames(skip: int = 1) -> list[str]:
    """Testbed function names on the current stack, innermost first."""
    frames = []
    frame = sys._getframe(skip + 1)
    while frame is not None:
        if not os.path.abspath(frame.f_code.co_filename).startswith(_TESTBED_DIR):
            break
        frames.append(frame.f_code.co_name)
        frame = frame.f_back
    return frames


def format_crash_record(bug_id: str, frames: list[str]) -> str:
    return "".join([f"FTN-BUG {bug_id}\n"] + [f"FRAME {name}\n" for name in frames])


def trigger(bug_id: str) -> None:
    record = format_crash_record(bug_id, crash_frames())
    try:
        sys.stdout.flush()
        os.write(2, record.encode())
    finally:
        os._exit(EXIT_BUG)
