"""Entry-point wrapper shared by every peer program.

``run_peer`` installs the control-channel socket hooks, runs the peer's
``main`` and converts the way it ended into an exit status.  Peers that
are started with ``python -m`` call ``exit_with(run_peer(...))`` from
their ``__main__`` block; the orchestrator's fork launcher calls
``run_peer`` directly in the child.
"""

from __future__ import annotations

import os
import sys
import traceback
from typing import Callable, Sequence

from . import control

EXIT_OK = 0
EXIT_USAGE = 2
# uncaught exception inside a peer: the analog of a crash
EXIT_UNHANDLED = 70
# seeded bug oracle fired
EXIT_BUG = 86

ABNORMAL_HINT = "FTN-UNHANDLED"


def run_peer(main: Callable[[Sequence[str]], int | None], argv: Sequence[str]) -> int:
    control.install_from_env()
    try:
        code = main(list(argv))
    except SystemExit as exc:
        code = exc.code
        if code is not None and not isinstance(code, int):
            print(code, file=sys.stderr)
            code = 1
    except BaseException as exc:  # noqa: BLE001 - every escape is a crash here
        print(f"{ABNORMAL_HINT} {type(exc).__name__}: {exc}", file=sys.stderr)
        traceback.print_exc()
        code = EXIT_UNHANDLED
    for stream in (sys.stdout, sys.stderr):
        try:
            stream.flush()
        except (OSError, ValueError):
            pass
    return int(code or 0)


def exit_with(code: int) -> None:
    os._exit(code)
