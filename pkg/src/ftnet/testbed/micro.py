"""Tiny peers for exercising the orchestrator and fuzzer without the full
TinyChat handshake.

The weird side runs ``--loops`` iterations over three fault sites of
widths 1, 8 and 64 bits and sends the (possibly faulted) values to the
other side.  The target side turns every received byte into a coverage
location, so faults translate directly into new coverage.
"""

from __future__ import annotations

import argparse
import socket
import struct
import sys
import time

from ..coverage import CoverageRecorder
from ..faults import FaultRuntime, branch_site, value_site
from ..peer import exit_with, run_peer
from . import bugs

RT = FaultRuntime("micro-weird")
SITE_FLAG = RT.register_site(branch_site(201, "micro.py:payload:flag"))
SITE_BYTE = RT.register_site(value_site(208, "micro.py:payload:byte", 8))
SITE_WORD = RT.register_site(value_site(264, "micro.py:payload:word", 64))
# any nonzero bit aborts before connecting
SITE_FATAL = RT.register_site(value_site(299, "micro.py:setup:fatal", 8))

CRASH_BUG = "B1_len_copy"


def _args(prog: str, weird: bool) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog=prog)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, required=True)
    p.add_argument("--hang", action="store_true", help="block forever after connecting")
    if weird:
        p.add_argument("--loops", type=int, default=1)
    else:
        p.add_argument("--crash-on", type=lambda s: int(s, 0), default=None,
                       help="trigger the bug oracle when this byte value arrives")
    return p


def faulted_payload(loops: int) -> bytes:
    if RT.value(SITE_FATAL, 0):
        raise RuntimeError("fatal setup fault")
    out = bytearray()
    for i in range(loops):
        flag = RT.branch(SITE_FLAG, False)
        byte = RT.value(SITE_BYTE, i & 0x7F)
        word = RT.value(SITE_WORD, i)
        out.append(0x80 | byte if flag else byte)
        out += struct.pack("<Q", word & 0xFFFFFFFFFFFFFFFF)
    return bytes(out)


def consume(data: bytes, recorder: CoverageRecorder, crash_on: int | None) -> None:
    for b in data:
        recorder.visit(0x1000 + b)
        if crash_on is not None and b == crash_on:
            _crash()


def _crash():
    bugs.trigger(CRASH_BUG)


def _read_all(conn: socket.socket) -> bytes:
    chunks = []
    while True:
        chunk = conn.recv(65536)
        if not chunk:
            return b"".join(chunks)
        chunks.append(chunk)


def _hang():
    while True:
        time.sleep(3600)


def _listen(host: str, port: int) -> socket.socket:
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen(1)
    return srv


def weird_client_main(argv=None) -> int:
    args = _args("micro-weird-client", True).parse_args(argv)
    with RT.session():
        payload = faulted_payload(args.loops)
        with socket.create_connection((args.host, args.port), timeout=2.0) as conn:
            if args.hang:
                _hang()
            conn.sendall(payload)
            conn.shutdown(socket.SHUT_WR)
            _read_all(conn)
    return 0


def target_server_main(argv=None) -> int:
    args = _args("micro-target-server", False).parse_args(argv)
    recorder = CoverageRecorder.from_env()
    recorder.visit(0x10)
    srv = _listen(args.host, args.port)
    conn, _ = srv.accept()
    recorder.visit(0x11)
    if args.hang:
        _hang()
    with conn:
        consume(_read_all(conn), recorder, args.crash_on)
    srv.close()
    recorder.close()
    return 0


def weird_server_main(argv=None) -> int:
    args = _args("micro-weird-server", True).parse_args(argv)
    with RT.session():
        payload = faulted_payload(args.loops)
        srv = _listen(args.host, args.port)
        conn, _ = srv.accept()
        with conn:
            conn.sendall(payload)
        srv.close()
    return 0


def target_client_main(argv=None) -> int:
    args = _args("micro-target-client", False).parse_args(argv)
    recorder = CoverageRecorder.from_env()
    recorder.visit(0x20)
    with socket.create_connection((args.host, args.port), timeout=2.0) as conn:
        consume(_read_all(conn), recorder, args.crash_on)
    recorder.close()
    return 0


def plain_server_main(argv=None) -> int:
    """A target server whose readiness is never reported (no hooks)."""
    args = _args("plain-server", False).parse_args(argv)
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((args.host, args.port))
    srv.listen(1)
    conn, _ = srv.accept()
    with conn:
        _read_all(conn)
    return 0


ENTRIES = {
    "weird-client": weird_client_main,
    "target-server": target_server_main,
    "weird-server": weird_server_main,
    "target-client": target_client_main,
    "plain-server": plain_server_main,
}

if __name__ == "__main__":
    if len(sys.argv) < 2 or sys.argv[1] not in ENTRIES:
        print(f"usage: micro {{{','.join(ENTRIES)}}} ...", file=sys.stderr)
        exit_with(2)
    exit_with(run_peer(ENTRIES[sys.argv[1]], sys.argv[2:]))
