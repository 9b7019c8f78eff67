"""Run one weird-peer/target-peer exchange and classify how it ended.

The server peer is started first.  An instrumented server reports
readiness over the control channel (hooked ``bind``/``listen``); the
client is only started after that.  The orchestrator then waits for either
peer to exit, gives the other one a short drain period, and terminates
whatever is left with a signal.  Coverage is read after the target has
been reaped.
"""

from __future__ import annotations

import enum
import importlib
import mmap
import os
import re
import select
import signal
import socket
import subprocess
import sys
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from . import control, faults
from .coverage import ENV_COVERAGE_MAP, MAP_SIZE, CoverageMap
from .peer import EXIT_UNHANDLED, run_peer

DEFAULT_TIMEOUT_MS = 1000
DEFAULT_DRAIN_MS = 200
DEFAULT_READY_GRACE_MS = 500
KILL_GRACE_MS = 100
PORT_RETRIES = 3


class Role(str, enum.Enum):
    WEIRD = "WeirdPeer"
    TARGET = "TargetPeer"


class Side(str, enum.Enum):
    CLIENT = "Client"
    SERVER = "Server"


class Verdict(str, enum.Enum):
    CLEAN_EXIT = "CleanExit"
    TARGET_CRASH = "TargetCrash"
    WEIRD_CRASH_PRE_CONNECT = "WeirdPeerCrashPreConnect"
    WEIRD_CRASH_POST_CONNECT = "WeirdPeerCrashPostConnect"
    TIMEOUT = "Timeout"


class OrchestratorError(Exception):
    """Campaign-level failure, as opposed to a run verdict."""


@dataclass
class PeerSpec:
    """How to start one peer.

    ``entry`` ("package.module:function" or a callable taking argv) starts
    the peer in a forked child; otherwise ``executable`` is exec'd.  ``args``
    may contain ``{host}`` and ``{port}`` placeholders.
    """

    role: Role
    side: Side
    args: list[str] = field(default_factory=list)
    executable: str | None = None
    entry: str | Callable | None = None
    env: dict[str, str] = field(default_factory=dict)
    startup_grace_ms: int = DEFAULT_READY_GRACE_MS
    instrumented: bool = True
    clean_exit_codes: tuple[int, ...] = (0,)
    name: str = ""

    def __post_init__(self):
        self.role = Role(self.role)
        self.side = Side(self.side)
        if self.entry is None and not self.executable:
            raise ValueError("peer needs an entry point or an executable")

    @property
    def launch(self) -> str:
        return "fork" if self.entry is not None else "exec"

    def render_args(self, host: str, port: int) -> list[str]:
        return [a.replace("{host}", host).replace("{port}", str(port)) for a in self.args]


@dataclass
class RunOutcome:
    verdict: Verdict
    target_exit: int | None
    weird_exit: int | None
    duration_ms: float
    coverage: CoverageMap | None
    crash_evidence: list[str] | None = None
    bug_id: str | None = None
    ready_latency_ms: float | None = None
    hits: dict[int, int] | None = None
    events: list[tuple[float, str, str]] = field(default_factory=list)
    terminated: list[str] = field(default_factory=list)
    port: int = 0
    diagnostics: str = ""
    pids: dict[str, int] = field(default_factory=dict)

    @property
    def discarded(self) -> bool:
        return self.verdict is Verdict.WEIRD_CRASH_PRE_CONNECT

    @property
    def is_crash(self) -> bool:
        return self.verdict is Verdict.TARGET_CRASH


# crash evidence

_BUG_LINE = re.compile(r"^FTN-BUG (\S+)\s*$")
_FRAME_LINE = re.compile(r"^FRAME (\S+)\s*$")
_PY_FRAME = re.compile(r'^\s*File ".*", line \d+, in (\S+)')


def parse_crash_record(text: str) -> tuple[str | None, list[str]]:
    """Bug id and frames (innermost first) from a peer's diagnostics."""
    lines = text.splitlines()
    for i, line in enumerate(lines):
        m = _BUG_LINE.match(line)
        if m:
            frames = []
            for follow in lines[i + 1:]:
                fm = _FRAME_LINE.match(follow)
                if not fm:
                    break
                frames.append(fm.group(1))
            return m.group(1), frames
    # fall back to a Python traceback, which lists the outermost frame first
    py_frames = [m.group(1) for m in map(_PY_FRAME.match, lines) if m]
    if py_frames:
        return None, py_frames[::-1]
    return None, []


def harvest_crash(target_exit: int | None, diagnostics: str) -> list[str]:
    return parse_crash_record(diagnostics)[1]


# ports

class PortAllocator:
    """Hands out local ports.  Workers get disjoint residue classes of the
    range, so concurrent workers never receive the same port."""

    def __init__(self, low: int = 20000, high: int = 32000, worker: int = 0, workers: int = 1):
        self.low, self.high = low, high
        self.worker, self.workers = worker, max(1, workers)
        self._next = 0
        self.in_use: set[int] = set()

    def _candidates(self) -> Iterable[int]:
        span = (self.high - self.low) // self.workers
        for _ in range(span):
            port = self.low + (self._next % span) * self.workers + self.worker
            self._next += 1
            yield port

    def acquire(self) -> int:
        for port in self._candidates():
            if port in self.in_use:
                continue
            with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
                s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
                try:
                    s.bind(("127.0.0.1", port))
                except OSError:
                    continue
            with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
                try:
                    s.bind(("127.0.0.1", port))
                except OSError:
                    continue
            self.in_use.add(port)
            return port
        raise OrchestratorError("no free port left in the allocation range")

    def release(self, port: int) -> None:
        self.in_use.discard(port)


# child processes

def resolve_entry(entry: str | Callable) -> Callable:
    if callable(entry):
        return entry
    module, _, func = entry.partition(":")
    return getattr(importlib.import_module(module), func or "main")


class _Child:
    def __init__(self, label: str, spec: PeerSpec, pid: int, popen: subprocess.Popen | None,
                 ctrl: socket.socket):
        self.label = label
        self.spec = spec
        self.pid = pid
        self.popen = popen
        self.pidfd = os.pidfd_open(pid)
        self.ctrl = ctrl
        self.reader = control.MessageReader()
        self.returncode: int | None = None
        self.killed = False
        self.contacted = False
        self.connected = False

    @property
    def alive(self) -> bool:
        return self.returncode is None

    def reap(self, block: bool = False) -> bool:
        if self.returncode is not None:
            return True
        if self.popen is not None:
            rc = self.popen.wait() if block else self.popen.poll()
            if rc is None:
                return False
            self.returncode = rc
        else:
            pid, status = os.waitpid(self.pid, 0 if block else os.WNOHANG)
            if pid == 0:
                return False
            self.returncode = os.waitstatus_to_exitcode(status)
        return True

    def signal(self, sig: int) -> None:
        try:
            os.killpg(self.pid, sig)
        except (ProcessLookupError, PermissionError):
            try:
                os.kill(self.pid, sig)
            except ProcessLookupError:
                pass

    def close(self) -> None:
        os.close(self.pidfd)
        self.ctrl.close()


class Orchestrator:
    """Supervises one (weird, target) pair; not thread-safe."""

    def __init__(self, weird: PeerSpec, target: PeerSpec, workdir: str, *,
                 timeout_ms: int = DEFAULT_TIMEOUT_MS, drain_ms: int = DEFAULT_DRAIN_MS,
                 ports: PortAllocator | None = None, host: str = "127.0.0.1"):
        if weird.role is not Role.WEIRD or target.role is not Role.TARGET:
            raise ValueError("need exactly one weird peer and one target peer")
        if weird.side is target.side:
            raise ValueError("one peer must be the server and the other the client")
        self.weird = weird
        self.target = target
        self.workdir = os.path.abspath(workdir)
        os.makedirs(self.workdir, exist_ok=True)
        self.timeout_ms = timeout_ms
        self.drain_ms = drain_ms
        self.ports = ports or PortAllocator()
        self.host = host
        self.runs = 0
        self.program_path = os.path.join(self.workdir, "program.ftnp")
        self.hits_path = os.path.join(self.workdir, "hits.txt")
        self.map_path = os.path.join(self.workdir, "coverage.map")
        self.manifest_path = os.path.join(self.workdir, "manifest.txt")
        with open(self.map_path, "wb") as fh:
            fh.write(bytes(MAP_SIZE))
        self._map_fh = open(self.map_path, "r+b")
        self._map = mmap.mmap(self._map_fh.fileno(), MAP_SIZE)

    def close(self) -> None:
        if self._map is not None:
            self._map.close()
            self._map_fh.close()
            self._map = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def server_spec(self) -> PeerSpec:
        return self.weird if self.weird.side is Side.SERVER else self.target

    @property
    def client_spec(self) -> PeerSpec:
        return self.weird if self.weird.side is Side.CLIENT else self.target

    # public API

    def run_once(self, program: Sequence[tuple[int, bytes]] | None = None, *, mode: str = faults.MODE_FAULTING,
                 collect_hits: bool = False, export_manifest: bool = False,
                 extra_env: dict[str, dict[str, str]] | None = None) -> RunOutcome:
        """Run the pair once under ``program`` (empty: identity run).

        ``extra_env`` maps a role value ("WeirdPeer"/"TargetPeer") to
        additional environment for that peer.
        """
        entries = list(program or [])
        for _ in range(PORT_RETRIES):
            outcome = self._attempt(entries, mode, collect_hits, export_manifest, extra_env or {})
            if outcome is not None:
                self.runs += 1
                return outcome
        raise OrchestratorError("server could not bind a port after retries")

    def record_hits(self, program: Sequence[tuple[int, bytes]] | None = None) -> dict[int, int]:
        """Per-site hit counts of a counting-mode run (faults disabled)."""
        outcome = self.run_once(program, mode=faults.MODE_COUNTING, collect_hits=True)
        return outcome.hits or {}

    def manifest(self) -> list[faults.FaultSite]:
        self.run_once(None, mode=faults.MODE_OFF, export_manifest=True)
        with open(self.manifest_path) as fh:
            return faults.parse_manifest(fh.read())

    # one attempt

    def _prepare(self, entries, collect_hits, export_manifest) -> None:
        with open(self.program_path, "wb") as fh:
            fh.write(faults.encode_program(entries))
        for path in (self.hits_path, self.manifest_path):
            if os.path.exists(path):
                os.unlink(path)
        self._map[:] = bytes(MAP_SIZE)

    def _env_for(self, spec: PeerSpec, mode, collect_hits, export_manifest, extra_env) -> dict[str, str]:
        env = dict(spec.env)
        env[control.ENV_SIDE] = spec.side.value
        if spec.role is Role.WEIRD:
            env[faults.ENV_MODE] = mode
            env[faults.ENV_PROGRAM] = self.program_path
            env[faults.ENV_HITS_OUT] = self.hits_path if collect_hits else ""
            env[faults.ENV_MANIFEST_OUT] = self.manifest_path if export_manifest else ""
        else:
            env[ENV_COVERAGE_MAP] = self.map_path
        env.update(extra_env.get(spec.role.value, {}))
        return env

    def _spawn(self, label: str, spec: PeerSpec, port: int, env: dict[str, str],
               close_in_child: list[int]) -> _Child:
        parent_end, child_end = socket.socketpair(socket.AF_UNIX, socket.SOCK_STREAM)
        parent_end.setblocking(False)
        if spec.instrumented:
            env[control.ENV_CONTROL_FD] = str(child_end.fileno())
        else:
            env.pop(control.ENV_CONTROL_FD, None)
        argv = spec.render_args(self.host, port)
        err_path = os.path.join(self.workdir, f"{label}.stderr")
        popen = None
        try:
            if spec.launch == "fork":
                pid = _fork_peer(spec, argv, env, err_path,
                                 close_in_child + [parent_end.fileno()])
            else:
                with open(err_path, "wb") as err:
                    popen = subprocess.Popen(
                        [spec.executable, *argv], env={**os.environ, **env},
                        stdin=subprocess.DEVNULL, stdout=subprocess.DEVNULL, stderr=err,
                        pass_fds=(child_end.fileno(),) if spec.instrumented else (), start_new_session=True)
                pid = popen.pid
        except OSError as exc:
            parent_end.close()
            raise OrchestratorError(f"cannot start {label} peer: {exc}") from exc
        finally:
            child_end.close()
        return _Child(label, spec, pid, popen, parent_end)

    def _attempt(self, entries, mode, collect_hits, export_manifest, extra_env) -> RunOutcome | None:
        port = self.ports.acquire()
        try:
            return self._supervise(port, entries, mode, collect_hits, export_manifest, extra_env)
        finally:
            self.ports.release(port)

    def _supervise(self, port, entries, mode, collect_hits, export_manifest, extra_env) -> RunOutcome | None:
        self._prepare(entries, collect_hits, export_manifest)
        t0 = time.monotonic()
        events: list[tuple[float, str, str]] = []

        def log(source, what):
            events.append(((time.monotonic() - t0) * 1000.0, source, what))

        server_spec, client_spec = self.server_spec, self.client_spec
        server = self._spawn("server", server_spec, port,
                             self._env_for(server_spec, mode, collect_hits, export_manifest, extra_env), [])
        log("server", "spawn")
        children = [server]
        deadline = t0 + self.timeout_ms / 1000.0
        ready = False
        ready_latency = None
        port_conflict = False
        timed_out = False
        client = None
        try:
            grace_end = None if server_spec.instrumented else t0 + server_spec.startup_grace_ms / 1000.0
            while not ready:
                limit = deadline if grace_end is None else min(deadline, grace_end)
                for child, msg in self._wait(children, limit, log):
                    if msg.kind == control.READY:
                        ready = True
                        ready_latency = (time.monotonic() - t0) * 1000.0
                    elif msg.kind == control.PEER_ERROR and "EADDRINUSE" in msg.text:
                        port_conflict = True
                if not server.alive:
                    break
                now = time.monotonic()
                if grace_end is not None and now >= grace_end:
                    ready = True
                    ready_latency = (now - t0) * 1000.0
                elif now >= deadline:
                    timed_out = True
                    break
            if not server.alive and port_conflict:
                return None
            if ready and server.alive:
                client = self._spawn("client", client_spec, port,
                                     self._env_for(client_spec, mode, collect_hits, export_manifest, extra_env),
                                     [server.ctrl.fileno()])
                log("client", "spawn")
                children.append(client)
                drain_end = None
                while any(c.alive for c in children):
                    now = time.monotonic()
                    if drain_end is None and any(not c.alive for c in children):
                        # a client that never reached the server leaves nothing to drain
                        silent = not client.alive and not client.contacted
                        drain_end = now + (0 if silent else self.drain_ms / 1000.0)
                    limit = deadline if drain_end is None else drain_end
                    if now >= limit:
                        timed_out = drain_end is None
                        break
                    list(self._wait(children, limit, log))
            elif server.alive and not timed_out:
                timed_out = time.monotonic() >= deadline
            terminated = self._terminate(children, log)
        except BaseException:
            for child in children:
                if child.alive:
                    child.signal(signal.SIGKILL)
                    child.reap(block=True)
            raise
        finally:
            for child in children:
                child.close()
        duration = (time.monotonic() - t0) * 1000.0
        return self._classify(server, client, timed_out, terminated, events, duration, ready_latency,
                              port, collect_hits)

    def _wait(self, children: list[_Child], limit: float, log):
        """Block until one event (exit or control message) or ``limit``."""
        fds = {}
        for child in children:
            if child.alive:
                fds[child.pidfd] = ("exit", child)
            fds[child.ctrl.fileno()] = ("ctrl", child)
        timeout = max(0.0, limit - time.monotonic())
        try:
            readable, _, _ = select.select(list(fds), [], [], timeout)
        except InterruptedError:
            return
        # control messages first, so the log never shows them after the exit
        for fd in sorted(readable, key=lambda fd: fds[fd][0] == "exit"):
            kind, child = fds[fd]
            if kind == "exit":
                if child.reap():
                    log(child.label, f"exit {child.returncode}")
                continue
            try:
                data = child.ctrl.recv(4096)
            except (BlockingIOError, InterruptedError):
                continue
            except OSError:
                data = b""
            for msg in child.reader.feed(data):
                log(child.label, msg.name)
                self._note(child, msg)
                yield child, msg

    @staticmethod
    def _note(child: _Child, msg) -> None:
        if msg.kind in (control.CONNECTING, control.CONNECTED):
            child.contacted = True
        if msg.kind == control.CONNECTED:
            child.connected = True

    def _drain_control(self, child: _Child, log) -> None:
        while True:
            try:
                data = child.ctrl.recv(4096)
            except (BlockingIOError, InterruptedError, OSError):
                return
            if not data:
                return
            for msg in child.reader.feed(data):
                log(child.label, msg.name)
                self._note(child, msg)

    def _terminate(self, children: list[_Child], log) -> list[str]:
        """Signal every still-running peer, escalating to SIGKILL."""
        terminated = []
        for child in children:
            if child.alive and not child.reap():
                child.killed = True
                terminated.append(child.spec.role.value)
                log(child.label, "SIGTERM")
                child.signal(signal.SIGTERM)
        for sig, grace in ((signal.SIGKILL, KILL_GRACE_MS), (None, 1000)):
            pending = [c for c in children if c.alive and not c.reap()]
            end = time.monotonic() + grace / 1000.0
            while pending and time.monotonic() < end:
                select.select([c.pidfd for c in pending], [], [], max(0.0, end - time.monotonic()))
                pending = [c for c in pending if not c.reap()]
            if not pending:
                break
            if sig is None:
                raise OrchestratorError(f"could not terminate {[c.label for c in pending]}")
            for child in pending:
                log(child.label, "SIGKILL")
                child.signal(sig)
        for child in children:
            self._drain_control(child, log)
        return terminated

    def _classify(self, server, client, timed_out, terminated, events, duration, ready_latency,
                  port, collect_hits) -> RunOutcome:
        by_role = {c.spec.role: c for c in (server, client) if c is not None}
        target = by_role.get(Role.TARGET)
        weird = by_role.get(Role.WEIRD)

        def abnormal(child):
            return (child is not None and child.returncode is not None and not child.killed
                    and child.returncode not in child.spec.clean_exit_codes)

        coverage = CoverageMap(self._map[:], run_id=self.runs) if target is not None else None
        hits = None
        if collect_hits and os.path.exists(self.hits_path):
            with open(self.hits_path) as fh:
                hits = faults.parse_hits(fh.read())
        diagnostics = ""
        crash_evidence = None
        bug_id = None
        if abnormal(target):
            diagnostics = self._read_stderr(target.label)
            bug_id, crash_evidence = parse_crash_record(diagnostics)
            verdict = Verdict.TARGET_CRASH
        elif abnormal(weird):
            diagnostics = self._read_stderr(weird.label)
            verdict = Verdict.WEIRD_CRASH_POST_CONNECT if weird.connected else Verdict.WEIRD_CRASH_PRE_CONNECT
        elif timed_out:
            verdict = Verdict.TIMEOUT
        else:
            verdict = Verdict.CLEAN_EXIT
        return RunOutcome(
            verdict=verdict,
            target_exit=target.returncode if target is not None else None,
            weird_exit=weird.returncode if weird is not None else None,
            duration_ms=duration,
            coverage=coverage,
            crash_evidence=crash_evidence,
            bug_id=bug_id,
            ready_latency_ms=ready_latency,
            hits=hits,
            events=events,
            terminated=terminated,
            port=port,
            diagnostics=diagnostics,
            pids={c.label: c.pid for c in (server, client) if c is not None},
        )

    def _read_stderr(self, label: str) -> str:
        try:
            with open(os.path.join(self.workdir, f"{label}.stderr"), "rb") as fh:
                return fh.read(1 << 16).decode("utf-8", "replace")
        except OSError:
            return ""


def _fork_peer(spec: PeerSpec, argv: list[str], env: dict[str, str], err_path: str,
               close_fds: list[int]) -> int:
    pid = os.fork()
    if pid:
        return pid
    code = EXIT_UNHANDLED
    try:
        os.setsid()
        for fd in close_fds:
            try:
                os.close(fd)
            except OSError:
                pass
        devnull = os.open(os.devnull, os.O_RDWR)
        err = os.open(err_path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o644)
        os.dup2(devnull, 0)
        os.dup2(devnull, 1)
        os.dup2(err, 2)
        os.close(devnull)
        os.close(err)
        sys.stdin = open(0, "r", closefd=False)
        sys.stdout = open(1, "w", closefd=False)
        sys.stderr = open(2, "w", closefd=False)
        for sig in (signal.SIGTERM, signal.SIGINT, signal.SIGHUP, signal.SIGCHLD):
            signal.signal(sig, signal.SIG_DFL)
        os.environ.update(env)
        code = run_peer(resolve_entry(spec.entry), argv)
    except BaseException:  # noqa: BLE001
        try:
            import traceback

            traceback.print_exc()
        except BaseException:  # noqa: BLE001
            pass
    finally:
        os._exit(code)
