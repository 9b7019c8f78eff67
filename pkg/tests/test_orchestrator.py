import socket
import sys

import pytest
from hypothesis import given, settings, strategies as st

from conftest import assert_no_orphans, live_children
from ftnet.orchestrator import (Orchestrator, OrchestratorError, PeerSpec, PortAllocator, Role, Side, Verdict,
                                harvest_crash, parse_crash_record)
from ftnet.testbed.peers import micro_pair, tinychat_pair


def labels(outcome):
    return [(source, what) for _, source, what in outcome.events]


def test_client_spawned_only_after_ready(micro):
    outcome = micro().run_once()
    seq = labels(outcome)
    assert seq.index(("server", "Ready")) < seq.index(("client", "spawn"))
    assert outcome.verdict is Verdict.CLEAN_EXIT
    assert outcome.ready_latency_ms is not None


def test_clean_run_has_coverage_and_no_orphans(micro):
    outcome = micro(loops=3).run_once()
    assert outcome.coverage is not None and outcome.coverage.hit_cells()
    assert outcome.terminated == []
    assert_no_orphans(outcome)


def test_hang_times_out_near_timeout(micro):
    orch = micro(hang=True, timeout_ms=400, drain_ms=100)
    outcome = orch.run_once()
    assert outcome.verdict is Verdict.TIMEOUT
    assert 400 <= outcome.duration_ms < 400 + 100 + 600
    assert set(outcome.terminated) == {Role.WEIRD.value, Role.TARGET.value}
    assert_no_orphans(outcome)


def test_target_crash_carries_evidence(micro):
    # byte 0 of the first loop iteration is 0; fault it to 0x41
    outcome = micro(crash_on=0x41).run_once([(208, b"\x41")])
    assert outcome.verdict is Verdict.TARGET_CRASH
    assert outcome.bug_id == "B1_len_copy"
    assert outcome.crash_evidence
    assert_no_orphans(outcome)


def test_weird_crash_before_connect_is_discarded(micro):
    outcome = micro(timeout_ms=2000).run_once([(299, b"\x01")])
    assert outcome.verdict is Verdict.WEIRD_CRASH_PRE_CONNECT
    assert outcome.discarded
    # no drain for a client that never reached the server
    assert outcome.duration_ms < 1000
    assert_no_orphans(outcome)


def crashing_client(argv):
    port = int(argv[argv.index("--port") + 1])
    with socket.create_connection(("127.0.0.1", port)):
        raise RuntimeError("weird peer blew up mid-session")


def test_weird_crash_after_connect_is_kept(tmp_path):
    _, target = micro_pair()
    weird = PeerSpec(Role.WEIRD, Side.CLIENT, ["--port", "{port}"], entry=crashing_client)
    with Orchestrator(weird, target, str(tmp_path)) as orch:
        outcome = orch.run_once()
    assert outcome.verdict is Verdict.WEIRD_CRASH_POST_CONNECT
    assert not outcome.discarded
    assert "mid-session" in outcome.diagnostics


def test_role_swap_weird_server(micro):
    orch = micro(swapped=True, loops=2)
    identity = orch.run_once()
    faulted = orch.run_once([(201, b"\x01")])
    assert orch.server_spec.role is Role.WEIRD
    assert labels(faulted)[0] == ("server", "spawn")
    assert faulted.verdict is identity.verdict is Verdict.CLEAN_EXIT
    assert faulted.coverage.hit_cells() != identity.coverage.hit_cells()


def test_uninstrumented_exec_server_uses_grace(tmp_path):
    weird, _ = micro_pair()
    target = PeerSpec(Role.TARGET, Side.SERVER, ["-m", "ftnet.testbed.micro", "plain-server",
                                                 "--host", "{host}", "--port", "{port}"],
                      executable=sys.executable, instrumented=False, startup_grace_ms=700)
    with Orchestrator(weird, target, str(tmp_path), timeout_ms=3000) as orch:
        outcome = orch.run_once()
    assert outcome.verdict is Verdict.CLEAN_EXIT
    assert outcome.ready_latency_ms >= 700
    assert ("server", "Ready") not in labels(outcome)


def test_udp_server_left_waiting_is_terminated_cleanly(tinychat):
    # 5th dispatch (BYE) goes to the default arm: the server never hears goodbye
    orch = tinychat(transport="udp", seed=1, timeout_ms=1000, drain_ms=200)
    outcome = orch.run_once([(50, b"\x00\x00\x00\x00\x01")])
    assert outcome.verdict is Verdict.CLEAN_EXIT
    assert outcome.terminated == [Role.TARGET.value]
    assert outcome.duration_ms <= 1000 + 200 + 150
    assert_no_orphans(outcome)


def test_spawn_failure_is_orchestrator_error(tmp_path):
    weird, target = micro_pair()
    bad = PeerSpec(Role.TARGET, Side.SERVER, [], executable=str(tmp_path / "missing-binary"))
    with Orchestrator(weird, bad, str(tmp_path)) as orch:
        with pytest.raises(OrchestratorError):
            orch.run_once()


class BusyPorts(PortAllocator):
    """Hands out an occupied port ``busy`` times, then defers to the base."""

    def __init__(self, port, busy):
        super().__init__()
        self.port, self.busy = port, busy

    def acquire(self):
        if self.busy:
            self.busy -= 1
            return self.port
        return super().acquire()


@pytest.fixture
def occupied_port():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    s.listen(1)
    yield s.getsockname()[1]
    s.close()


def test_port_conflict_is_retried(tmp_path, occupied_port):
    weird, target = micro_pair()
    with Orchestrator(weird, target, str(tmp_path), ports=BusyPorts(occupied_port, 2)) as orch:
        assert orch.run_once().verdict is Verdict.CLEAN_EXIT


def test_port_conflict_retries_exhaust(tmp_path, occupied_port):
    weird, target = micro_pair()
    with Orchestrator(weird, target, str(tmp_path), ports=BusyPorts(occupied_port, 99)) as orch:
        with pytest.raises(OrchestratorError):
            orch.run_once()


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 20))
def test_worker_port_ranges_are_disjoint(workers, draws):
    seen = {}
    for w in range(workers):
        alloc = PortAllocator(30000, 30400, worker=w, workers=workers)
        for _ in range(draws):
            port = alloc.acquire()
            assert seen.setdefault(port, w) == w
            assert port % workers == (30000 + w) % workers


def test_allocator_exhaustion(tmp_path):
    alloc = PortAllocator(30500, 30503)
    got = {alloc.acquire() for _ in range(3)}
    assert len(got) == 3
    with pytest.raises(OrchestratorError):
        alloc.acquire()


@pytest.mark.parametrize("text,bug,frames", [
    ("FTN-BUG B2_dup_overflow\nFRAME a\nFRAME b\nnoise\n", "B2_dup_overflow", ["a", "b"]),
    ('Traceback (most recent call last):\n  File "x.py", line 3, in outer\n'
     '  File "x.py", line 9, in inner\nValueError: boom\n', None, ["inner", "outer"]),
    ("segfault\n", None, []),
])
def test_crash_record_parsing(text, bug, frames):
    assert parse_crash_record(text) == (bug, frames)
    assert harvest_crash(70, text) == frames


def test_many_runs_leave_no_children(micro):
    orch = micro(loops=1)
    for i in range(40):
        outcome = orch.run_once([(299, b"\x01")] if i % 4 == 0 else None)
        assert_no_orphans(outcome)
    assert live_children() == []


def test_peer_spec_validation():
    with pytest.raises(ValueError):
        PeerSpec(Role.WEIRD, Side.CLIENT, [])
    weird, target = tinychat_pair()
    with pytest.raises(ValueError):
        Orchestrator(target, weird, "/tmp/unused")
