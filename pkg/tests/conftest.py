import os

import pytest

from ftnet.orchestrator import Orchestrator
from ftnet.testbed.peers import micro_pair, tinychat_pair


def group_alive(pgid: int) -> bool:
    try:
        os.killpg(pgid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def live_children() -> list[int]:
    """Direct children of the test process, from the process table."""
    me = os.getpid()
    out = []
    for entry in os.listdir("/proc"):
        if not entry.isdigit():
            continue
        try:
            with open(f"/proc/{entry}/stat") as fh:
                stat = fh.read()
        except OSError:
            continue
        fields = stat.rsplit(")", 1)[1].split()
        if int(fields[1]) == me and fields[0] != "Z":
            out.append(int(entry))
    return out


def assert_no_orphans(outcome) -> None:
    for label, pid in outcome.pids.items():
        assert not group_alive(pid), f"{label} process group {pid} still alive"


@pytest.fixture
def tinychat(tmp_path):
    """Factory: Orchestrator over the TinyChat pair, closed at teardown."""
    made = []

    def make(**kw):
        orch_kw = {k: kw.pop(k) for k in ("timeout_ms", "drain_ms") if k in kw}
        weird, target = tinychat_pair(**kw)
        orch = Orchestrator(weird, target, str(tmp_path / f"o{len(made)}"), **orch_kw)
        made.append(orch)
        return orch

    yield make
    for orch in made:
        orch.close()


@pytest.fixture
def micro(tmp_path):
    made = []

    def make(**kw):
        orch_kw = {k: kw.pop(k) for k in ("timeout_ms", "drain_ms") if k in kw}
        weird, target = micro_pair(**kw)
        orch = Orchestrator(weird, target, str(tmp_path / f"m{len(made)}"), **orch_kw)
        made.append(orch)
        return orch

    yield make
    for orch in made:
        orch.close()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep
