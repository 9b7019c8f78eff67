import os
import random

import pytest

from ftnet.baseline import ReplayCampaign, record_transcript, replay_peer
from ftnet.orchestrator import Orchestrator, Role, Side, Verdict
from ftnet.stats import read_stats
from ftnet.testbed.peers import tinychat_pair
from ftnet.testbed.server import POST_HANDSHAKE_CELL_MIN
from ftnet.testbed.wire import CLIENT_TO_SERVER, Transcript


@pytest.fixture
def seed_transcript(tmp_path):
    def make(seed=None, transport="tcp"):
        weird, target = tinychat_pair(transport=transport, seed=seed)
        transcript, outcome = record_transcript(weird, target, str(tmp_path / "rec"), str(tmp_path / "seed.bin"))
        assert outcome.verdict is Verdict.CLEAN_EXIT
        return transcript
    return make


def test_next_job_mutates_one_record():
    transcript = Transcript([(CLIENT_TO_SERVER, b"aaaa"), (1, b"zz"), (CLIENT_TO_SERVER, b"bbbb")])
    camp = ReplayCampaign(transcript, seed=3)
    first, index = camp.next_job()
    assert index is None and first.records == [b"aaaa", b"bbbb"]
    camp.state.iteration = 1
    for _ in range(100):
        entry, index = camp.next_job()
        diff = [i for i, (a, b) in enumerate(zip(first.records, entry.records)) if a != b]
        assert diff == [index]
        assert len(entry.records[index]) == len(first.records[index])


def test_empty_transcript_is_rejected():
    with pytest.raises(ValueError):
        ReplayCampaign(Transcript([(1, b"server only")]))


def test_replay_peer_takes_the_other_side():
    _, target = tinychat_pair()
    spec = replay_peer(target)
    assert (spec.role, spec.side) == (Role.WEIRD, Side.CLIENT)


def test_fixed_nonce_replay_gets_past_the_handshake(tmp_path, seed_transcript):
    transcript = seed_transcript(seed=6)
    _, target = tinychat_pair(seed=6)
    with Orchestrator(replay_peer(target), target, str(tmp_path / "w")) as orch:
        camp = ReplayCampaign(transcript, seed=0).run(orch, 1)
    assert camp.state.reached(POST_HANDSHAKE_CELL_MIN)


@pytest.mark.parametrize("transport", ["tcp", "udp"])
def test_fresh_nonce_replay_stalls_at_auth(tmp_path, seed_transcript, transport):
    transcript = seed_transcript(transport=transport)
    _, target = tinychat_pair(transport=transport)
    out = tmp_path / "out"
    with Orchestrator(replay_peer(target, transport), target, str(tmp_path / "w")) as orch:
        camp = ReplayCampaign(transcript, seed=1, out_dir=str(out))
        camp.run(orch, 60)
        camp.close()
    assert camp.state.iteration == 60
    assert not camp.state.reached(POST_HANDSHAKE_CELL_MIN)
    assert len(camp.state.crashes) == 0
    rows = read_stats(str(out / "stats.csv"))
    assert [int(r["iteration"]) for r in rows] == list(range(1, 61))
    for name in os.listdir(out / "queue"):
        assert Transcript.load(str(out / "queue" / name)).client_records()


def test_replay_campaign_is_deterministic(tmp_path, seed_transcript):
    transcript = seed_transcript(seed=2)
    _, target = tinychat_pair(seed=2)
    runs = []
    for i in range(2):
        with Orchestrator(replay_peer(target), target, str(tmp_path / f"w{i}")) as orch:
            camp = ReplayCampaign(transcript, seed=4).run(orch, 25)
        runs.append([(r.verdict, r.site, r.admitted, r.novel) for r in camp.reports])
    assert runs[0] == runs[1]


def test_same_rng_same_mutants():
    transcript = Transcript([(CLIENT_TO_SERVER, bytes(random.Random(0).randbytes(40)))])
    seqs = []
    for _ in range(2):
        camp = ReplayCampaign(transcript, seed=8)
        camp.state.iteration = 1
        seqs.append([camp.next_job()[0].records for _ in range(30)])
    assert seqs[0] == seqs[1]
