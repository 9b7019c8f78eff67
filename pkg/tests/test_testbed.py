import random

import pytest

from ftnet.orchestrator import Role, Verdict
from ftnet.testbed import bugs, wire
from ftnet.testbed.client import ENV_TRANSCRIPT_OUT
from ftnet.testbed.server import (DEFAULT_SECRET, POST_HANDSHAKE_CELL_MIN, Phase, ServerConfig, TinyChatServer, _Close,
                                  session_nonce)
from ftnet.testbed.wire import FrameType, Integrity, Transcript

B1_WITNESS = [(51, b"\x02")]
B2_WITNESS = [(55, b"\x04\x00")]


def record(orch, tmp_path, name="t.bin", program=None):
    path = tmp_path / name
    outcome = orch.run_once(program, extra_env={Role.WEIRD.value: {ENV_TRANSCRIPT_OUT: str(path)}})
    return outcome, Transcript.load(str(path))


def feed(server: TinyChatServer, frames: list[bytes]) -> None:
    """Push whole frames through the server's frame handler."""
    sent = []
    server._send = sent.append
    try:
        for raw in frames:
            length, ftype = wire.HEADER.unpack_from(raw)
            server.handle_frame(length, ftype, raw[3:-4], int.from_bytes(raw[-4:], "little"))
    except _Close:
        pass


# in-process protocol checks

def test_nonces_are_seeded_or_fresh():
    assert session_nonce(5, "server") == session_nonce(5, "server")
    assert session_nonce(5, "server") != session_nonce(5, "client")
    assert session_nonce(None, "server") != session_nonce(None, "server")


def handshake_frames(seed=3):
    cn = session_nonce(seed, "client")
    hello = wire.encode_frame(FrameType.HELLO, wire.hello_payload(cn, b"me"))
    sn = session_nonce(seed, "server")
    auth = wire.encode_frame(FrameType.AUTH, wire.keyed_digest(DEFAULT_SECRET, cn + sn))
    return hello, auth


def test_auth_accepted_with_matching_nonces():
    server = TinyChatServer(ServerConfig(seed=3))
    feed(server, list(handshake_frames(3)))
    assert server.session.phase is Phase.ESTABLISHED


def test_recorded_auth_fails_against_fresh_session():
    server = TinyChatServer(ServerConfig(seed=None))
    feed(server, list(handshake_frames(3)))
    assert server.session.phase is not Phase.ESTABLISHED


def test_random_auth_corruptions_never_authenticate():
    hello, auth = handshake_frames(3)
    rng = random.Random(99)
    accepted = 0
    for _ in range(10_000):
        raw = bytearray(auth)
        raw[rng.randrange(len(raw))] ^= rng.randrange(1, 256)
        server = TinyChatServer(ServerConfig(seed=None))
        feed(server, [hello, bytes(raw)])
        accepted += server.session.phase is Phase.ESTABLISHED
    assert accepted == 0


def test_crc_failure_drops_frame_and_session_continues():
    server = TinyChatServer(ServerConfig(seed=3))
    hello, auth = handshake_frames(3)
    bad = bytearray(hello)
    bad[5] ^= 1
    feed(server, [bytes(bad), hello, auth])
    assert server.session.errors == 1
    assert server.session.phase is Phase.ESTABLISHED


def test_phase_violation_closes_cleanly():
    server = TinyChatServer(ServerConfig(seed=3))
    hello, auth = handshake_frames(3)
    feed(server, [auth])
    assert server.session.phase is Phase.AWAIT_HELLO


def test_integrity_none_skips_auth():
    server = TinyChatServer(ServerConfig(seed=3, integrity=Integrity.NONE))
    feed(server, [handshake_frames(3)[0]])
    assert server.session.phase is Phase.ESTABLISHED


def test_parse_armed():
    assert bugs.parse_armed("B1,B2_dup_overflow") == {bugs.B1_LEN_COPY, bugs.B2_DUP_OVERFLOW}
    with pytest.raises(ValueError):
        bugs.parse_armed("B9")


def test_crash_record_format():
    assert bugs.format_crash_record("B1_len_copy", ["f", "g"]) == "FTN-BUG B1_len_copy\nFRAME f\nFRAME g\n"


# end-to-end through the orchestrator

def test_golden_tcp_session(tinychat, tmp_path):
    orch = tinychat(seed=4)
    outcome, transcript = record(orch, tmp_path)
    assert outcome.verdict is Verdict.CLEAN_EXIT
    assert (outcome.target_exit, outcome.weird_exit) == (0, 0)
    assert len(transcript.records) >= 6
    echoed = [f for d, raw in transcript.records if d == wire.SERVER_TO_CLIENT
              for f in wire.split_frames(raw) if f[2] == FrameType.DATA]
    assert len(echoed) == 3
    assert any(c >= POST_HANDSHAKE_CELL_MIN for c in outcome.coverage.hit_cells())


def test_udp_transcript_keeps_datagram_boundaries(tinychat, tmp_path):
    orch = tinychat(seed=4, transport="udp")
    _, transcript = record(orch, tmp_path)
    for direction, data in transcript.records:
        frame, ok = wire.decode_frame(data)
        assert ok, "each record is exactly one datagram/frame"


def test_same_seed_identity_runs_are_bit_identical(tinychat, tmp_path):
    orch = tinychat(seed=11)
    first_out, first = record(orch, tmp_path, "a.bin")
    second_out, second = record(orch, tmp_path, "b.bin")
    assert first.encode() == second.encode()
    assert first_out.coverage == second_out.coverage


def test_same_program_same_transcript(tinychat, tmp_path):
    orch = tinychat(seed=11)
    program = [(53, b"\x41\x00\x07"), (21, b"\x00\x00\x01")]
    _, a = record(orch, tmp_path, "a.bin", program)
    _, b = record(orch, tmp_path, "b.bin", program)
    assert a.encode() == b.encode()


@pytest.mark.parametrize("program,bug", [(B1_WITNESS, bugs.B1_LEN_COPY), (B2_WITNESS, bugs.B2_DUP_OVERFLOW)])
def test_witnesses_trigger_their_bug(tinychat, program, bug):
    orch = tinychat(arm="B1,B2")
    outcome = orch.run_once(program)
    assert outcome.verdict is Verdict.TARGET_CRASH
    assert outcome.target_exit == bugs.EXIT_BUG
    assert outcome.bug_id == bug


@pytest.mark.parametrize("program", [B1_WITNESS, B2_WITNESS])
def test_witnesses_are_harmless_when_unarmed(tinychat, program):
    outcome = tinychat().run_once(program)
    assert outcome.verdict is Verdict.CLEAN_EXIT


def test_bugs_need_authentication(tinychat):
    """With a broken AUTH digest the witnesses never reach the bug."""
    orch = tinychat(arm="B1,B2")
    wrong_digest = [(40, b"\x01")]  # substitute digest: AUTH is rejected
    for witness in (B1_WITNESS, B2_WITNESS):
        outcome = orch.run_once(wrong_digest + witness)
        assert outcome.verdict is not Verdict.TARGET_CRASH


def test_b3_after_bye(tinychat):
    orch = tinychat(arm="B3")
    # DUP turned into BYE (case 1 -> 2), so the real BYE arrives after close
    outcome = orch.run_once([(50, b"\x00\x00\x00\x01")])
    assert outcome.verdict is Verdict.TARGET_CRASH
    assert outcome.bug_id == bugs.B3_USE_AFTER_CLOSE


def test_unarmed_soak_has_no_target_crashes(tinychat):
    orch = tinychat()
    rng = random.Random(5)
    sites = [10, 11, 12, 20, 21, 22, 30, 31, 32, 33, 40, 41, 50, 51, 52, 53, 54, 55]
    for _ in range(1000):
        program = [(s, rng.randbytes(rng.randint(1, 8))) for s in rng.sample(sites, rng.randint(1, 3))]
        outcome = orch.run_once(program)
        assert outcome.verdict is not Verdict.TARGET_CRASH, (program, outcome.diagnostics)


def test_replayed_transcript_same_seed_is_accepted(tmp_path, tinychat):
    from ftnet.baseline import ENV_REPLAY, replay_peer
    from ftnet.orchestrator import Orchestrator
    from ftnet.testbed.peers import tinychat_pair

    identity, transcript = record(tinychat(seed=8), tmp_path)
    _, target = tinychat_pair(seed=8)
    with Orchestrator(replay_peer(target), target, str(tmp_path / "r")) as orch:
        out = orch.run_once(None, extra_env={Role.WEIRD.value: {ENV_REPLAY: str(tmp_path / "t.bin")}})
    assert out.verdict is Verdict.CLEAN_EXIT
    assert out.coverage.hit_cells() == identity.coverage.hit_cells()
