import pytest
from hypothesis import given, strategies as st

from ftnet.testbed import wire
from ftnet.testbed.wire import FrameType, Transcript


def test_crc32_check_value():
    assert wire.crc32(b"123456789") == 0xCBF43926


@pytest.mark.parametrize("key,data,digest", [
    (b"\x0b" * 20, b"Hi There", "b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7"),
    (b"Jefe", b"what do ya want for nothing?", "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843"),
])
def test_keyed_digest_vectors(key, data, digest):
    assert wire.keyed_digest(key, data).hex() == digest


def test_frame_layout():
    raw = wire.encode_frame(FrameType.DATA, b"ab")
    assert raw[:3] == b"\x02\x00\x04"
    assert raw[3:5] == b"ab"
    assert int.from_bytes(raw[5:], "little") == wire.crc32(raw[:5])


@given(st.integers(1, 6), st.binary(max_size=300))
def test_frame_round_trip(ftype, payload):
    frame, ok = wire.decode_frame(wire.encode_frame(ftype, payload))
    assert ok and frame.ftype == ftype and frame.payload == payload


@given(st.binary(min_size=1, max_size=40), st.data())
def test_any_single_byte_change_breaks_the_crc(payload, data):
    raw = bytearray(wire.encode_frame(FrameType.DATA, payload))
    pos = data.draw(st.integers(0, len(raw) - 1))
    raw[pos] ^= data.draw(st.integers(1, 255))
    try:
        _, ok = wire.decode_frame(bytes(raw))
    except ValueError:
        ok = False
    assert not ok


def test_overridden_length_is_covered_by_crc():
    raw = wire.encode_frame(FrameType.DATA, b"x", length=4096)
    length, _ = wire.HEADER.unpack_from(raw)
    assert length == 4096
    assert wire.frame_crc_ok(4096, FrameType.DATA, b"x", int.from_bytes(raw[-4:], "little"))


@given(st.lists(st.tuples(st.integers(1, 6), st.binary(max_size=50)), max_size=6))
def test_split_frames_recovers_boundaries(frames):
    encoded = [wire.encode_frame(t, p) for t, p in frames]
    assert wire.split_frames(b"".join(encoded)) == encoded


@given(st.lists(st.tuples(st.sampled_from([0, 1]), st.binary(max_size=64)), max_size=10))
def test_transcript_round_trip(records):
    t = Transcript(records)
    assert Transcript.decode(t.encode()).records == records


def test_transcript_record_format():
    t = Transcript([(wire.CLIENT_TO_SERVER, b"hi"), (wire.SERVER_TO_CLIENT, b"")])
    assert t.encode() == b"\x00\x02\x00\x00\x00hi\x01\x00\x00\x00\x00"
    with pytest.raises(ValueError):
        Transcript.decode(t.encode()[:-1] + b"\x01\x05")


def test_hello_payload_layout():
    p = wire.hello_payload(b"N" * 16, b"bob")
    assert p[0] == wire.PROTOCOL_VERSION and p[1] == 16 and p[18] == 3 and p.endswith(b"bob")
