import random

import pytest
from hypothesis import given, strategies as st

from ftnet import faults
from ftnet.faults import (CallTable, FaultRuntime, FaultStream, ProgramFormatError, RegistrationError,
                          SiteKind, branch_site, call_site, switch_site, value_site)


def runtime_with(*sites, program=()):
    rt = FaultRuntime("t")
    for s in sites:
        rt.register_site(s)
    rt.activate(faults.MODE_FAULTING, program)
    return rt


# streams

def test_stream_bits_are_little_endian_within_bytes():
    s = FaultStream(1, bytes([0b00000101]))
    assert [s.consume(1) for _ in range(3)] == [1, 0, 1]


def test_byte_aligned_reads_are_little_endian_integers():
    s = FaultStream(1, bytes([0x34, 0x12, 0xFF]))
    assert s.consume(16) == 0x1234
    assert s.consume(8) == 0xFF


def test_exhausted_stream_yields_identity_forever():
    s = FaultStream(1, b"\xff")
    assert s.consume(8) == 0xFF
    assert s.consume(8) == 0
    assert s.exhausted
    assert s.consume(1) == 0


def test_partially_available_read_is_identity():
    s = FaultStream(1, b"\xff")
    assert s.consume(16) == 0
    assert s.exhausted


@given(st.binary(max_size=64))
def test_bitwise_consumption_reassembles_stream(data):
    s = FaultStream(1, data)
    bits = [s.consume(1) for _ in range(len(data) * 8)]
    rebuilt = bytes(sum(bits[i * 8 + j] << j for j in range(8)) for i in range(len(data)))
    assert rebuilt == data


# semantics, exhaustively

@pytest.mark.parametrize("cond", [False, True])
@pytest.mark.parametrize("bit", [0, 1])
def test_branch_fault_is_xor(cond, bit):
    site = branch_site(1, "b")
    rt = runtime_with(site, program=[(1, bytes([bit]))])
    assert rt.branch(site, cond) == (cond ^ bool(bit))


def test_switch_fault_all_bytes_all_case_counts():
    site = switch_site(3, "s")
    for n in range(1, 6):
        for orig in range(n):
            for b in range(256):
                rt = runtime_with(site, program=[(3, bytes([b]))])
                expected = orig if b == 0 else (orig + b) % n
                assert rt.switch(site, orig, n) == expected


def test_call_fault_all_bytes_all_table_sizes():
    site = call_site(4, "c", "f()", skip_default="skipped")
    for size in range(1, 5):
        table = CallTable("f()", [lambda i=i: i for i in range(size)])
        for b in range(256):
            rt = runtime_with(site, program=[(4, bytes([b]))])
            got = rt.apply_call_fault(site, table)
            if b == 0:
                assert got == 0
            elif b % (size + 1) == size:
                assert got is None
            else:
                assert got == b % (size + 1)


def test_value_fault_matches_xor_on_random_cases():
    rng = random.Random(1234)
    for _ in range(1000):
        width = rng.choice((8, 16, 32, 64))
        site = value_site(9, "v", width)
        orig = rng.getrandbits(width)
        mask = rng.getrandbits(width)
        rt = runtime_with(site, program=[(9, mask.to_bytes(width // 8, "little"))])
        assert rt.value(site, orig) == orig ^ mask


def test_call_helper_runs_substitute_or_returns_skip_default():
    site = call_site(4, "c", "g(x)", skip_default=b"\0")

    def original(x):
        return b"orig" + x

    def other(x):
        return b"other" + x

    for byte, expected in ((0, b"origx"), (1, b"otherx"), (2, b"\0"), (3, b"origx"), (4, b"otherx")):
        rt = runtime_with(site, program=[(4, bytes([byte]))])
        rt.register_call_group("g(x)", [original, other])
        assert rt.call(site, original, b"x") == expected


def test_sites_without_streams_are_identity_and_counted():
    b = branch_site(1, "b")
    v = value_site(2, "v", 32)
    rt = runtime_with(b, v)
    assert rt.branch(b, True) is True
    assert rt.value(v, 77) == 77
    assert rt.value(v, 78) == 78
    assert rt.record_hits() == {1: 1, 2: 2}


def test_off_mode_counts_nothing():
    b = branch_site(1, "b")
    rt = FaultRuntime()
    rt.register_site(b)
    rt.activate(faults.MODE_OFF, [(1, b"\xff")])
    assert rt.branch(b, False) is False
    assert rt.record_hits() == {}


def test_counting_mode_ignores_program():
    b = branch_site(1, "b")
    rt = FaultRuntime()
    rt.register_site(b)
    rt.activate(faults.MODE_COUNTING, [(1, b"\xff")])
    assert rt.branch(b, False) is False
    assert rt.record_hits() == {1: 1}


# registration

def test_registration_rejects_duplicates_and_bad_widths():
    rt = FaultRuntime()
    rt.register_site(branch_site(1, "a"))
    with pytest.raises(RegistrationError):
        rt.register_site(branch_site(1, "again"))
    with pytest.raises(RegistrationError):
        faults.FaultSite(2, SiteKind.BRANCH, 8, "wide branch")
    with pytest.raises(RegistrationError):
        faults.FaultSite(3, SiteKind.VALUE_STORE, 12, "odd width")
    with pytest.raises(RegistrationError):
        faults.FaultSite(4, SiteKind.CALL_ENTRY, 8, "no arity")


def test_registration_closed_after_activation():
    rt = FaultRuntime()
    rt.activate(faults.MODE_OFF)
    with pytest.raises(RegistrationError):
        rt.register_site(branch_site(1, "late"))


def test_manifest_round_trip():
    rt = FaultRuntime()
    for s in (branch_site(5, "x.py:f:cond"), value_site(2, "x.py:g:len", 16), switch_site(9, "sw")):
        rt.register_site(s)
    parsed = faults.parse_manifest(rt.manifest())
    assert [(s.site_id, s.kind, s.width_bits, s.label) for s in parsed] == [
        (2, SiteKind.VALUE_STORE, 16, "x.py:g:len"),
        (5, SiteKind.BRANCH, 1, "x.py:f:cond"),
        (9, SiteKind.SWITCH, 8, "sw"),
    ]


# program file

@given(st.dictionaries(st.integers(0, 2**32 - 1), st.binary(max_size=40), max_size=8))
def test_program_codec_round_trip(entries):
    items = list(entries.items())
    assert faults.decode_program(faults.encode_program(items)) == items


def test_program_codec_rejects_garbage():
    with pytest.raises(ProgramFormatError):
        faults.decode_program(b"NOPE")
    data = faults.encode_program([(1, b"abc")])
    with pytest.raises(ProgramFormatError):
        faults.decode_program(data[:-1])


def test_hits_round_trip():
    hits = {3: 1, 1: 40, 70000: 2}
    assert faults.parse_hits(faults.format_hits(hits)) == hits


def test_session_reads_program_and_writes_hits(tmp_path):
    b = branch_site(1, "b")
    rt = FaultRuntime()
    rt.register_site(b)
    prog = tmp_path / "p.ftnp"
    prog.write_bytes(faults.encode_program([(1, b"\x01")]))
    hits = tmp_path / "hits"
    manifest = tmp_path / "manifest"
    env = {faults.ENV_MODE: "faulting", faults.ENV_PROGRAM: str(prog), faults.ENV_HITS_OUT: str(hits),
           faults.ENV_MANIFEST_OUT: str(manifest)}
    with rt.session(env):
        assert rt.branch(b, False) is True
        assert rt.branch(b, False) is False
    assert faults.parse_hits(hits.read_text()) == {1: 2}
    assert manifest.read_text().startswith("1\tBranch\t1\tb")
