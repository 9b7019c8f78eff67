import pytest
from hypothesis import given, strategies as st

from ftnet.coverage import (BUCKET_TABLE, MAP_SIZE, CoverageMap, CoverageRecorder, NoveltyIndex,
                            bucketize, location_hash, observe)
from oracles import bucket_of, novelty_deviations


@pytest.mark.parametrize("count,bucket", [(0, 0), (1, 1), (2, 2), (3, 3), (4, 4), (7, 4), (8, 5), (15, 5),
                                          (16, 6), (31, 6), (32, 7), (127, 7), (128, 8), (255, 8)])
def test_bucket_boundaries(count, bucket):
    assert bucketize(count) == bucket


def test_bucket_table_matches_reference():
    assert list(BUCKET_TABLE) == [bucket_of(c) for c in range(256)]


def test_record_edge_saturates():
    cov = CoverageMap(size=16)
    for _ in range(300):
        cov.record_edge(1, 2)
    assert cov.cells[3] == 255


def test_recorder_distinguishes_edge_direction():
    a, b = CoverageRecorder(), CoverageRecorder()
    for loc in (0x10, 0x20):
        a.visit(loc)
    for loc in (0x20, 0x10):
        b.visit(loc)
    assert a.snapshot().hit_cells() != b.snapshot().hit_cells()


def test_location_hash_in_range():
    assert location_hash(0x1_2345) == 0x2345
    assert 0 <= location_hash("server.py:handle_auth") < MAP_SIZE


def test_recorder_writes_through_shared_file(tmp_path):
    path = tmp_path / "map"
    path.write_bytes(bytes(MAP_SIZE))
    rec = CoverageRecorder(str(path))
    rec.visit(5)
    rec.close()
    assert CoverageMap.load(str(path)).hit_count() == 1


def test_novelty_examples():
    index = NoveltyIndex(8)
    first = observe(CoverageMap(bytes([1, 0, 0, 0, 0, 0, 0, 0]), size=8), index)
    assert first.is_novel and first.novel_cells == [0] and first.new_cells == [0]
    same = observe(CoverageMap(bytes([1, 0, 0, 0, 0, 0, 0, 0]), size=8), index)
    assert not same.is_novel
    # same bucket (4..7) is not novel; a higher bucket is, but the cell is not new
    observe(CoverageMap(bytes([4, 0, 0, 0, 0, 0, 0, 0]), size=8), index)
    assert not observe(CoverageMap(bytes([7, 0, 0, 0, 0, 0, 0, 0]), size=8), index).is_novel
    higher = observe(CoverageMap(bytes([8, 0, 0, 0, 0, 0, 0, 0]), size=8), index)
    assert higher.novel_cells == [0] and higher.new_cells == []
    # a lower bucket than seen before is not novel
    assert not observe(CoverageMap(bytes([2, 0, 0, 0, 0, 0, 0, 0]), size=8), index).is_novel


def test_novelty_size_mismatch():
    with pytest.raises(ValueError):
        NoveltyIndex(8).observe(CoverageMap(size=16))


@given(st.lists(st.binary(min_size=16, max_size=16), min_size=1, max_size=6))
def test_observing_twice_is_never_novel(maps):
    index = NoveltyIndex(16)
    for m in maps:
        index.observe(CoverageMap(m, size=16))
        assert not index.observe(CoverageMap(m, size=16)).is_novel


def test_novelty_matches_set_oracle():
    assert novelty_deviations(sequences=200, seed=3) == 0
