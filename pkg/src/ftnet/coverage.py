"""Edge coverage for the target peer and novelty tracking for the fuzzer.

The target writes AFL-style saturating edge counters into a map shared
with the orchestrator (a file mapped by both sides).  The orchestrator only
reads the map after the target process has been reaped.
"""

from __future__ import annotations

import mmap
import os
import zlib
from dataclasses import dataclass, field

import numpy as np

MAP_SIZE = 1 << 16
ENV_COVERAGE_MAP = "FTN_COVERAGE_MAP"

# count classes: 0, 1, 2, 3, 4-7, 8-15, 16-31, 32-127, 128-255
_BUCKET_BOUNDS = (0, 1, 2, 3, 4, 8, 16, 32, 128)
BUCKET_COUNT = len(_BUCKET_BOUNDS)


def bucketize(count: int) -> int:
    if not 0 <= count <= 255:
        raise ValueError(f"hit count {count} outside 0..255")
    bucket = 0
    for ordinal, low in enumerate(_BUCKET_BOUNDS):
        if count >= low:
            bucket = ordinal
    return bucket


BUCKET_TABLE = bytes(bucketize(c) for c in range(256))


def location_hash(location) -> int:
    if isinstance(location, int):
        return location & (MAP_SIZE - 1)
    return zlib.crc32(str(location).encode()) & (MAP_SIZE - 1)


class CoverageMap:
    """Snapshot of one run's edge counters."""

    __slots__ = ("cells", "run_id")

    def __init__(self, cells: bytes | bytearray | None = None, run_id: int | str | None = None,
                 size: int = MAP_SIZE):
        self.cells = bytearray(size) if cells is None else bytearray(cells)
        self.run_id = run_id

    def __len__(self):
        return len(self.cells)

    def __eq__(self, other):
        return isinstance(other, CoverageMap) and self.cells == other.cells

    def __repr__(self):
        return f"CoverageMap(run_id={self.run_id!r}, hit_cells={self.hit_count()})"

    def record_edge(self, prev_location: int, current_location: int) -> None:
        index = (prev_location ^ current_location) % len(self.cells)
        if self.cells[index] < 255:
            self.cells[index] += 1

    def hit_cells(self) -> list[int]:
        return np.flatnonzero(np.frombuffer(bytes(self.cells), dtype=np.uint8)).tolist()

    def hit_count(self) -> int:
        return len(self.cells) - self.cells.count(0)

    def bucketized(self) -> bytes:
        return bytes(self.cells).translate(BUCKET_TABLE)

    def to_bytes(self) -> bytes:
        return bytes(self.cells)

    @classmethod
    def load(cls, path: str, run_id=None) -> "CoverageMap":
        with open(path, "rb") as fh:
            data = fh.read()
        if len(data) != MAP_SIZE:
            raise ValueError(f"{path}: coverage dump is {len(data)} bytes, expected {MAP_SIZE}")
        return cls(data, run_id)

    def dump(self, path: str) -> None:
        with open(path, "wb") as fh:
            fh.write(self.cells)


@dataclass
class Observation:
    is_novel: bool
    novel_cells: list[int]
    # cells that had never been hit before, a subset of novel_cells
    new_cells: list[int] = field(default_factory=list)


class NoveltyIndex:
    """Highest bucket seen so far for every cell."""

    def __init__(self, size: int = MAP_SIZE):
        self.virgin = np.zeros(size, dtype=np.uint8)

    def __len__(self):
        return len(self.virgin)

    def recorded_pairs(self) -> set[tuple[int, int]]:
        """(cell, bucket) pairs covered so far; buckets are cumulative."""
        pairs = set()
        for cell in np.flatnonzero(self.virgin).tolist():
            for bucket in range(1, int(self.virgin[cell]) + 1):
                pairs.add((cell, bucket))
        return pairs

    def cells_covered(self) -> int:
        return int(np.count_nonzero(self.virgin))

    def observe(self, cov: CoverageMap) -> Observation:
        if len(cov) != len(self.virgin):
            raise ValueError("coverage map size differs from novelty index size")
        buckets = np.frombuffer(cov.bucketized(), dtype=np.uint8)
        higher = np.flatnonzero(buckets > self.virgin)
        if higher.size == 0:
            return Observation(False, [])
        new = higher[self.virgin[higher] == 0]
        self.virgin[higher] = buckets[higher]
        return Observation(True, higher.tolist(), new.tolist())

    def copy(self) -> "NoveltyIndex":
        other = NoveltyIndex(len(self.virgin))
        other.virgin = self.virgin.copy()
        return other


def observe(cov: CoverageMap, index: NoveltyIndex) -> Observation:
    return index.observe(cov)


class CoverageRecorder:
    """Writer side used inside the target peer.

    ``visit(location)`` records the edge from the previously visited
    location, shifting the previous hash so that A->B and B->A differ.
    """

    def __init__(self, path: str | None = None, size: int = MAP_SIZE):
        self._fh = None
        if path:
            self._fh = open(path, "r+b")
            self.cells = mmap.mmap(self._fh.fileno(), size)
        else:
            self.cells = bytearray(size)
        self.size = size
        self._prev = 0

    @classmethod
    def from_env(cls, environ=None) -> "CoverageRecorder":
        env = os.environ if environ is None else environ
        return cls(env.get(ENV_COVERAGE_MAP) or None)

    def record_edge(self, prev_location: int, current_location: int) -> None:
        index = (prev_location ^ current_location) % self.size
        value = self.cells[index]
        if value < 255:
            self.cells[index] = value + 1

    def visit(self, location) -> None:
        cur = location_hash(location)
        self.record_edge(self._prev, cur)
        self._prev = cur >> 1

    def snapshot(self) -> CoverageMap:
        return CoverageMap(bytes(self.cells))

    def close(self) -> None:
        if self._fh is not None:
            self.cells.flush()
            self.cells.close()
            self._fh.close()
            self._fh = None
