"""Independent reference implementations used as test oracles."""

import random

from ftnet.coverage import CoverageMap, NoveltyIndex

BOUNDS = [(0, 0), (1, 1), (2, 2), (3, 3), (4, 7), (8, 15), (16, 31), (32, 127), (128, 255)]


def bucket_of(count):
    for ordinal, (low, high) in enumerate(BOUNDS):
        if low <= count <= high:
            return ordinal
    raise ValueError(count)


class SetNovelty:
    """Novelty as a set of (cell, bucket) pairs; reaching bucket k of a
    cell also covers every lower bucket."""

    def __init__(self):
        self.pairs = set()

    def observe(self, cells):
        novel = []
        for cell, count in enumerate(cells):
            if count and (cell, bucket_of(count)) not in self.pairs:
                novel.append(cell)
        for cell in novel:
            for b in range(1, bucket_of(cells[cell]) + 1):
                self.pairs.add((cell, b))
        return novel


def novelty_deviations(sequences=1000, cells=64, maps_per_sequence=8, seed=0):
    """Run observe() and the set oracle side by side; count disagreements."""
    rng = random.Random(seed)
    deviations = 0
    for _ in range(sequences):
        index = NoveltyIndex(cells)
        oracle = SetNovelty()
        for _ in range(rng.randint(1, maps_per_sequence)):
            density = rng.random()
            counts = bytes(rng.choice((rng.randrange(1, 4), rng.randrange(256))) if rng.random() < density else 0
                           for _ in range(cells))
            got = index.observe(CoverageMap(counts, size=cells))
            want = oracle.observe(counts)
            if got.is_novel != bool(want) or sorted(got.novel_cells) != want:
                deviations += 1
            if index.recorded_pairs() != oracle.pairs:
                deviations += 1
    return deviations
