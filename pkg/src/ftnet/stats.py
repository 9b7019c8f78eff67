"""Per-iteration campaign statistics and merging of repeated runs."""

from __future__ import annotations

import csv
from typing import Iterable, Sequence

import numpy as np

COLUMNS = ("iteration", "wall_ms", "queue_len", "crash_buckets", "novel_cells_total", "verdict")
MERGED_COLUMNS = ("iteration", "runs", "median", "p17", "p83")


class SchemaError(ValueError):
    pass


class StatsWriter:
    def __init__(self, path: str):
        self.path = path
        self._fh = open(path, "w", newline="")
        self._csv = csv.writer(self._fh, lineterminator="\n")
        self._csv.writerow(COLUMNS)

    def row(self, iteration: int, wall_ms: float, queue_len: int, crash_buckets: int,
            novel_cells_total: int, verdict: str) -> None:
        self._csv.writerow([iteration, f"{wall_ms:.1f}", queue_len, crash_buckets, novel_cells_total, verdict])

    def flush(self) -> None:
        self._fh.flush()

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()


def read_stats(path: str) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != COLUMNS:
            raise SchemaError(f"{path}: expected columns {','.join(COLUMNS)}, got {','.join(reader.fieldnames or [])}")
        rows = list(reader)
    for lineno, row in enumerate(rows, start=2):
        try:
            int(row["iteration"])
            int(row["novel_cells_total"])
        except (TypeError, ValueError):
            raise SchemaError(f"{path}:{lineno}: non-integer iteration or novel_cells_total") from None
    return rows


def deterministic_view(path: str) -> list[tuple[str, ...]]:
    """Rows without the wall-clock column, for replay comparisons."""
    keep = [c for c in COLUMNS if c != "wall_ms"]
    return [tuple(r[c] for c in keep) for r in read_stats(path)]


def merge_series(series: Sequence[Sequence[tuple[int, int]]]) -> list[tuple[int, int, float, float, float]]:
    """Align runs by iteration (forward-filling each run's last value) and
    summarize novel_cells_total across runs.

    A run contributes from its first recorded iteration onward.
    """
    iterations = sorted({it for run in series for it, _ in run})
    out = []
    positions = [0] * len(series)
    current: list[int | None] = [None] * len(series)
    for it in iterations:
        for k, run in enumerate(series):
            while positions[k] < len(run) and run[positions[k]][0] <= it:
                current[k] = run[positions[k]][1]
                positions[k] += 1
        values = np.array([v for v in current if v is not None], dtype=float)
        p17, med, p83 = np.percentile(values, [17, 50, 83])
        out.append((it, len(values), float(med), float(p17), float(p83)))
    return out


def merge_files(paths: Iterable[str]) -> list[tuple[int, int, float, float, float]]:
    series = []
    for path in paths:
        rows = read_stats(path)
        run = sorted((int(r["iteration"]), int(r["novel_cells_total"])) for r in rows)
        series.append(run)
    if not series:
        raise SchemaError("no stats files given")
    return merge_series(series)


def write_merged(rows, out) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(MERGED_COLUMNS)
    for it, runs, med, p17, p83 in rows:
        writer.writerow([it, runs, _num(med), _num(p17), _num(p83)])


def _num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else f"{x:.4f}"
