"""Queue entries and their on-disk corpus representation."""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass, field

from .. import faults


@dataclass(frozen=True)
class Provenance:
    kind: str  # probe | stream | splice | extend | manual
    parents: tuple[int, ...] = ()
    site: int | None = None

    @property
    def label(self) -> str:
        if self.kind == "probe":
            return f"probe.{self.site}"
        return ".".join([self.kind, *map(str, self.parents)])

    @classmethod
    def parse(cls, label: str) -> "Provenance":
        kind, *rest = label.split(".")
        if kind == "probe":
            return cls("probe", (), int(rest[0]))
        return cls(kind, tuple(int(x) for x in rest))


SITE_PROBE = "probe"


@dataclass
class FaultProgram:
    entries: list[tuple[int, bytes]]
    calibration: dict[int, int] = field(default_factory=dict)
    provenance: Provenance = Provenance("manual")
    discovery_time: int = 0
    novel_cells: tuple[int, ...] = ()
    id: int | None = None
    favored: bool = False

    def __post_init__(self):
        self.entries = [(int(s), bytes(b)) for s, b in self.entries]
        sites = [s for s, _ in self.entries]
        if len(set(sites)) != len(sites):
            raise ValueError(f"duplicate site in program: {sites}")

    @property
    def sites(self) -> list[int]:
        return [s for s, _ in self.entries]

    @property
    def dormant(self) -> bool:
        """Calibrated, but none of its sites was reached."""
        return bool(self.calibration) and not any(self.calibration.get(s, 0) for s in self.sites)

    def stream(self, site_id: int) -> bytes:
        return dict(self.entries)[site_id]

    def replace(self, site_id: int, stream: bytes) -> list[tuple[int, bytes]]:
        return [(s, stream if s == site_id else b) for s, b in self.entries]

    def encode(self) -> bytes:
        return faults.encode_program(self.entries)

    @property
    def filename(self) -> str:
        return corpus_name(self.id or 0, self.provenance, self.discovery_time)


def stream_bytes(hits: int, width_bits: int) -> int:
    return math.ceil(hits * width_bits / 8)


def resize(stream: bytes, size: int) -> bytes:
    return stream[:size] if len(stream) >= size else stream + bytes(size - len(stream))


def calibrated(program: FaultProgram, hits: dict[int, int], widths: dict[int, int]) -> FaultProgram:
    """Resize every stream to the bytes its site will consume."""
    calibration = {s: hits.get(s, 0) for s in program.sites}
    entries = [(s, resize(b, stream_bytes(calibration[s], widths[s]))) for s, b in program.entries]
    return FaultProgram(entries, calibration, program.provenance, program.discovery_time,
                        program.novel_cells, program.id, program.favored)


# corpus files

_NAME = re.compile(r"^id-(\d+),src-([^,]+),time-(\d+)$")


def corpus_name(seq: int, provenance: Provenance, iteration: int) -> str:
    return f"id-{seq:06d},src-{provenance.label},time-{iteration:06d}"


def parse_corpus_name(name: str) -> tuple[int, Provenance, int]:
    m = _NAME.match(os.path.basename(name))
    if not m:
        raise ValueError(f"not a corpus file name: {name!r}")
    return int(m.group(1)), Provenance.parse(m.group(2)), int(m.group(3))


def save_program(directory: str, program: FaultProgram) -> str:
    path = os.path.join(directory, program.filename)
    with open(path, "wb") as fh:
        fh.write(program.encode())
    return path


def load_program(path: str) -> FaultProgram:
    with open(path, "rb") as fh:
        entries = faults.decode_program(fh.read())
    try:
        seq, prov, when = parse_corpus_name(path)
    except ValueError:
        return FaultProgram(entries)
    return FaultProgram(entries, provenance=prov, discovery_time=when, id=seq)
