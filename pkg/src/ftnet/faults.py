"""Fault-injection runtime linked into the weird peer.

Peers register their fault sites at import time, then wrap the
instrumented loads, stores, branches, switches and calls with the
``value``/``branch``/``switch``/``call`` helpers.  At startup the runtime
is activated from the environment: it loads the fault program (a list of
per-site bit streams) and each site execution consumes the next bits of
its stream.  A site without a stream, or whose stream ran dry, behaves as
if it was not instrumented at all.
"""

from __future__ import annotations

import contextlib
import enum
import os
import signal
import struct
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Iterator, Mapping, Sequence

ENV_MODE = "FTN_FAULT_MODE"
ENV_PROGRAM = "FTN_FAULT_PROGRAM"
ENV_HITS_OUT = "FTN_HITS_OUT"
ENV_MANIFEST_OUT = "FTN_MANIFEST_OUT"

MODE_OFF = "off"
MODE_COUNTING = "counting"
MODE_FAULTING = "faulting"
MODES = (MODE_OFF, MODE_COUNTING, MODE_FAULTING)

PROGRAM_MAGIC = b"FTNP"
PROGRAM_VERSION = 1

VALID_WIDTHS = (1, 8, 16, 32, 64)


class SiteKind(str, enum.Enum):
    VALUE_LOAD = "ValueLoad"
    VALUE_STORE = "ValueStore"
    BRANCH = "Branch"
    SWITCH = "Switch"
    CALL_ENTRY = "CallEntry"

    @property
    def is_value(self) -> bool:
        return self in (SiteKind.VALUE_LOAD, SiteKind.VALUE_STORE)


class FaultRuntimeError(Exception):
    pass


class RegistrationError(FaultRuntimeError):
    pass


class ProgramFormatError(FaultRuntimeError):
    pass


@dataclass(frozen=True)
class FaultSite:
    """One instrumentable location.

    ``skip_default`` is what a skipped call returns to its caller; it is
    only meaningful for ``CallEntry`` sites.
    """

    site_id: int
    kind: SiteKind
    width_bits: int
    label: str
    arity_class: str | None = None
    skip_default: Any = None

    def __post_init__(self):
        object.__setattr__(self, "kind", SiteKind(self.kind))
        if not 0 <= self.site_id < 2**32:
            raise RegistrationError(f"site id {self.site_id} is not an unsigned 32-bit value")
        if self.width_bits not in VALID_WIDTHS:
            raise RegistrationError(f"site {self.site_id}: invalid width {self.width_bits}")
        if self.kind is SiteKind.BRANCH and self.width_bits != 1:
            raise RegistrationError(f"branch site {self.site_id} must consume 1 bit")
        if self.kind in (SiteKind.SWITCH, SiteKind.CALL_ENTRY) and self.width_bits != 8:
            raise RegistrationError(f"{self.kind.value} site {self.site_id} must consume 8 bits")
        if self.kind.is_value and self.width_bits < 8:
            raise RegistrationError(f"value site {self.site_id} must be at least 8 bits wide")
        if self.kind is SiteKind.CALL_ENTRY and not self.arity_class:
            raise RegistrationError(f"call site {self.site_id} needs an arity class")

    def manifest_line(self) -> str:
        return f"{self.site_id}\t{self.kind.value}\t{self.width_bits}\t{self.label}"


def branch_site(site_id: int, label: str) -> FaultSite:
    return FaultSite(site_id, SiteKind.BRANCH, 1, label)


def value_site(site_id: int, label: str, width_bits: int, store: bool = True) -> FaultSite:
    kind = SiteKind.VALUE_STORE if store else SiteKind.VALUE_LOAD
    return FaultSite(site_id, kind, width_bits, label)


def switch_site(site_id: int, label: str) -> FaultSite:
    return FaultSite(site_id, SiteKind.SWITCH, 8, label)


def call_site(site_id: int, label: str, arity_class: str, skip_default: Any = None) -> FaultSite:
    return FaultSite(site_id, SiteKind.CALL_ENTRY, 8, label, arity_class, skip_default)


class FaultStream:
    """Bit stream feeding one site.

    Bits are consumed little-endian within each byte, bytes in order, so a
    byte-aligned 8-bit read returns the raw byte and a 16-bit read returns
    a little-endian integer.
    """

    __slots__ = ("site_id", "bits", "cursor", "exhausted")

    def __init__(self, site_id: int, bits: bytes = b""):
        self.site_id = site_id
        self.bits = bytes(bits)
        self.cursor = 0
        self.exhausted = False

    @property
    def total_bits(self) -> int:
        return 8 * len(self.bits)

    def consume(self, n_bits: int) -> int:
        if n_bits not in VALID_WIDTHS:
            raise ValueError(f"cannot consume {n_bits} bits")
        if self.exhausted or self.cursor + n_bits > self.total_bits:
            self.exhausted = True
            return 0
        start = self.cursor
        self.cursor += n_bits
        first, shift = divmod(start, 8)
        if shift == 0 and n_bits >= 8:
            return int.from_bytes(self.bits[first:first + n_bits // 8], "little")
        last = (start + n_bits + 7) // 8
        word = int.from_bytes(self.bits[first:last], "little")
        return (word >> shift) & ((1 << n_bits) - 1)


@dataclass(frozen=True)
class CallTable:
    """Callees sharing one signature group; index 0 is the original callee."""

    arity_class: str
    entries: tuple

    def __post_init__(self):
        if not self.entries:
            raise ValueError("call table must not be empty")

    def __len__(self):
        return len(self.entries)

    @classmethod
    def for_callee(cls, arity_class: str, group: Sequence[Callable], original: Callable) -> "CallTable":
        others = tuple(fn for fn in group if fn is not original)
        return cls(arity_class, (original,) + others)


# program file codec

def encode_program(entries: Iterable[tuple[int, bytes]]) -> bytes:
    entries = list(entries)
    if len(entries) > 0xFFFF:
        raise ProgramFormatError("too many entries for one fault program")
    out = [PROGRAM_MAGIC, struct.pack("<HH", PROGRAM_VERSION, len(entries))]
    for site_id, stream in entries:
        out.append(struct.pack("<II", site_id, len(stream)))
        out.append(bytes(stream))
    return b"".join(out)


def decode_program(data: bytes) -> list[tuple[int, bytes]]:
    if len(data) < 8 or data[:4] != PROGRAM_MAGIC:
        raise ProgramFormatError("bad fault program magic")
    version, count = struct.unpack_from("<HH", data, 4)
    if version != PROGRAM_VERSION:
        raise ProgramFormatError(f"unsupported fault program version {version}")
    offset = 8
    entries = []
    for _ in range(count):
        if offset + 8 > len(data):
            raise ProgramFormatError("truncated fault program entry header")
        site_id, length = struct.unpack_from("<II", data, offset)
        offset += 8
        if offset + length > len(data):
            raise ProgramFormatError(f"truncated stream for site {site_id}")
        entries.append((site_id, data[offset:offset + length]))
        offset += length
    if offset != len(data):
        raise ProgramFormatError("trailing bytes after last fault program entry")
    return entries


def parse_manifest(text: str) -> list[FaultSite]:
    sites = []
    for line in text.splitlines():
        if not line.strip():
            continue
        site_id, kind, width, label = line.split("\t", 3)
        kind = SiteKind(kind)
        # arity class is not part of the manifest; keep call sites loadable
        arity = "manifest" if kind is SiteKind.CALL_ENTRY else None
        sites.append(FaultSite(int(site_id), kind, int(width), label, arity))
    return sites


def format_hits(hits: Mapping[int, int]) -> str:
    return "".join(f"{sid}\t{n}\n" for sid, n in sorted(hits.items()))


def parse_hits(text: str) -> dict[int, int]:
    hits = {}
    for line in text.splitlines():
        if line.strip():
            sid, n = line.split("\t")
            hits[int(sid)] = int(n)
    return hits


class FaultRuntime:
    """Per-program registry of fault sites plus the state of one run."""

    def __init__(self, name: str = "weird-peer"):
        self.name = name
        self.sites: dict[int, FaultSite] = {}
        self.call_groups: dict[str, list[Callable]] = {}
        self.sealed = False
        self.mode = MODE_OFF
        self.streams: dict[int, FaultStream] = {}
        self.hits: dict[int, int] = {}
        self._hits_out: str | None = None

    # registration

    def register_site(self, site: FaultSite) -> FaultSite:
        if self.sealed:
            raise RegistrationError(f"{self.name}: cannot register site {site.site_id} after sealing")
        if site.site_id in self.sites:
            raise RegistrationError(f"{self.name}: duplicate site id {site.site_id}")
        self.sites[site.site_id] = site
        return site

    def register_call_group(self, arity_class: str, functions: Sequence[Callable]) -> None:
        if not functions:
            raise RegistrationError("call group must not be empty")
        self.call_groups[arity_class] = list(functions)

    def seal(self) -> None:
        self.sealed = True

    def manifest(self) -> str:
        return "".join(self.sites[sid].manifest_line() + "\n" for sid in sorted(self.sites))

    # run lifecycle

    def activate(self, mode: str = MODE_FAULTING, program: Iterable[tuple[int, bytes]] = (),
                 hits_out: str | None = None) -> None:
        if mode not in MODES:
            raise FaultRuntimeError(f"unknown fault mode {mode!r}")
        self.seal()
        self.mode = mode
        self.hits = {}
        self.streams = {}
        self._hits_out = hits_out
        if mode == MODE_FAULTING:
            for site_id, bits in program:
                self.streams[site_id] = FaultStream(site_id, bits)

    def activate_from_env(self, environ: Mapping[str, str] | None = None) -> None:
        env = os.environ if environ is None else environ
        mode = env.get(ENV_MODE, MODE_OFF)
        program: list[tuple[int, bytes]] = []
        path = env.get(ENV_PROGRAM)
        if mode == MODE_FAULTING and path:
            with open(path, "rb") as fh:
                program = decode_program(fh.read())
        self.activate(mode, program, env.get(ENV_HITS_OUT) or None)
        manifest_out = env.get(ENV_MANIFEST_OUT)
        if manifest_out:
            with open(manifest_out, "w") as fh:
                fh.write(self.manifest())

    def finish(self) -> None:
        if self._hits_out:
            with open(self._hits_out, "w") as fh:
                fh.write(format_hits(self.hits))
            self._hits_out = None

    def _on_term(self, signum, frame) -> None:
        # a lingering peer still reports its hit counts before dying
        self.finish()
        signal.signal(signum, signal.SIG_DFL)
        os.kill(os.getpid(), signum)

    @contextlib.contextmanager
    def session(self, environ: Mapping[str, str] | None = None) -> Iterator["FaultRuntime"]:
        self.activate_from_env(environ)
        previous = None
        if self._hits_out:
            try:
                previous = signal.signal(signal.SIGTERM, self._on_term)
            except ValueError:  # not the main thread
                pass
        try:
            yield self
        finally:
            self.finish()
            if previous is not None:
                signal.signal(signal.SIGTERM, previous)

    def record_hits(self) -> dict[int, int]:
        return dict(self.hits)

    # fault application

    def _next(self, site: FaultSite) -> int:
        if self.mode == MODE_OFF:
            return 0
        sid = site.site_id
        self.hits[sid] = self.hits.get(sid, 0) + 1
        stream = self.streams.get(sid)
        if stream is None:
            return 0
        return stream.consume(site.width_bits)

    def apply_value_fault(self, site: FaultSite, original: int) -> int:
        return original ^ self._next(site)

    def apply_branch_fault(self, site: FaultSite, condition: bool) -> bool:
        return bool(condition) ^ bool(self._next(site))

    def apply_switch_fault(self, site: FaultSite, original_index: int, case_count: int) -> int:
        if case_count < 1 or not 0 <= original_index < case_count:
            raise ValueError(f"switch index {original_index} outside {case_count} cases")
        b = self._next(site)
        if b == 0:
            return original_index
        return (original_index + b) % case_count

    def apply_call_fault(self, site: FaultSite, table: CallTable) -> int | None:
        """Return the table index to call, or ``None`` to skip the call."""
        b = self._next(site)
        if b == 0:
            return 0
        r = b % (len(table) + 1)
        return None if r == len(table) else r

    # instrumentation helpers used by peers

    value = apply_value_fault
    branch = apply_branch_fault
    switch = apply_switch_fault

    def call(self, site: FaultSite, original: Callable, *args, **kwargs):
        group = self.call_groups.get(site.arity_class, [original])
        table = CallTable.for_callee(site.arity_class, group, original)
        index = self.apply_call_fault(site, table)
        if index is None:
            return site.skip_default
        return table.entries[index](*args, **kwargs)
