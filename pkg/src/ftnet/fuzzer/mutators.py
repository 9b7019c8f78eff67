"""Byte-level havoc operators plus the program-level mutations.

The same operators mutate fault streams here and recorded messages in
the replay baseline.
"""

from __future__ import annotations

import random
from typing import Callable, Sequence

from .program import FaultProgram, Provenance, stream_bytes

DEFAULT_PROBE_BYTES = 8
STACK_DEPTHS = (1, 2, 4)


def op_bitflip(buf: bytearray, rng: random.Random) -> None:
    bit = rng.randrange(len(buf) * 8)
    buf[bit >> 3] ^= 1 << (bit & 7)


def op_random_byte(buf: bytearray, rng: random.Random) -> None:
    buf[rng.randrange(len(buf))] = rng.randrange(256)


def op_extreme_byte(buf: bytearray, rng: random.Random) -> None:
    buf[rng.randrange(len(buf))] = rng.choice((0x00, 0xFF))


def _block(buf: bytearray, rng: random.Random) -> tuple[int, int]:
    start = rng.randrange(len(buf))
    length = rng.randint(1, min(len(buf) - start, 32))
    return start, start + length


def op_block_random(buf: bytearray, rng: random.Random) -> None:
    start, end = _block(buf, rng)
    buf[start:end] = rng.randbytes(end - start)


def op_block_zero(buf: bytearray, rng: random.Random) -> None:
    start, end = _block(buf, rng)
    buf[start:end] = bytes(end - start)


OPERATORS: tuple[Callable[[bytearray, random.Random], None], ...] = (
    op_bitflip, op_random_byte, op_extreme_byte, op_block_random, op_block_zero,
)


def havoc(data: bytes, rng: random.Random, operators: Sequence = OPERATORS) -> bytes:
    """Apply a stack of 1, 2 or 4 randomly chosen operators."""
    if not data:
        return data
    buf = bytearray(data)
    for _ in range(rng.choice(STACK_DEPTHS)):
        rng.choice(operators)(buf, rng)
    return bytes(buf)


def havoc_changed(data: bytes, rng: random.Random, attempts: int = 16) -> bytes:
    """Like ``havoc`` but never returns the input unchanged."""
    for _ in range(attempts):
        out = havoc(data, rng)
        if out != data:
            return out
    buf = bytearray(data)
    op_bitflip(buf, rng)
    return bytes(buf)


def fresh_stream(hits: int | None, width_bits: int, rng: random.Random) -> bytes:
    """A non-identity stream for a site: havoc over zeros, restricted to the
    bits the site will actually consume."""
    if hits:
        size, used_bits = stream_bytes(hits, width_bits), hits * width_bits
    else:
        size, used_bits = DEFAULT_PROBE_BYTES, DEFAULT_PROBE_BYTES * 8
    buf = bytearray(havoc(bytes(size), rng))
    spare = size * 8 - used_bits
    if spare:
        buf[-1] &= 0xFF >> spare
    if not any(buf):
        bit = rng.randrange(used_bits)
        buf[bit >> 3] |= 1 << (bit & 7)
    return bytes(buf)


def mutate_stream(program: FaultProgram, rng: random.Random) -> tuple[FaultProgram, int]:
    """Child differing from ``program`` only in one entry's stream.

    Returns the child and the mutated site.
    """
    site, stream = rng.choice(program.entries)
    if stream:
        new = havoc_changed(stream, rng)
    else:
        new = havoc_changed(bytes(DEFAULT_PROBE_BYTES), rng)
    child = FaultProgram(program.replace(site, new), dict(program.calibration),
                         Provenance("stream", (program.id or 0,)))
    return child, site


def splice(a: FaultProgram, b: FaultProgram, rng: random.Random) -> tuple[FaultProgram, int] | None:
    """Append one of ``b``'s tuples whose site ``a`` lacks; ``None`` if none."""
    taken = set(a.sites)
    candidates = [e for e in b.entries if e[0] not in taken]
    if not candidates:
        return None
    site, stream = rng.choice(candidates)
    calibration = dict(a.calibration)
    if site in b.calibration:
        calibration[site] = b.calibration[site]
    child = FaultProgram(a.entries + [(site, stream)], calibration,
                         Provenance("splice", (a.id or 0, b.id or 0)))
    return child, site


def extend(program: FaultProgram, sites: dict[int, int], skip: set[int], rng: random.Random,
           known_hits: dict[int, int] | None = None) -> tuple[FaultProgram, int] | None:
    """Append a fresh tuple for an unused, non-skip-listed site.

    ``sites`` maps site id to width in bits; returns ``None`` when no site
    is eligible.
    """
    taken = set(program.sites)
    eligible = sorted(s for s in sites if s not in taken and s not in skip)
    if not eligible:
        return None
    site = rng.choice(eligible)
    hits = (known_hits or {}).get(site)
    stream = fresh_stream(hits, sites[site], rng)
    calibration = dict(program.calibration)
    child = FaultProgram(program.entries + [(site, stream)], calibration,
                         Provenance("extend", (program.id or 0,)))
    return child, site
