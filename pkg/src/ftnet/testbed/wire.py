"""TinyChat wire format.

Frame: ``length u16 | type u8 | payload[length] | crc u32``, little endian,
CRC-32 (IEEE, reflected, init and final xor all-ones) over everything
before the crc field.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import struct
import zlib
from dataclasses import dataclass

MAX_PAYLOAD = 4096
HEADER = struct.Struct("<HB")
CRC = struct.Struct("<I")
NONCE_LEN = 16
KEY_LEN = 32
TAG_LEN = 16
PROTOCOL_VERSION = 1


class FrameType(enum.IntEnum):
    HELLO = 1
    CHALLENGE = 2
    AUTH = 3
    DATA = 4
    DUP = 5
    BYE = 6


class Integrity(str, enum.Enum):
    NONE = "none"
    CRC = "crc"
    CRC_HMAC = "crc+hmac"

    @property
    def checks_crc(self) -> bool:
        return self is not Integrity.NONE

    @property
    def authenticated(self) -> bool:
        return self is Integrity.CRC_HMAC


def crc32(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


def keyed_digest(key: bytes, data: bytes) -> bytes:
    """HMAC-SHA256; the keyed digest used for AUTH tags and session keys."""
    return hmac.new(key, data, hashlib.sha256).digest()


def frame_tag(session_key: bytes, ftype: int, seq: int, body: bytes) -> bytes:
    return keyed_digest(session_key, struct.pack("<BI", ftype, seq) + body)[:TAG_LEN]


@dataclass(frozen=True)
class Frame:
    ftype: int
    payload: bytes
    length: int | None = None
    crc: int | None = None

    @property
    def declared_length(self) -> int:
        return len(self.payload) if self.length is None else self.length


def encode_frame(ftype: int, payload: bytes, length: int | None = None) -> bytes:
    """Encode a frame.  ``length`` overrides the header field (the crc is
    computed over whatever header is written)."""
    length = len(payload) if length is None else length
    head = HEADER.pack(length & 0xFFFF, ftype & 0xFF) + payload
    return head + CRC.pack(crc32(head))


def frame_crc_ok(length: int, ftype: int, payload: bytes, crc: int) -> bool:
    return crc32(HEADER.pack(length, ftype) + payload) == crc


def decode_frame(data: bytes) -> tuple[Frame, bool]:
    """Decode one whole frame (as a datagram); returns (frame, crc_ok)."""
    if len(data) < HEADER.size + CRC.size:
        raise ValueError("short frame")
    length, ftype = HEADER.unpack_from(data)
    payload = data[HEADER.size:-CRC.size]
    crc, = CRC.unpack_from(data, len(data) - CRC.size)
    ok = length == len(payload) and frame_crc_ok(length, ftype, payload, crc)
    return Frame(ftype, payload, length, crc), ok


def split_frames(stream: bytes) -> list[bytes]:
    """Cut a byte stream at frame boundaries as declared by the headers."""
    out = []
    pos = 0
    while pos + HEADER.size <= len(stream):
        length, _ = HEADER.unpack_from(stream, pos)
        end = pos + HEADER.size + length + CRC.size
        out.append(stream[pos:end])
        pos = end
    if pos < len(stream):
        out.append(stream[pos:])
    return out


# message payloads

def hello_payload(nonce: bytes, name: bytes, version: int = PROTOCOL_VERSION,
                  nonce_len: int | None = None, name_len: int | None = None) -> bytes:
    nonce_len = len(nonce) if nonce_len is None else nonce_len
    name_len = len(name) if name_len is None else name_len
    return bytes([version & 0xFF, nonce_len & 0xFF]) + nonce + bytes([name_len & 0xFF]) + name


def data_body(inner_len: int, body: bytes) -> bytes:
    return struct.pack("<H", inner_len & 0xFFFF) + body


def dup_body(capacity: int, index: int) -> bytes:
    return struct.pack("<HB", capacity & 0xFFFF, index & 0xFF)


# transcripts: per record ``dir u8 | len u32 | bytes``

CLIENT_TO_SERVER = 0
SERVER_TO_CLIENT = 1
_RECORD = struct.Struct("<BI")


@dataclass
class Transcript:
    records: list[tuple[int, bytes]]
    origin_seed: int | None = None

    def client_records(self) -> list[bytes]:
        return [data for direction, data in self.records if direction == CLIENT_TO_SERVER]

    def encode(self) -> bytes:
        return b"".join(_RECORD.pack(d, len(b)) + b for d, b in self.records)

    @classmethod
    def decode(cls, data: bytes, origin_seed: int | None = None) -> "Transcript":
        records = []
        pos = 0
        while pos < len(data):
            if pos + _RECORD.size > len(data):
                raise ValueError("truncated transcript record header")
            direction, length = _RECORD.unpack_from(data, pos)
            pos += _RECORD.size
            if pos + length > len(data):
                raise ValueError("truncated transcript record")
            records.append((direction, data[pos:pos + length]))
            pos += length
        return cls(records, origin_seed)

    def save(self, path: str) -> None:
        with open(path, "wb") as fh:
            fh.write(self.encode())

    @classmethod
    def load(cls, path: str) -> "Transcript":
        with open(path, "rb") as fh:
            return cls.decode(fh.read())


class TranscriptRecorder:
    def __init__(self, path: str | None):
        self.path = path
        self.records: list[tuple[int, bytes]] = []

    def add(self, direction: int, data: bytes) -> None:
        if self.path:
            self.records.append((direction, bytes(data)))

    def flush(self) -> None:
        if self.path:
            Transcript(self.records).save(self.path)
