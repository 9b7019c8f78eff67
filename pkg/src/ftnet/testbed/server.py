"""TinyChat server: the target peer of the testbed.

Handles exactly one session and exits.  Every decision point visits a
coverage location.  Locations below ``POST_HANDSHAKE_BASE`` run before the
session is established; locations at or above it only run afterwards, so
with the shifted-previous edge hash any map cell at or above
``POST_HANDSHAKE_CELL_MIN`` proves that post-handshake code executed.
"""

from __future__ import annotations

import argparse
import enum
import hmac
import os
import random
import socket
import sys
from dataclasses import dataclass, field

from ..coverage import CoverageRecorder
from . import bugs
from .wire import (
    CRC,
    HEADER,
    KEY_LEN,
    MAX_PAYLOAD,
    NONCE_LEN,
    TAG_LEN,
    FrameType,
    Integrity,
    encode_frame,
    frame_crc_ok,
    frame_tag,
    keyed_digest,
)

POST_HANDSHAKE_BASE = 0x8000
POST_HANDSHAKE_CELL_MIN = 0x4000
DEFAULT_SECRET = bytes.fromhex("5ee7c0de" * 8)
TABLE_MAX_CAPACITY = 4096


class Loc(enum.IntEnum):
    # pre-handshake, all < 0x4000
    START = 0x0101
    BOUND = 0x0102
    ACCEPTED = 0x0103
    DGRAM_PEER = 0x0104
    DGRAM_FOREIGN = 0x0105
    READ_HEADER = 0x0110
    EOF = 0x0111
    EOF_MID_FRAME = 0x0112
    TOO_LONG = 0x0113
    DGRAM_SHORT = 0x0114
    DGRAM_LEN_MISMATCH = 0x0115
    CRC_BAD = 0x0120
    CRC_OK = 0x0121
    CRC_SKIPPED = 0x0122
    DISPATCH = 0x0130
    UNKNOWN_TYPE = 0x0131
    PHASE_VIOLATION = 0x0132
    HELLO = 0x0200
    HELLO_SHORT = 0x0201
    HELLO_V1 = 0x0202
    HELLO_V0 = 0x0203
    HELLO_BAD_VERSION = 0x0204
    HELLO_BAD_NONCE_LEN = 0x0205
    HELLO_NONCE_TRUNC = 0x0206
    HELLO_NAME_TRUNC = 0x0207
    HELLO_TRAILING = 0x0208
    HELLO_ANON = 0x0209
    HELLO_NAME_TEXT = 0x020A
    HELLO_NAME_BINARY = 0x020B
    HELLO_NO_NAME = 0x020C
    CHALLENGE_SENT = 0x0210
    AUTH = 0x0300
    AUTH_BAD_LEN = 0x0301
    AUTH_FAIL = 0x0302
    SEND_FAILED = 0x0310
    SESSION_CLOSED = 0x0320
    # post-handshake, all >= 0x8000
    AUTH_OK = 0x8001
    ESTABLISHED_NOAUTH = 0x8002
    EST_DISPATCH = 0x8010
    EST_REHELLO = 0x8011
    EST_REAUTH = 0x8012
    EST_UNKNOWN = 0x8013
    MAC_SHORT = 0x8020
    MAC_BAD = 0x8021
    MAC_OK = 0x8022
    DATA = 0x8100
    DATA_SHORT = 0x8101
    DATA_OVERLONG = 0x8102
    DATA_TRUNCATED = 0x8103
    DATA_EXACT = 0x8104
    DATA_EMPTY = 0x8105
    DATA_TINY = 0x8106
    DATA_SMALL = 0x8107
    DATA_LARGE = 0x8108
    DATA_TEXT = 0x8109
    DATA_NUL = 0x810A
    DATA_BINARY = 0x810B
    TABLE_INSERT = 0x8110
    TABLE_EVICT = 0x8111
    TABLE_SKIP = 0x8112
    DATA_ECHO = 0x8120
    DUP = 0x8200
    DUP_SHORT = 0x8201
    DUP_CAP_ZERO = 0x8202
    DUP_CAP_TOO_BIG = 0x8203
    DUP_CAP_SHRINK = 0x8204
    DUP_CAP_GROW = 0x8205
    DUP_EVICT = 0x8206
    DUP_BAD_INDEX = 0x8207
    DUP_NO_SPACE = 0x8208
    DUP_OK = 0x8209
    DUP_TRAILING = 0x820A
    BYE = 0x8300
    BYE_LINGER = 0x8301
    AFTER_CLOSE = 0x8302


FRAME_TYPES = frozenset(int(t) for t in FrameType)
POST_HANDSHAKE_LOCATIONS = frozenset(loc for loc in Loc if loc >= POST_HANDSHAKE_BASE)


def is_post_handshake_cell(cell: int) -> bool:
    return cell >= POST_HANDSHAKE_CELL_MIN


def session_nonce(seed: int | None, role: str) -> bytes:
    if seed is None:
        return os.urandom(NONCE_LEN)
    return random.Random(f"{role}:{seed}").randbytes(NONCE_LEN)


class Phase(enum.Enum):
    AWAIT_HELLO = "AwaitHello"
    AWAIT_AUTH = "AwaitAuth"
    ESTABLISHED = "Established"
    CLOSED = "Closed"


@dataclass
class DupTable:
    capacity: int = TABLE_MAX_CAPACITY
    entries: list[bytes] = field(default_factory=list)

    @property
    def used(self) -> int:
        return sum(len(e) for e in self.entries)

    def evict_to_fit(self, extra: int = 0) -> int:
        evicted = 0
        while self.entries and self.used + extra > self.capacity:
            self.entries.pop(0)
            evicted += 1
        return evicted


@dataclass
class Session:
    phase: Phase = Phase.AWAIT_HELLO
    client_nonce: bytes = b""
    server_nonce: bytes = b""
    session_key: bytes | None = None
    dup_table: DupTable | None = field(default_factory=DupTable)
    rx_seq: int = 0
    tx_seq: int = 0
    errors: int = 0
    released: bool = False


@dataclass
class ServerConfig:
    transport: str = "tcp"
    integrity: Integrity = Integrity.CRC_HMAC
    armed: frozenset = frozenset()
    host: str = "127.0.0.1"
    port: int = 0
    seed: int | None = None
    secret: bytes = DEFAULT_SECRET
    loop: bool = False


class _Close(Exception):
    pass


class TinyChatServer:
    def __init__(self, config: ServerConfig, cov: CoverageRecorder | None = None):
        self.config = config
        self.cov = cov or CoverageRecorder()
        self.session = Session()
        self._send = None

    # plumbing

    def visit(self, loc: Loc) -> None:
        self.cov.visit(int(loc))

    def reply(self, ftype: int, body: bytes = b"") -> None:
        s = self.session
        if self.config.integrity.authenticated and s.session_key is not None and ftype not in (
                FrameType.CHALLENGE, FrameType.AUTH):
            body = body + frame_tag(s.session_key, ftype, s.tx_seq, body)
            s.tx_seq += 1
        try:
            self._send(encode_frame(ftype, body))
        except OSError:
            self.visit(Loc.SEND_FAILED)
            raise _Close()

    def close(self, loc: Loc) -> None:
        self.visit(loc)
        raise _Close()

    # frame processing

    def handle_frame(self, length: int, ftype: int, payload: bytes, crc: int) -> None:
        if self.config.integrity.checks_crc:
            if not frame_crc_ok(length, ftype, payload, crc):
                self.visit(Loc.CRC_BAD)
                self.session.errors += 1
                return
            self.visit(Loc.CRC_OK)
        else:
            self.visit(Loc.CRC_SKIPPED)
        self.dispatch(ftype, payload)

    def dispatch(self, ftype: int, payload: bytes) -> None:
        s = self.session
        if s.phase is Phase.CLOSED:
            self.after_close(ftype)
            return
        if s.phase is Phase.ESTABLISHED:
            self.dispatch_established(ftype, payload)
            return
        self.visit(Loc.DISPATCH)
        if ftype not in FRAME_TYPES:
            self.close(Loc.UNKNOWN_TYPE)
        if s.phase is Phase.AWAIT_HELLO and ftype == FrameType.HELLO:
            self.handle_hello(payload)
        elif s.phase is Phase.AWAIT_AUTH and ftype == FrameType.AUTH:
            self.handle_auth(payload)
        else:
            self.close(Loc.PHASE_VIOLATION)

    def handle_hello(self, p: bytes) -> None:
        self.visit(Loc.HELLO)
        if len(p) < 2:
            self.visit(Loc.HELLO_SHORT)
            self.session.errors += 1
            return
        version, nonce_len = p[0], p[1]
        if version == 1:
            self.visit(Loc.HELLO_V1)
        elif version == 0:
            self.visit(Loc.HELLO_V0)
        else:
            self.reply(FrameType.BYE, b"version")
            self.close(Loc.HELLO_BAD_VERSION)
        if nonce_len != NONCE_LEN:
            self.reply(FrameType.BYE, b"nonce")
            self.close(Loc.HELLO_BAD_NONCE_LEN)
        nonce = p[2:2 + NONCE_LEN]
        if len(nonce) < NONCE_LEN:
            self.close(Loc.HELLO_NONCE_TRUNC)
        rest = p[2 + NONCE_LEN:]
        if version == 1:
            self.parse_name(rest)
        self.session.client_nonce = nonce
        self.session.server_nonce = session_nonce(self.config.seed, "server")
        self.reply(FrameType.CHALLENGE, self.session.server_nonce)
        self.visit(Loc.CHALLENGE_SENT)
        if self.config.integrity.authenticated:
            self.session.phase = Phase.AWAIT_AUTH
        else:
            self.session.phase = Phase.ESTABLISHED
            self.visit(Loc.ESTABLISHED_NOAUTH)

    def parse_name(self, rest: bytes) -> None:
        if not rest:
            self.visit(Loc.HELLO_NO_NAME)
            return
        name_len = rest[0]
        name = rest[1:1 + name_len]
        if len(name) < name_len:
            self.reply(FrameType.BYE, b"name")
            self.close(Loc.HELLO_NAME_TRUNC)
        if len(rest) > 1 + name_len:
            self.visit(Loc.HELLO_TRAILING)
        if not name:
            self.visit(Loc.HELLO_ANON)
        elif all(0x20 <= c < 0x7F for c in name):
            self.visit(Loc.HELLO_NAME_TEXT)
        else:
            self.visit(Loc.HELLO_NAME_BINARY)

    def handle_auth(self, p: bytes) -> None:
        self.visit(Loc.AUTH)
        s = self.session
        if len(p) != KEY_LEN:
            self.reply(FrameType.BYE, b"auth")
            self.close(Loc.AUTH_BAD_LEN)
        expected = keyed_digest(self.config.secret, s.client_nonce + s.server_nonce)
        if not hmac.compare_digest(expected, p):
            self.reply(FrameType.BYE, b"auth")
            self.close(Loc.AUTH_FAIL)
        self.visit(Loc.AUTH_OK)
        self.reply(FrameType.AUTH, b"ok")
        s.session_key = expected
        s.phase = Phase.ESTABLISHED

    def dispatch_established(self, ftype: int, payload: bytes) -> None:
        self.visit(Loc.EST_DISPATCH)
        if ftype == FrameType.HELLO:
            self.close(Loc.EST_REHELLO)
        if ftype == FrameType.AUTH:
            self.close(Loc.EST_REAUTH)
        if ftype not in (FrameType.DATA, FrameType.DUP, FrameType.BYE):
            self.visit(Loc.EST_UNKNOWN)
            self.session.errors += 1
            return
        body = self.verify_tag(ftype, payload)
        if body is None:
            return
        if ftype == FrameType.DATA:
            self.handle_data(body)
        elif ftype == FrameType.DUP:
            self.handle_dup(body)
        else:
            self.handle_bye()

    def verify_tag(self, ftype: int, payload: bytes) -> bytes | None:
        s = self.session
        if not self.config.integrity.authenticated:
            return payload
        if len(payload) < TAG_LEN:
            self.visit(Loc.MAC_SHORT)
            s.errors += 1
            return None
        body, tag = payload[:-TAG_LEN], payload[-TAG_LEN:]
        if not hmac.compare_digest(frame_tag(s.session_key, ftype, s.rx_seq, body), tag):
            self.visit(Loc.MAC_BAD)
            s.errors += 1
            return None
        self.visit(Loc.MAC_OK)
        s.rx_seq += 1
        return body

    def handle_data(self, body: bytes) -> None:
        self.visit(Loc.DATA)
        if len(body) < 2:
            self.visit(Loc.DATA_SHORT)
            self.session.errors += 1
            return
        inner_len = int.from_bytes(body[:2], "little")
        content = self.copy_data(inner_len, body[2:])
        if content is None:
            return
        self.classify(content)
        self.store_entry(content)
        self.reply(FrameType.DATA, body)
        self.visit(Loc.DATA_ECHO)

    def copy_data(self, inner_len: int, carried: bytes) -> bytes | None:
        if inner_len > len(carried):
            if bugs.B1_LEN_COPY in self.config.armed:
                # reads inner_len bytes from a buffer holding len(carried)
                bugs.trigger(bugs.B1_LEN_COPY)
            self.visit(Loc.DATA_OVERLONG)
            self.session.errors += 1
            return None
        if inner_len < len(carried):
            self.visit(Loc.DATA_TRUNCATED)
        else:
            self.visit(Loc.DATA_EXACT)
        return carried[:inner_len]

    def classify(self, content: bytes) -> None:
        n = len(content)
        if n == 0:
            self.visit(Loc.DATA_EMPTY)
            return
        if n == 1:
            self.visit(Loc.DATA_TINY)
        elif n <= 16:
            self.visit(Loc.DATA_SMALL)
        else:
            self.visit(Loc.DATA_LARGE)
        if 0 in content:
            self.visit(Loc.DATA_NUL)
        elif all(0x20 <= c < 0x7F for c in content):
            self.visit(Loc.DATA_TEXT)
        else:
            self.visit(Loc.DATA_BINARY)

    def store_entry(self, content: bytes) -> None:
        table = self.session.dup_table
        if len(content) > table.capacity:
            self.visit(Loc.TABLE_SKIP)
            return
        if table.evict_to_fit(len(content)):
            self.visit(Loc.TABLE_EVICT)
        table.entries.append(content)
        self.visit(Loc.TABLE_INSERT)

    def handle_dup(self, body: bytes) -> None:
        self.visit(Loc.DUP)
        if len(body) < 3:
            self.visit(Loc.DUP_SHORT)
            self.session.errors += 1
            return
        if len(body) > 3:
            self.visit(Loc.DUP_TRAILING)
        capacity = int.from_bytes(body[:2], "little")
        index = body[2]
        table = self.session.dup_table
        if capacity > TABLE_MAX_CAPACITY:
            self.visit(Loc.DUP_CAP_TOO_BIG)
            self.session.errors += 1
            return
        if capacity == 0:
            self.visit(Loc.DUP_CAP_ZERO)
        elif capacity < table.capacity:
            self.visit(Loc.DUP_CAP_SHRINK)
        elif capacity > table.capacity:
            self.visit(Loc.DUP_CAP_GROW)
        table.capacity = capacity
        if table.evict_to_fit():
            self.visit(Loc.DUP_EVICT)
        if index >= len(table.entries):
            self.visit(Loc.DUP_BAD_INDEX)
            self.session.errors += 1
            return
        self.duplicate_entry(table, table.entries[index])

    def duplicate_entry(self, table: DupTable, entry: bytes) -> None:
        if table.used + len(entry) > table.capacity:
            if bugs.B2_DUP_OVERFLOW in self.config.armed:
                # the copy is written past the space reserved for the table
                bugs.trigger(bugs.B2_DUP_OVERFLOW)
            self.visit(Loc.DUP_NO_SPACE)
            self.session.errors += 1
            return
        table.entries.append(entry)
        self.visit(Loc.DUP_OK)
        self.reply(FrameType.DUP, len(table.entries).to_bytes(2, "little"))

    def handle_bye(self) -> None:
        self.visit(Loc.BYE)
        self.reply(FrameType.BYE)
        s = self.session
        s.phase = Phase.CLOSED
        s.session_key = None
        s.dup_table = None
        s.released = True
        if bugs.B3_USE_AFTER_CLOSE in self.config.armed:
            # the session is released but the connection keeps being served
            self.visit(Loc.BYE_LINGER)
            return
        raise _Close()

    def after_close(self, ftype: int) -> None:
        self.visit(Loc.AFTER_CLOSE)
        self.use_session(ftype)

    def use_session(self, ftype: int) -> None:
        if self.session.released:
            bugs.trigger(bugs.B3_USE_AFTER_CLOSE)

    # transports

    def serve(self) -> int:
        self.visit(Loc.START)
        while True:
            if self.config.transport == "udp":
                self.serve_udp()
            else:
                self.serve_tcp()
            if not self.config.loop:
                return 0
            self.session = Session()

    def serve_tcp(self) -> None:
        with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as listener:
            listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            listener.bind((self.config.host, self.config.port))
            self.visit(Loc.BOUND)
            listener.listen(1)
            conn, _ = listener.accept()
        self.visit(Loc.ACCEPTED)
        with conn:
            self._send = conn.sendall
            reader = _StreamReader(conn)
            try:
                while True:
                    self.visit(Loc.READ_HEADER)
                    head = reader.read_exact(HEADER.size)
                    if head is None:
                        self.visit(Loc.EOF)
                        break
                    length, ftype = HEADER.unpack(head)
                    if length > MAX_PAYLOAD:
                        self.close(Loc.TOO_LONG)
                    rest = reader.read_exact(length + CRC.size)
                    if rest is None:
                        self.visit(Loc.EOF_MID_FRAME)
                        break
                    crc, = CRC.unpack_from(rest, length)
                    self.handle_frame(length, ftype, rest[:length], crc)
            except _Close:
                self.visit(Loc.SESSION_CLOSED)

    def serve_udp(self) -> None:
        with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as sock:
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            sock.bind((self.config.host, self.config.port))
            self.visit(Loc.BOUND)
            peer = None

            def send(data):
                sock.sendto(data, peer)

            self._send = send
            try:
                while True:
                    self.visit(Loc.READ_HEADER)
                    data, addr = sock.recvfrom(65535)
                    if peer is None:
                        peer = addr
                        self.visit(Loc.DGRAM_PEER)
                    elif addr != peer:
                        self.visit(Loc.DGRAM_FOREIGN)
                        continue
                    if len(data) < HEADER.size + CRC.size:
                        self.visit(Loc.DGRAM_SHORT)
                        self.session.errors += 1
                        continue
                    length, ftype = HEADER.unpack_from(data)
                    if length > MAX_PAYLOAD:
                        self.close(Loc.TOO_LONG)
                    payload = data[HEADER.size:-CRC.size]
                    if length != len(payload):
                        # datagram boundaries win over the declared length
                        self.visit(Loc.DGRAM_LEN_MISMATCH)
                        payload = payload[:length]
                    crc, = CRC.unpack_from(data, len(data) - CRC.size)
                    self.handle_frame(length, ftype, payload, crc)
            except _Close:
                self.visit(Loc.SESSION_CLOSED)


class _StreamReader:
    def __init__(self, conn: socket.socket):
        self.conn = conn
        self.buf = bytearray()

    def read_exact(self, n: int) -> bytes | None:
        while len(self.buf) < n:
            try:
                chunk = self.conn.recv(65536)
            except (ConnectionResetError, TimeoutError):
                return None
            if not chunk:
                return None
            self.buf += chunk
        out = bytes(self.buf[:n])
        del self.buf[:n]
        return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tinychat-server", description="TinyChat testbed server (target peer)")
    add_common_args(p)
    p.add_argument("--arm", default="", help="comma-separated bug ids to arm (B1_len_copy,...)")
    p.add_argument("--loop", action="store_true", help="serve sessions forever (manual testing)")
    return p


def add_common_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--transport", choices=("tcp", "udp"), default="tcp")
    p.add_argument("--integrity", choices=[i.value for i in Integrity], default=Integrity.CRC_HMAC.value)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--seed", type=int, default=None, help="derive nonces from this seed (default: fresh)")
    p.add_argument("--secret", default=DEFAULT_SECRET.hex(), help="shared secret, hex")


def config_from_args(args) -> ServerConfig:
    return ServerConfig(
        transport=args.transport,
        integrity=Integrity(args.integrity),
        armed=bugs.parse_armed(args.arm),
        host=args.host,
        port=args.port,
        seed=args.seed,
        secret=bytes.fromhex(args.secret),
        loop=args.loop,
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cov = CoverageRecorder.from_env()
    try:
        return TinyChatServer(config_from_args(args), cov).serve()
    finally:
        cov.close()


if __name__ == "__main__":
    from ..peer import exit_with, run_peer

    exit_with(run_peer(main, sys.argv[1:]))
