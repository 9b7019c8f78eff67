"""TinyChat client: the weird peer of the testbed.

The client runs a fixed script (HELLO, AUTH, three DATA frames, DUP, BYE).
Every validation branch, length/capacity store, the message dispatch and
both digest calls are fault sites, so a fault program can bend what the
client sends while the client still wraps each message in a valid CRC and
MAC.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import select
import socket
import struct
import sys
import time
from dataclasses import dataclass

from ..faults import FaultRuntime, branch_site, call_site, switch_site, value_site
from .server import DEFAULT_SECRET, add_common_args, session_nonce
from .wire import (
    CLIENT_TO_SERVER,
    CRC,
    HEADER,
    KEY_LEN,
    NONCE_LEN,
    SERVER_TO_CLIENT,
    FrameType,
    Integrity,
    TranscriptRecorder,
    data_body,
    decode_frame,
    dup_body,
    encode_frame,
    hello_payload,
    keyed_digest,
)

ENV_TRANSCRIPT_OUT = "FTN_TRANSCRIPT_OUT"
MAX_CHUNK = 4096
CLIENT_NAME = b"ftn-client"

RT = FaultRuntime("tinychat-client")
DIGEST_GROUP = "digest(key,data)->bytes32"

# pre-connect configuration checks
SITE_PORT_CHECK = RT.register_site(branch_site(1, "client.py:check_config:port-range"))
SITE_SECRET_LEN = RT.register_site(value_site(2, "client.py:check_config:secret-len", 32))
# HELLO construction
SITE_HELLO_VERSION = RT.register_site(value_site(10, "client.py:send_hello:version", 8))
SITE_HELLO_NONCE_LEN = RT.register_site(value_site(11, "client.py:send_hello:nonce-len", 8))
SITE_HELLO_NAME_LEN = RT.register_site(value_site(12, "client.py:send_hello:name-len", 8))
# framing layer, every frame
SITE_FRAME_TYPE = RT.register_site(value_site(20, "client.py:send_message:type", 8))
SITE_FRAME_LEN = RT.register_site(value_site(21, "client.py:send_frame:length", 16))
SITE_SEQ = RT.register_site(value_site(22, "client.py:seal:seq", 32))
# reply validation
SITE_RX_CRC = RT.register_site(branch_site(30, "client.py:recv_reply:crc-bad"))
SITE_RX_TYPE = RT.register_site(branch_site(31, "client.py:expect:type-mismatch"))
SITE_RX_NONCE_LEN = RT.register_site(branch_site(32, "client.py:handshake:nonce-len-bad"))
SITE_RX_ECHO = RT.register_site(branch_site(33, "client.py:drain:unexpected-reply"))
# digests
SITE_AUTH_DIGEST = RT.register_site(call_site(40, "client.py:handshake:keyed_digest", DIGEST_GROUP,
                                              skip_default=bytes(KEY_LEN)))
SITE_FRAME_MAC = RT.register_site(call_site(41, "client.py:seal:keyed_digest", DIGEST_GROUP,
                                            skip_default=bytes(KEY_LEN)))
# scripted session
SITE_DISPATCH = RT.register_site(switch_site(50, "client.py:run_script:dispatch"))
SITE_CLAMP = RT.register_site(branch_site(51, "client.py:send_data:clamp"))
SITE_INNER_LEN = RT.register_site(value_site(52, "client.py:send_data:inner-len", 16))
SITE_BODY_BYTE = RT.register_site(value_site(53, "client.py:send_data:first-byte", 8, store=False))
SITE_DUP_INDEX = RT.register_site(value_site(54, "client.py:send_dup:index", 8))
SITE_DUP_CAP = RT.register_site(value_site(55, "client.py:send_dup:capacity", 16))


def blake2_digest(key: bytes, data: bytes) -> bytes:
    return hashlib.blake2s(data, key=key[:32]).digest()


def concat_digest(key: bytes, data: bytes) -> bytes:
    return hashlib.sha256(key + data).digest()


def unkeyed_digest(key: bytes, data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


RT.register_call_group(DIGEST_GROUP, [keyed_digest, blake2_digest, concat_digest, unkeyed_digest])

# script: (kind, argument); kinds index the dispatch switch, the last arm is the default
KIND_DATA, KIND_DUP, KIND_BYE, KIND_DEFAULT = range(4)
SCRIPT = (
    (KIND_DATA, b"hello tinychat"),
    (KIND_DATA, b"x"),
    (KIND_DATA, b"fuzz me"),
    (KIND_DUP, 0),
    (KIND_BYE, None),
)


class ClientAbort(Exception):
    """Internal consistency check failed; escapes as a crash."""


@dataclass
class ClientConfig:
    transport: str = "tcp"
    integrity: Integrity = Integrity.CRC_HMAC
    host: str = "127.0.0.1"
    port: int = 0
    seed: int | None = None
    secret: bytes = DEFAULT_SECRET
    reply_timeout: float = 0.3
    record: str | None = None


class TinyChatClient:
    def __init__(self, config: ClientConfig, rt: FaultRuntime = RT):
        self.config = config
        self.rt = rt
        self.recorder = TranscriptRecorder(config.record)
        self.sock: socket.socket | None = None
        self.rxbuf = bytearray()
        self.session_key: bytes | None = None
        self.tx_seq = 0
        self.sent_entries: list[bytes] = []
        self.expected_replies: list[int] = []
        self.unexpected = 0

    # configuration

    def check_config(self) -> None:
        rt = self.rt
        if not rt.branch(SITE_PORT_CHECK, 0 < self.config.port < 65536):
            raise ClientAbort(f"port {self.config.port} out of range")
        secret_len = rt.value(SITE_SECRET_LEN, len(self.config.secret))
        if secret_len != len(self.config.secret):
            raise ClientAbort("configuration corrupted: secret length changed")

    # transport

    def connect(self) -> None:
        if self.config.transport == "udp":
            self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            self.sock.connect((self.config.host, self.config.port))
        else:
            self.sock = socket.create_connection((self.config.host, self.config.port), timeout=5)
            self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def send_frame(self, ftype: int, payload: bytes) -> None:
        length = self.rt.value(SITE_FRAME_LEN, len(payload))
        raw = encode_frame(ftype, payload, length)
        self.recorder.add(CLIENT_TO_SERVER, raw)
        self.sock.sendall(raw)

    def recv_raw(self, timeout: float) -> bytes | None:
        """One reply frame as raw bytes, or None on timeout/EOF."""
        deadline = time.monotonic() + timeout
        while True:
            raw = self._take_frame()
            if raw is not None:
                self.recorder.add(SERVER_TO_CLIENT, raw)
                return raw
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return None
            ready, _, _ = select.select([self.sock], [], [], remaining)
            if not ready:
                return None
            try:
                chunk = self.sock.recv(65536)
            except (ConnectionResetError, ConnectionRefusedError):
                return None
            if not chunk:
                return None
            if self.config.transport == "udp":
                self.recorder.add(SERVER_TO_CLIENT, chunk)
                return chunk
            self.rxbuf += chunk

    def _take_frame(self) -> bytes | None:
        if len(self.rxbuf) < HEADER.size:
            return None
        length, _ = HEADER.unpack_from(self.rxbuf)
        end = HEADER.size + length + CRC.size
        if len(self.rxbuf) < end:
            return None
        raw = bytes(self.rxbuf[:end])
        del self.rxbuf[:end]
        return raw

    def recv_reply(self, timeout: float | None = None):
        raw = self.recv_raw(self.config.reply_timeout if timeout is None else timeout)
        if raw is None:
            return None
        try:
            frame, crc_ok = decode_frame(raw)
        except ValueError:
            return None
        crc_bad = self.config.integrity.checks_crc and not crc_ok
        if self.rt.branch(SITE_RX_CRC, crc_bad):
            return None
        return frame

    def expect(self, frame, ftype: int) -> bool:
        return not self.rt.branch(SITE_RX_TYPE, frame.ftype != ftype)

    # protocol

    def send_message(self, ftype: int, body: bytes) -> None:
        ftype = self.rt.value(SITE_FRAME_TYPE, ftype)
        if self.session_key is not None:
            body = self.seal(ftype, body)
        self.expected_replies.append(ftype)
        self.send_frame(ftype, body)

    def seal(self, ftype: int, body: bytes) -> bytes:
        seq = self.rt.value(SITE_SEQ, self.tx_seq)
        self.tx_seq += 1
        msg = struct.pack("<BI", ftype & 0xFF, seq & 0xFFFFFFFF) + body
        tag = self.rt.call(SITE_FRAME_MAC, keyed_digest, self.session_key, msg)
        return body + tag[:16]

    def handshake(self) -> bool:
        rt = self.rt
        client_nonce = session_nonce(self.config.seed, "client")
        version = rt.value(SITE_HELLO_VERSION, 1)
        nonce_len = rt.value(SITE_HELLO_NONCE_LEN, NONCE_LEN)
        name_len = rt.value(SITE_HELLO_NAME_LEN, len(CLIENT_NAME))
        self.send_message(FrameType.HELLO, hello_payload(client_nonce, CLIENT_NAME, version, nonce_len, name_len))
        reply = self.recv_reply()
        if reply is None or not self.expect(reply, FrameType.CHALLENGE):
            return False
        server_nonce = reply.payload
        if rt.branch(SITE_RX_NONCE_LEN, len(server_nonce) != NONCE_LEN):
            return False
        if not self.config.integrity.authenticated:
            return True
        key = rt.call(SITE_AUTH_DIGEST, keyed_digest, self.config.secret, client_nonce + server_nonce)
        if len(key) != KEY_LEN:
            raise ClientAbort("digest returned a short key")
        self.send_message(FrameType.AUTH, key)
        reply = self.recv_reply()
        if reply is None or not self.expect(reply, FrameType.AUTH):
            return False
        self.session_key = key
        return True

    def send_data(self, body: bytes) -> None:
        rt = self.rt
        if body:
            body = bytes([rt.value(SITE_BODY_BYTE, body[0]) & 0xFF]) + body[1:]
        declared = MAX_CHUNK
        if rt.branch(SITE_CLAMP, declared > len(body)):
            declared = len(body)
        inner_len = rt.value(SITE_INNER_LEN, declared)
        self.sent_entries.append(body[:inner_len])
        self.send_message(FrameType.DATA, data_body(inner_len, body))

    def send_dup(self, index: int) -> None:
        rt = self.rt
        entry = self.sent_entries[index] if index < len(self.sent_entries) else b""
        needed = sum(len(e) for e in self.sent_entries) + len(entry)
        index = rt.value(SITE_DUP_INDEX, index)
        capacity = rt.value(SITE_DUP_CAP, needed)
        self.send_message(FrameType.DUP, dup_body(capacity, index))

    def run_script(self) -> None:
        for kind, arg in SCRIPT:
            kind = self.rt.switch(SITE_DISPATCH, kind, 4)
            if kind == KIND_DATA:
                self.send_data(arg if isinstance(arg, bytes) else b"")
            elif kind == KIND_DUP:
                self.send_dup(arg if isinstance(arg, int) else 0)
            elif kind == KIND_BYE:
                self.send_message(FrameType.BYE, b"")
            # default arm: nothing is sent

    def drain(self) -> None:
        if self.config.transport == "tcp":
            try:
                self.sock.shutdown(socket.SHUT_WR)
            except OSError:
                return
        expected = list(self.expected_replies[-len(SCRIPT):])
        while True:
            reply = self.recv_reply()
            if reply is None:
                return
            if self.rt.branch(SITE_RX_ECHO, reply.ftype not in expected):
                self.unexpected += 1
            if reply.ftype == FrameType.BYE and self.config.transport == "udp":
                return

    def run(self) -> int:
        self.check_config()
        self.connect()
        try:
            if self.handshake():
                self.run_script()
                self.drain()
        except (BrokenPipeError, ConnectionResetError, ConnectionRefusedError):
            pass
        finally:
            self.sock.close()
            self.recorder.flush()
        return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tinychat-client", description="TinyChat testbed client (weird peer)")
    add_common_args(p)
    p.add_argument("--reply-timeout-ms", type=int, default=300)
    p.add_argument("--record", default=None, help="write the session transcript to this file")
    return p


def config_from_args(args) -> ClientConfig:
    return ClientConfig(
        transport=args.transport,
        integrity=Integrity(args.integrity),
        host=args.host,
        port=args.port,
        seed=args.seed,
        secret=bytes.fromhex(args.secret),
        reply_timeout=args.reply_timeout_ms / 1000.0,
        record=args.record or os.environ.get(ENV_TRANSCRIPT_OUT) or None,
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    with RT.session():
        return TinyChatClient(config_from_args(args)).run()


if __name__ == "__main__":
    from ..peer import exit_with, run_peer

    exit_with(run_peer(main, sys.argv[1:]))
