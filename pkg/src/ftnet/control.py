"""Control channel between a peer and the orchestrator.

Messages are ``kind u8 | payload length u16 | payload`` over a socketpair
whose peer-side fd number is passed in ``FTN_CONTROL_FD``.  Inside a peer,
``install_socket_hooks`` wraps ``bind``/``listen``/``connect``/``accept`` so
that unmodified socket code reports readiness and connection progress.
"""

from __future__ import annotations

import errno
import os
import socket
import struct
from dataclasses import dataclass

ENV_CONTROL_FD = "FTN_CONTROL_FD"
ENV_SIDE = "FTN_SIDE"

READY = 1
CONNECTING = 2
CONNECTED = 3
PEER_ERROR = 4

KIND_NAMES = {READY: "Ready", CONNECTING: "Connecting", CONNECTED: "Connected", PEER_ERROR: "PeerError"}

_HEADER = struct.Struct("<BH")


@dataclass(frozen=True)
class ControlMessage:
    kind: int
    payload: bytes = b""

    @property
    def name(self) -> str:
        return KIND_NAMES.get(self.kind, f"kind{self.kind}")

    @property
    def text(self) -> str:
        return self.payload.decode("utf-8", "replace")

    def ready_address(self) -> tuple[str, int]:
        port, = struct.unpack_from("<H", self.payload)
        return self.payload[2:].decode(), port


def encode_message(kind: int, payload: bytes = b"") -> bytes:
    if len(payload) > 0xFFFF:
        payload = payload[:0xFFFF]
    return _HEADER.pack(kind, len(payload)) + payload


def ready_payload(address: str, port: int) -> bytes:
    return struct.pack("<H", port) + address.encode()


class MessageReader:
    """Incremental decoder for a byte stream of control messages."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[ControlMessage]:
        self._buf += data
        out = []
        while len(self._buf) >= _HEADER.size:
            kind, length = _HEADER.unpack_from(self._buf)
            end = _HEADER.size + length
            if len(self._buf) < end:
                break
            out.append(ControlMessage(kind, bytes(self._buf[_HEADER.size:end])))
            del self._buf[:end]
        return out


class ControlClient:
    """Peer-side writer.  Write failures are swallowed: the orchestrator
    falls back to its grace timer when a message never arrives."""

    def __init__(self, fd: int | None):
        self.fd = fd
        self.ready_sent = False
        self.connected_sent = False

    def send(self, kind: int, payload: bytes = b"") -> bool:
        if self.fd is None:
            return False
        try:
            os.write(self.fd, encode_message(kind, payload))
            return True
        except OSError:
            return False

    def ready(self, address: str, port: int) -> None:
        if not self.ready_sent:
            self.ready_sent = True
            self.send(READY, ready_payload(address, port))

    def connected(self) -> None:
        if not self.connected_sent:
            self.connected_sent = True
            self.send(CONNECTED)

    def error(self, text: str) -> None:
        self.send(PEER_ERROR, text.encode())


_client: ControlClient | None = None
_originals: dict[str, object] = {}


def readiness_hook(event: str, address: str, port: int, sock_type: int = socket.SOCK_STREAM) -> None:
    """Report readiness from inside a server peer.

    A stream socket becomes ready on ``listen``; a datagram socket never
    listens, so it is ready as soon as it is bound.
    """
    if _client is None:
        return
    if event == "listen" or (event == "bind" and sock_type == socket.SOCK_DGRAM):
        _client.ready(address, port)


def _sockname(sock) -> tuple[str, int]:
    try:
        name = sock.getsockname()
        return str(name[0]), int(name[1])
    except (OSError, IndexError, TypeError):
        return "", 0


def install_socket_hooks(client: ControlClient) -> None:
    global _client
    _client = client
    if _originals:
        return
    cls = socket.socket
    for name in ("bind", "listen", "connect", "accept", "recvfrom"):
        _originals[name] = getattr(cls, name)

    def bind(self, address):
        try:
            _originals["bind"](self, address)
        except OSError as exc:
            if _client is not None:
                _client.error(f"bind: {errno.errorcode.get(exc.errno, exc.errno)}")
            raise
        host, port = _sockname(self)
        readiness_hook("bind", host, port, self.type)

    def listen(self, *args):
        _originals["listen"](self, *args)
        host, port = _sockname(self)
        readiness_hook("listen", host, port, self.type)

    def connect(self, address):
        if _client is not None:
            _client.send(CONNECTING)
        _originals["connect"](self, address)
        if _client is not None:
            _client.connected()

    def accept(self):
        conn = _originals["accept"](self)
        if _client is not None:
            _client.connected()
        return conn

    def recvfrom(self, *args):
        result = _originals["recvfrom"](self, *args)
        if _client is not None and self.type == socket.SOCK_DGRAM:
            _client.connected()
        return result

    cls.bind = bind
    cls.listen = listen
    cls.connect = connect
    cls.accept = accept
    cls.recvfrom = recvfrom


def install_from_env(environ=None) -> ControlClient:
    env = os.environ if environ is None else environ
    raw = env.get(ENV_CONTROL_FD)
    client = ControlClient(int(raw) if raw else None)
    install_socket_hooks(client)
    return client
