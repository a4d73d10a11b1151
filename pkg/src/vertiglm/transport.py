"""Authenticated, framed, ordered channels between two parties.

Frames on the wire::

    nonce (12 bytes, little-endian per-direction counter)
    ciphertext length (u32 little-endian)
    ciphertext (ChaCha20-Poly1305 over one serialized message)

Each direction uses its own key, derived with HKDF-SHA256 from the
pre-shared key with the 16-byte session id as salt.  A receiver only
accepts the next expected counter value, so replayed, dropped or reordered
frames abort the session.
"""
from __future__ import annotations

import os
import queue
import socket
import struct
import threading
from dataclasses import dataclass
from typing import Callable, Optional

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .exceptions import AuthFailure, ConnectFailure, TransportFailure

PSK_BYTES = 32
SESSION_ID_BYTES = 16
NONCE_BYTES = 12
PREAMBLE_MAGIC = b"VGLM"
PREAMBLE = struct.Struct("<4sH16s")
WIRE_VERSION = 1
MAX_FRAME = 1 << 31

INITIATOR = "initiator"
RESPONDER = "responder"

Tap = Callable[[str, bytes, bytes], None]


def new_session_id() -> bytes:
    return os.urandom(SESSION_ID_BYTES)


def derive_key(psk: bytes, session_id: bytes, direction: str) -> bytes:
    if len(psk) != PSK_BYTES:
        raise ValueError(f"psk must be exactly {PSK_BYTES} bytes")
    hkdf = HKDF(algorithm=hashes.SHA256(), length=32, salt=session_id,
                info=b"vertiglm/v1 " + direction.encode())
    return hkdf.derive(psk)


def _other(role):
    return RESPONDER if role == INITIATOR else INITIATOR


@dataclass(frozen=True)
class Frame:
    nonce: bytes
    ciphertext: bytes

    HEADER = struct.Struct("<12sI")

    def to_bytes(self) -> bytes:
        return self.HEADER.pack(self.nonce, len(self.ciphertext)) + self.ciphertext

    @classmethod
    def from_bytes(cls, data: bytes) -> "Frame":
        if len(data) < cls.HEADER.size:
            raise TransportFailure("truncated frame header")
        nonce, length = cls.HEADER.unpack_from(data)
        body = data[cls.HEADER.size:]
        if len(body) != length:
            raise TransportFailure("frame length does not match header")
        return cls(nonce, body)


class Channel:
    """Encrypts outgoing and authenticates incoming plaintext messages.

    Subclasses move opaque frame bytes (:meth:`_send_frame` and
    :meth:`_recv_frame`).  One activity may send while another receives.
    """

    def __init__(self, psk: bytes, session_id: bytes, role: str, tap: Optional[Tap] = None):
        if role not in (INITIATOR, RESPONDER):
            raise ValueError(f"unknown role {role!r}")
        self.role = role
        self.session_id = session_id
        self.tap = tap
        out_dir = f"{role}->{_other(role)}"
        in_dir = f"{_other(role)}->{role}"
        self._out = ChaCha20Poly1305(derive_key(psk, session_id, out_dir))
        self._in = ChaCha20Poly1305(derive_key(psk, session_id, in_dir))
        self._out_ad = session_id + out_dir.encode()
        self._in_ad = session_id + in_dir.encode()
        self._send_counter = 0
        self._recv_counter = 0
        self._send_lock = threading.Lock()
        self._recv_lock = threading.Lock()
        self.closed = False

    def send(self, plaintext: bytes) -> None:
        with self._send_lock:
            if self.closed:
                raise TransportFailure("channel is closed")
            nonce = self._send_counter.to_bytes(NONCE_BYTES, "little")
            self._send_counter += 1
            frame = Frame(nonce, self._out.encrypt(nonce, plaintext, self._out_ad)).to_bytes()
            if self.tap is not None:
                self.tap("out", plaintext, frame)
            self._send_frame(frame)

    def receive(self) -> bytes:
        with self._recv_lock:
            data = self._recv_frame()
            frame = Frame.from_bytes(data)
            expected = self._recv_counter.to_bytes(NONCE_BYTES, "little")
            if frame.nonce != expected:
                raise TransportFailure("unexpected nonce (replayed or reordered frame)")
            try:
                plaintext = self._in.decrypt(frame.nonce, frame.ciphertext, self._in_ad)
            except InvalidTag:
                raise AuthFailure("frame failed authentication (wrong key or tampering)") from None
            self._recv_counter += 1
            if self.tap is not None:
                self.tap("in", plaintext, data)
            return plaintext

    def close(self) -> None:
        self.closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _send_frame(self, frame: bytes) -> None:
        raise NotImplementedError

    def _recv_frame(self) -> bytes:
        raise NotImplementedError


_CLOSED = object()


class LoopbackChannel(Channel):
    """In-process channel endpoint; build pairs with :func:`loopback_pair`."""

    def __init__(self, psk, session_id, role, inbox, outbox, tap=None, mangle=None):
        super().__init__(psk, session_id, role, tap)
        self._inbox = inbox
        self._outbox = outbox
        self._mangle = mangle

    def _send_frame(self, frame):
        if self._mangle is not None:
            frame = self._mangle(frame)
        self._outbox.put(frame)

    def _recv_frame(self):
        if self.closed:
            raise TransportFailure("channel is closed")
        item = self._inbox.get()
        if item is _CLOSED:
            self.closed = True
            raise TransportFailure("peer closed the channel")
        return item

    def close(self):
        if not self.closed:
            self.closed = True
            self._outbox.put(_CLOSED)


def loopback_pair(psk, session_id=None, psk_responder=None, tap=None, mangle=None):
    """Return ``(initiator, responder)`` endpoints sharing one session.

    ``psk_responder`` lets tests give the two ends different keys;
    ``mangle`` rewrites frames sent by the initiator.
    """
    session_id = new_session_id() if session_id is None else session_id
    a_to_b, b_to_a = queue.Queue(), queue.Queue()
    tap_a = (lambda d, p, f: tap(INITIATOR, d, p, f)) if tap else None
    tap_b = (lambda d, p, f: tap(RESPONDER, d, p, f)) if tap else None
    init = LoopbackChannel(psk, session_id, INITIATOR, b_to_a, a_to_b, tap_a, mangle)
    resp = LoopbackChannel(psk_responder or psk, session_id, RESPONDER, a_to_b, b_to_a, tap_b)
    return init, resp


def _recv_exact(sock, n):
    chunks, got = [], 0
    while got < n:
        try:
            chunk = sock.recv(n - got)
        except OSError as exc:
            raise TransportFailure(f"socket error: {exc}") from exc
        if not chunk:
            raise TransportFailure("peer closed the connection")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


class TcpChannel(Channel):
    def __init__(self, sock, psk, session_id, role, tap=None):
        super().__init__(psk, session_id, role, tap)
        self.sock = sock

    def _send_frame(self, frame):
        try:
            self.sock.sendall(frame)
        except OSError as exc:
            raise TransportFailure(f"socket error: {exc}") from exc

    def _recv_frame(self):
        header = _recv_exact(self.sock, Frame.HEADER.size)
        _, length = Frame.HEADER.unpack(header)
        if length > MAX_FRAME:
            raise TransportFailure("frame too large")
        return header + _recv_exact(self.sock, length)

    def close(self):
        if not self.closed:
            self.closed = True
            try:
                self.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self.sock.close()


def _handshake_socket(sock, psk, role, session_id, tap):
    # the initiator names the session in clear; keys depend on it
    if role == INITIATOR:
        session_id = new_session_id() if session_id is None else session_id
        sock.sendall(PREAMBLE.pack(PREAMBLE_MAGIC, WIRE_VERSION, session_id))
    else:
        magic, version, session_id = PREAMBLE.unpack(_recv_exact(sock, PREAMBLE.size))
        if magic != PREAMBLE_MAGIC or version != WIRE_VERSION:
            sock.close()
            raise TransportFailure("peer did not send a valid preamble")
    return TcpChannel(sock, psk, session_id, role, tap)


def parse_address(address: str):
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {address!r}")
    return host, int(port)


def open_channel(endpoint, psk: bytes, role: str, *, listen=False, timeout=30.0,
                 session_id=None, tap=None, ready=None) -> Channel:
    """Open a TCP channel.

    With ``listen=True`` the call binds ``endpoint`` and waits for a single
    peer; otherwise it connects to it.  ``ready`` (optional callable) receives
    the bound port once listening.
    """
    if len(psk) != PSK_BYTES:
        raise ValueError(f"psk must be exactly {PSK_BYTES} bytes")
    host, port = parse_address(endpoint) if isinstance(endpoint, str) else endpoint
    if listen:
        with socket.create_server((host, port)) as server:
            server.settimeout(timeout)
            if ready is not None:
                ready(server.getsockname()[1])
            try:
                sock, _ = server.accept()
            except OSError as exc:
                raise ConnectFailure(f"no peer connected: {exc}") from exc
    else:
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise ConnectFailure(f"cannot reach {host}:{port}: {exc}") from exc
    sock.settimeout(None)
    return _handshake_socket(sock, psk, role, session_id, tap)
