"""Reliable, ordered byte-stream transports between the two parties.

Authentication of the classical channel is assumed ideal and out of scope:
these transports deliver bytes, they do not protect them.
"""
from __future__ import annotations

import queue
import socket
from dataclasses import dataclass, field

from .messages import HEADER, Message, decode_payload, read_header, serialize_message


class TransportError(RuntimeError):
    """The byte stream failed (closed, timed out or refused)."""


class Transport:
    """Byte stream with message framing on top of ``write``/``read_exact``."""

    def write(self, data: bytes) -> None:
        raise NotImplementedError

    def read_exact(self, n: int) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def send(self, msg: Message) -> bytes:
        frame = serialize_message(msg)
        self.write(frame)
        return frame

    def recv(self) -> tuple[Message, bytes]:
        """Next message and its raw frame bytes."""
        header = self.read_exact(HEADER.size)
        cls, length = read_header(header)
        payload = self.read_exact(length) if length else b""
        return decode_payload(cls, payload), header + payload


class _PipeEnd(Transport):
    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, timeout: float | None):
        self._in = inbox
        self._out = outbox
        self._buf = bytearray()
        self._closed = False
        self.timeout = timeout

    def write(self, data: bytes) -> None:
        if self._closed:
            raise TransportError("pipe closed")
        self._out.put(bytes(data))

    def read_exact(self, n: int) -> bytes:
        while len(self._buf) < n:
            try:
                chunk = self._in.get(timeout=self.timeout)
            except queue.Empty:
                raise TransportError("timed out waiting for peer") from None
            if chunk is None:
                raise TransportError("peer closed the pipe")
            self._buf += chunk
        out = bytes(self._buf[:n])
        del self._buf[:n]
        return out

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._out.put(None)


def memory_pipe(timeout: float | None = 60.0) -> tuple[Transport, Transport]:
    """Two connected in-memory endpoints (for threads in one process)."""
    a_to_b: queue.Queue = queue.Queue()
    b_to_a: queue.Queue = queue.Queue()
    return _PipeEnd(b_to_a, a_to_b, timeout), _PipeEnd(a_to_b, b_to_a, timeout)


class SocketTransport(Transport):
    """Framed stream over a connected TCP socket."""

    def __init__(self, sock: socket.socket, timeout: float | None = 60.0):
        self.sock = sock
        sock.settimeout(timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    @classmethod
    def connect(cls, host: str, port: int, timeout: float | None = 60.0) -> SocketTransport:
        try:
            return cls(socket.create_connection((host, port), timeout=timeout), timeout)
        except OSError as exc:
            raise TransportError(f"cannot connect to {host}:{port}: {exc}") from exc

    def write(self, data: bytes) -> None:
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise TransportError(str(exc)) from exc

    def read_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self.sock.recv(min(n - len(buf), 1 << 20))
            except OSError as exc:
                raise TransportError(str(exc)) from exc
            if not chunk:
                raise TransportError("peer closed the connection")
            buf += chunk
        return bytes(buf)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


def listen(host: str = "127.0.0.1", port: int = 0) -> socket.socket:
    """Listening socket on localhost; port 0 picks a free one."""
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen(1)
    return srv


@dataclass
class TranscriptEntry:
    direction: str          # "sent" or "received", from the recording party's side
    frame: bytes

    @property
    def tag(self) -> int:
        return self.frame[0]


@dataclass
class RecordingTransport(Transport):
    """Wraps a transport and logs every frame it carries."""

    inner: Transport
    log: list[TranscriptEntry] = field(default_factory=list)

    def write(self, data: bytes) -> None:
        self.inner.write(data)

    def read_exact(self, n: int) -> bytes:
        return self.inner.read_exact(n)

    def send(self, msg: Message) -> bytes:
        frame = self.inner.send(msg)
        self.log.append(TranscriptEntry("sent", frame))
        return frame

    def recv(self) -> tuple[Message, bytes]:
        msg, frame = self.inner.recv()
        self.log.append(TranscriptEntry("received", frame))
        return msg, frame

    def close(self) -> None:
        self.inner.close()


class ReplayMismatch(AssertionError):
    """A replayed party sent something other than the recorded frame."""


class ReplayTransport(Transport):
    """Plays back a recorded log to one party and checks what it sends.

    ``log`` is the recording party's own view (its "sent" and "received"
    entries); the party under replay must produce the identical sequence.
    """

    def __init__(self, log: list[TranscriptEntry]):
        self._log = list(log)
        self._pos = 0

    def _next(self, direction: str) -> bytes:
        if self._pos >= len(self._log):
            raise TransportError("transcript exhausted")
        entry = self._log[self._pos]
        if entry.direction != direction:
            raise ReplayMismatch(f"step {self._pos}: transcript holds a {entry.direction} "
                                 f"frame, party produced a {direction} one")
        self._pos += 1
        return entry.frame

    def send(self, msg: Message) -> bytes:
        frame = serialize_message(msg)
        expected = self._next("sent")
        if frame != expected:
            raise ReplayMismatch(f"step {self._pos - 1}: frame differs from transcript")
        return frame

    def recv(self) -> tuple[Message, bytes]:
        frame = self._next("received")
        cls, length = read_header(frame[:HEADER.size])
        return decode_payload(cls, frame[HEADER.size:]), frame

    @property
    def exhausted(self) -> bool:
        return self._pos == len(self._log)


__all__ = [
    "TransportError", "Transport", "memory_pipe", "SocketTransport", "listen",
    "TranscriptEntry", "RecordingTransport", "ReplayMismatch", "ReplayTransport",
]
