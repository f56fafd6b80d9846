"""Running, auditing and replaying sessions; key and transcript files."""
from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from ..channel import BlockUnreachable, plan_block, seeds_for
from ..finite_key import KeyLengthReport
from ..model import LinkModel, ProtocolConfig, validate
from .messages import EcSyndrome, Hello, Message, Tag, ZSample, parse_message
from .parties import (TRANSMISSION_STREAM, AbortReason, Alice, BlockPolicy, Bob,
                      OracleReconciler, SessionAbort)
from .records import transmit
from .transport import (RecordingTransport, ReplayTransport, SocketTransport, TranscriptEntry,
                        Transport, TransportError, listen, memory_pipe)

A_TO_B = "A->B"
B_TO_A = "B->A"

KEY_MAGIC = b"TBQK"
KEY_VERSION = 1
_KEY_HEADER = struct.Struct("<4sHHQ")       # magic, version, reserved, length in bits

TRANSCRIPT_MAGIC = b"TBQT"
_TRANSCRIPT_HEADER = struct.Struct("<4sHH")  # magic, version, reserved


@dataclass
class SessionTranscript:
    """Ordered frames of one session, directions seen from Alice."""

    entries: list[tuple[str, bytes]] = field(default_factory=list)

    @classmethod
    def from_log(cls, log: list[TranscriptEntry]) -> SessionTranscript:
        return cls([(A_TO_B if e.direction == "sent" else B_TO_A, e.frame) for e in log])

    def party_log(self, party: str) -> list[TranscriptEntry]:
        """The transcript as one party's own sent/received log."""
        mine = A_TO_B if party == "alice" else B_TO_A
        return [TranscriptEntry("sent" if d == mine else "received", f) for d, f in self.entries]

    def messages(self) -> list[tuple[str, Message]]:
        return [(d, parse_message(f)) for d, f in self.entries]

    def to_bytes(self) -> bytes:
        out = [_TRANSCRIPT_HEADER.pack(TRANSCRIPT_MAGIC, 1, 0)]
        for d, f in self.entries:
            out.append(struct.pack("<B", 0 if d == A_TO_B else 1) + f)
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> SessionTranscript:
        from .messages import parse_frame
        magic, version, _ = _TRANSCRIPT_HEADER.unpack_from(data)
        if magic != TRANSCRIPT_MAGIC or version != 1:
            raise ValueError("not a version-1 session transcript")
        pos, entries = _TRANSCRIPT_HEADER.size, []
        while pos < len(data):
            d = data[pos]
            if d > 1:
                raise ValueError(f"bad direction byte at offset {pos}")
            _, end = parse_frame(data, pos + 1)
            entries.append((A_TO_B if d == 0 else B_TO_A, bytes(data[pos + 1:end])))
            pos = end
        return cls(entries)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class SessionResult:
    """Outcome of one session. Keys are None when the session aborted."""

    alice_key: np.ndarray | None
    bob_key: np.ndarray | None
    report: KeyLengthReport | None
    bob_report: KeyLengthReport | None
    transcript: SessionTranscript
    n_pulses: int
    sample_size: int = 0
    lambda_ec: int = 0
    tag_bits: int = 0
    abort_reason: str | None = None
    abort_detail: str = ""

    @property
    def aborted(self) -> bool:
        return self.abort_reason is not None

    @property
    def key_length(self) -> int:
        return 0 if self.alice_key is None else int(self.alice_key.size)


@dataclass(frozen=True)
class Audit:
    """Bits a session put on the wire that carry key information."""

    sample_bits: int
    syndrome_bits: int
    tag_bits: int

    @property
    def disclosed(self) -> int:
        return self.sample_bits + self.syndrome_bits + self.tag_bits


def audit_transcript(transcript: SessionTranscript) -> Audit:
    """Count disclosed sample, syndrome and tag bits.

    No other message type carries Z key bits: the report and the basis
    information hold bases and intensities, the X report holds X-basis flags.
    """
    sample = syndrome = tag = 0
    for _, msg in transcript.messages():
        if isinstance(msg, ZSample):
            sample += msg.bits.size
        elif isinstance(msg, EcSyndrome):
            syndrome += msg.syndrome.size
        elif isinstance(msg, Tag):
            tag += msg.tag.size
    return Audit(sample, syndrome, tag)


def _run_pair(alice: Alice, bob: Bob, ta: Transport, tb: Transport) -> None:
    def bob_main():
        try:
            bob.run(tb)
        except SessionAbort:
            pass
        finally:
            tb.close()

    t = threading.Thread(target=bob_main, name="bob", daemon=True)
    t.start()
    try:
        alice.run(ta)
    except SessionAbort:
        pass
    finally:
        ta.close()
    t.join()


def _result(alice: Alice, bob: Bob, log: list[TranscriptEntry], n_pulses: int,
            tag_bits: int) -> SessionResult:
    abort = alice.abort or bob.abort
    return SessionResult(
        alice_key=None if abort else alice.key, bob_key=None if abort else bob.key,
        report=alice.report, bob_report=bob.report,
        transcript=SessionTranscript.from_log(log), n_pulses=n_pulses,
        sample_size=alice.sample_size, lambda_ec=alice.lambda_ec, tag_bits=tag_bits,
        abort_reason=abort.reason.text if abort else None,
        abort_detail=abort.detail if abort else "")


def plan_session(config: ProtocolConfig, link: LinkModel, policy: BlockPolicy) -> int:
    """Pulses sent in one session so that about ``policy.block_size`` Z-Z events occur."""
    return plan_block(replace(config, block_size=policy.block_size), link,
                      max_pulses=policy.max_pulses)


def run_session(config: ProtocolConfig, link: LinkModel, policy: BlockPolicy | None = None,
                transport: str = "memory", seed: int = 0, *,
                tamper: Callable[[np.ndarray], np.ndarray] | None = None,
                timeout: float = 120.0) -> SessionResult:
    """Run Alice and Bob against each other for one block.

    Both parties run in this process: Alice in the calling thread, Bob in a
    worker thread, joined by an in-memory pipe (``transport="memory"``) or a
    localhost TCP connection (``"tcp"``). Authentication of the classical
    channel is assumed ideal.

    Args:
        tamper: Optional hook applied to Bob's reconciled key just before the
            correctness check (for tests of the tag).
    """
    validate(config, link)
    policy = policy or BlockPolicy()
    tag_bits = policy.tag_len(config)
    try:
        n_pulses = plan_session(config, link, policy)
    except BlockUnreachable as exc:
        return SessionResult(None, None, None, None, SessionTranscript(), 0, tag_bits=tag_bits,
                             abort_reason=AbortReason.NO_KEY.text, abort_detail=str(exc))
    trans = transmit(config, link, n_pulses, seeds_for(seed, TRANSMISSION_STREAM))
    alice = Alice(config, link, policy, seed, n_pulses, records=trans.alice)
    bob = Bob(config, link, policy, records=trans.bob,
              reconciler=OracleReconciler(trans.alice), tamper=tamper)

    if transport == "memory":
        ta, tb = memory_pipe(timeout)
    elif transport == "tcp":
        srv = listen()
        try:
            port = srv.getsockname()[1]
            tb = SocketTransport.connect("127.0.0.1", port, timeout)
            conn, _ = srv.accept()
            ta = SocketTransport(conn, timeout)
        finally:
            srv.close()
    else:
        raise ValueError(f"unknown transport {transport!r}")
    rec = RecordingTransport(ta)
    _run_pair(alice, bob, rec, tb)
    return _result(alice, bob, rec.log, n_pulses, tag_bits)


def serve_bob(config: ProtocolConfig, link: LinkModel, policy: BlockPolicy, host: str,
              port: int, timeout: float = 120.0) -> Bob:
    """Bob in his own process: connect to Alice, regenerate his detections, run.

    Bob learns the session seed from Alice's Hello and rebuilds his detection
    record (and the modeled reconciliation oracle) from it.
    """
    bob = Bob(config, link, policy)
    t = SocketTransport.connect(host, port, timeout)
    try:
        bob.run(t)
    except SessionAbort:
        pass
    finally:
        t.close()
    return bob


def serve_alice(config: ProtocolConfig, link: LinkModel, policy: BlockPolicy, seed: int,
                server, timeout: float = 120.0) -> tuple[Alice, list[TranscriptEntry], int]:
    """Alice on an already listening socket; returns the party, her log and the pulse count."""
    n_pulses = plan_session(config, link, policy)
    alice = Alice(config, link, policy, seed, n_pulses)
    try:
        conn, _ = server.accept()
    except OSError as exc:
        raise TransportError(f"no connection from Bob: {exc}") from exc
    rec = RecordingTransport(SocketTransport(conn, timeout))
    try:
        alice.run(rec)
    except SessionAbort:
        pass
    finally:
        rec.close()
    return alice, rec.log, n_pulses


def replay_session(transcript: SessionTranscript, config: ProtocolConfig, link: LinkModel,
                   policy: BlockPolicy | None = None) -> tuple[Alice, Bob]:
    """Re-run both parties against a recorded transcript.

    Each party receives the recorded frames of its peer and must emit
    exactly the recorded frames of its own; any divergence raises
    :class:`~tbqkd.session.transport.ReplayMismatch`. The returned parties
    hold the final keys and reports.
    """
    policy = policy or BlockPolicy()
    if not transcript.entries:
        raise ValueError("empty transcript")
    hello = parse_message(transcript.entries[0][1])
    if not isinstance(hello, Hello):
        raise ValueError("transcript does not start with Hello")
    alice = Alice(config, link, policy, hello.seed, hello.n_pulses)
    bob = Bob(config, link, policy)
    for party, name in ((alice, "alice"), (bob, "bob")):
        rt = ReplayTransport(transcript.party_log(name))
        try:
            party.run(rt)
        except SessionAbort:
            pass
    return alice, bob


def write_key(path: str | Path, bits: np.ndarray) -> None:
    """Binary key file: 16-byte header (magic, version, reserved, bit count) + packed bits."""
    bits = np.asarray(bits, dtype=np.uint8)
    Path(path).write_bytes(_KEY_HEADER.pack(KEY_MAGIC, KEY_VERSION, 0, bits.size)
                           + np.packbits(bits, bitorder="big").tobytes())


def read_key(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _KEY_HEADER.size:
        raise ValueError("key file shorter than its header")
    magic, version, _, nbits = _KEY_HEADER.unpack_from(data)
    if magic != KEY_MAGIC or version != KEY_VERSION:
        raise ValueError("not a version-1 key file")
    body = np.frombuffer(data[_KEY_HEADER.size:], dtype=np.uint8)
    if body.size != (nbits + 7) // 8:
        raise ValueError("key file length does not match its header")
    return np.unpackbits(body, bitorder="big")[:nbits].copy()


__all__ = [
    "SessionTranscript", "SessionResult", "Audit", "audit_transcript", "plan_session",
    "run_session", "serve_alice", "serve_bob", "replay_session", "write_key", "read_key",
    "KEY_MAGIC", "KEY_VERSION",
]
