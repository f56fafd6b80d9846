"""Wire format of the classical post-processing channel.

A frame is ``u8 tag | u32 payload length | payload``, little-endian. Bit
strings travel as ``u32 bit count`` followed by packed bytes (big-endian
within each byte, zero padding). Slot indices travel as ``u32 count``
followed by ``u64`` values. Decoding is strict: every field must be
canonical, so ``parse(serialize(m)) == m`` and ``serialize(parse(b)) == b``
for every accepted frame.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, fields

import numpy as np

PROTOCOL_VERSION = 1
HEADER = struct.Struct("<BI")
MAX_PAYLOAD = 1 << 30

_I64_MAX = np.iinfo(np.int64).max


class CodecError(ValueError):
    """Base class for every rejected frame."""


class TruncatedFrame(CodecError):
    pass


class UnknownTag(CodecError):
    pass


class LengthOverflow(CodecError):
    pass


class MalformedPayload(CodecError):
    pass


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if n < 0 or self.pos + n > len(self.data):
            raise MalformedPayload("payload shorter than its fields")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))

    def u8(self) -> int:
        return self.unpack("B")[0]

    def u32(self) -> int:
        return self.unpack("I")[0]

    def u64(self) -> int:
        return self.unpack("Q")[0]

    def bits(self) -> np.ndarray:
        nbits = self.u32()
        raw = np.frombuffer(self.take((nbits + 7) // 8), dtype=np.uint8)
        out = np.unpackbits(raw, bitorder="big")
        if out[nbits:].any():
            raise MalformedPayload("non-zero padding in bit field")
        return out[:nbits].copy()

    def slots(self) -> np.ndarray:
        count = self.u32()
        raw = np.frombuffer(self.take(8 * count), dtype="<u8")
        if count and raw.max() > _I64_MAX:
            raise MalformedPayload("slot index out of range")
        return raw.astype(np.int64)

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise MalformedPayload("trailing bytes in payload")


def _bits(arr) -> bytes:
    arr = np.asarray(arr, dtype=np.uint8)
    return struct.pack("<I", arr.size) + np.packbits(arr, bitorder="big").tobytes()


def _slots(arr) -> bytes:
    arr = np.asarray(arr, dtype=np.int64)
    return struct.pack("<I", arr.size) + arr.astype("<u8").tobytes()


def _u01(arr, label: str) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.uint8).reshape(-1)
    if arr.size and arr.max() > 1:
        raise ValueError(f"{label} must hold 0/1 values")
    return arr


class Message:
    """Base of all frames; subclasses are dataclasses with a class-level TAG."""

    TAG = 0

    def payload(self) -> bytes:
        raise NotImplementedError

    @classmethod
    def decode(cls, r: _Reader) -> Message:
        raise NotImplementedError

    def __eq__(self, other) -> bool:
        if type(self) is not type(other):
            return NotImplemented
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
                if not np.array_equal(a, b):
                    return False
            elif a != b:
                return False
        return True

    __hash__ = None


@dataclass(eq=False)
class Hello(Message):
    """Alice opens the session; the seed is surfaced here for reproducibility."""

    TAG = 1
    version: int
    seed: int
    n_pulses: int
    fingerprint: int

    def payload(self) -> bytes:
        return struct.pack("<BQQQ", self.version, self.seed, self.n_pulses, self.fingerprint)

    @classmethod
    def decode(cls, r):
        return cls(*r.unpack("BQQQ"))


@dataclass(eq=False)
class Detections(Message):
    """Bob's detected slots and the detector (basis) that clicked."""

    TAG = 2
    slots: np.ndarray
    bases: np.ndarray

    def __post_init__(self):
        self.slots = np.ascontiguousarray(self.slots, dtype=np.int64)
        self.bases = _u01(self.bases, "bases")
        if self.slots.size != self.bases.size:
            raise ValueError("one basis per slot")

    def payload(self) -> bytes:
        return _slots(self.slots) + _bits(self.bases)

    @classmethod
    def decode(cls, r):
        slots, bases = r.slots(), r.bits()
        if slots.size != bases.size:
            raise MalformedPayload("slot and basis counts differ")
        return cls(slots, bases)


@dataclass(eq=False)
class BasisInfo(Message):
    """Alice's basis and intensity for every reported slot; bits withheld."""

    TAG = 3
    bases: np.ndarray
    intensities: np.ndarray

    def __post_init__(self):
        self.bases = _u01(self.bases, "bases")
        self.intensities = _u01(self.intensities, "intensities")
        if self.bases.size != self.intensities.size:
            raise ValueError("one intensity per basis")

    def payload(self) -> bytes:
        return _bits(self.bases) + _bits(self.intensities)

    @classmethod
    def decode(cls, r):
        bases, ints = r.bits(), r.bits()
        if bases.size != ints.size:
            raise MalformedPayload("basis and intensity counts differ")
        return cls(bases, ints)


@dataclass(eq=False)
class XReport(Message):
    """Error tallies per intensity and the monitored-port flags of X-X slots."""

    TAG = 4
    errors_mu1: int
    errors_mu2: int
    outcomes: np.ndarray

    def __post_init__(self):
        self.outcomes = _u01(self.outcomes, "outcomes")

    def payload(self) -> bytes:
        return struct.pack("<II", self.errors_mu1, self.errors_mu2) + _bits(self.outcomes)

    @classmethod
    def decode(cls, r):
        e1, e2 = r.unpack("II")
        return cls(e1, e2, r.bits())


@dataclass(eq=False)
class ZSample(Message):
    """Bob's bits on the randomly sampled Z positions (seed fixes the positions)."""

    TAG = 5
    seed: int
    bits: np.ndarray

    def __post_init__(self):
        self.bits = _u01(self.bits, "bits")

    def payload(self) -> bytes:
        return struct.pack("<Q", self.seed) + _bits(self.bits)

    @classmethod
    def decode(cls, r):
        return cls(r.u64(), r.bits())


@dataclass(eq=False)
class EcSyndrome(Message):
    """Alice's sample verdict and the reconciliation syndrome."""

    TAG = 6
    sample_errors: int
    seed: int
    syndrome: np.ndarray

    def __post_init__(self):
        self.syndrome = _u01(self.syndrome, "syndrome")

    def payload(self) -> bytes:
        return struct.pack("<IQ", self.sample_errors, self.seed) + _bits(self.syndrome)

    @classmethod
    def decode(cls, r):
        errors, seed = r.unpack("IQ")
        return cls(errors, seed, r.bits())


@dataclass(eq=False)
class EcConfirm(Message):
    """Bob's corrected-error counts per intensity on the key positions."""

    TAG = 7
    errors_mu1: int
    errors_mu2: int

    def payload(self) -> bytes:
        return struct.pack("<II", self.errors_mu1, self.errors_mu2)

    @classmethod
    def decode(cls, r):
        return cls(*r.unpack("II"))


@dataclass(eq=False)
class Tag(Message):
    """Universal-hash correctness tag of Alice's reconciled key."""

    TAG = 8
    seed: int
    tag: np.ndarray

    def __post_init__(self):
        self.tag = _u01(self.tag, "tag")

    def payload(self) -> bytes:
        return struct.pack("<Q", self.seed) + _bits(self.tag)

    @classmethod
    def decode(cls, r):
        return cls(r.u64(), r.bits())


@dataclass(eq=False)
class TagResult(Message):
    TAG = 9
    ok: bool

    def payload(self) -> bytes:
        return struct.pack("<B", int(self.ok))

    @classmethod
    def decode(cls, r):
        v = r.u8()
        if v > 1:
            raise MalformedPayload("tag verdict must be 0 or 1")
        return cls(bool(v))


@dataclass(eq=False)
class PaSeed(Message):
    """Final key length and the public Toeplitz seed."""

    TAG = 10
    key_length: int
    seed: int

    def payload(self) -> bytes:
        return struct.pack("<QQ", self.key_length, self.seed)

    @classmethod
    def decode(cls, r):
        return cls(*r.unpack("QQ"))


@dataclass(eq=False)
class Done(Message):
    TAG = 11

    def payload(self) -> bytes:
        return b""

    @classmethod
    def decode(cls, r):
        return cls()


@dataclass(eq=False)
class Abort(Message):
    """Machine-readable abort: ``code`` indexes :data:`ABORT_REASONS`."""

    TAG = 12
    code: int
    detail: str = ""

    def payload(self) -> bytes:
        return struct.pack("<B", self.code) + self.detail.encode("utf-8")

    @classmethod
    def decode(cls, r):
        code = r.u8()
        if code >= len(ABORT_REASONS):
            raise MalformedPayload(f"unknown abort code {code}")
        rest = bytes(r.take(len(r.data) - r.pos))
        try:
            detail = rest.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedPayload("abort detail is not UTF-8") from exc
        return cls(code, detail)

    @property
    def reason(self) -> str:
        return ABORT_REASONS[self.code]


ABORT_REASONS = ("correctness failure", "no extractable key", "channel")

MESSAGE_TYPES: dict[int, type[Message]] = {
    cls.TAG: cls for cls in (Hello, Detections, BasisInfo, XReport, ZSample, EcSyndrome,
                             EcConfirm, Tag, TagResult, PaSeed, Done, Abort)
}


def serialize_message(msg: Message) -> bytes:
    body = msg.payload()
    if len(body) > MAX_PAYLOAD:
        raise LengthOverflow(f"payload of {len(body)} bytes exceeds {MAX_PAYLOAD}")
    return HEADER.pack(msg.TAG, len(body)) + body


def read_header(header: bytes) -> tuple[type[Message], int]:
    """Validate a 5-byte header and return the message class and payload length."""
    if len(header) < HEADER.size:
        raise TruncatedFrame("frame shorter than its header")
    tag, length = HEADER.unpack(header[:HEADER.size])
    cls = MESSAGE_TYPES.get(tag)
    if cls is None:
        raise UnknownTag(f"unknown message tag {tag}")
    if length > MAX_PAYLOAD:
        raise LengthOverflow(f"declared payload of {length} bytes exceeds {MAX_PAYLOAD}")
    return cls, length


def decode_payload(cls: type[Message], payload: bytes) -> Message:
    r = _Reader(payload)
    try:
        msg = cls.decode(r)
    except ValueError as exc:
        if isinstance(exc, CodecError):
            raise
        raise MalformedPayload(str(exc)) from exc
    r.finish()
    return msg


def parse_frame(data: bytes, offset: int = 0) -> tuple[Message, int]:
    """Parse the frame starting at ``offset``; returns the message and the next offset."""
    cls, length = read_header(bytes(data[offset:offset + HEADER.size]))
    start = offset + HEADER.size
    if len(data) - start < length:
        raise TruncatedFrame(f"payload needs {length} bytes, {len(data) - start} present")
    return decode_payload(cls, bytes(data[start:start + length])), start + length


def parse_message(data: bytes) -> Message:
    """Parse exactly one frame; trailing bytes are an error."""
    msg, end = parse_frame(data)
    if end != len(data):
        raise MalformedPayload("bytes after the end of the frame")
    return msg


__all__ = [
    "PROTOCOL_VERSION", "MAX_PAYLOAD", "CodecError", "TruncatedFrame", "UnknownTag",
    "LengthOverflow", "MalformedPayload", "Message", "Hello", "Detections", "BasisInfo",
    "XReport", "ZSample", "EcSyndrome", "EcConfirm", "Tag", "TagResult", "PaSeed", "Done",
    "Abort", "ABORT_REASONS", "MESSAGE_TYPES", "serialize_message", "read_header",
    "decode_payload", "parse_frame", "parse_message",
]
