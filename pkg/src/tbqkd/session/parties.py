"""Alice and Bob post-processing state machines.

Each party is single-threaded and deterministic given its seed and the
messages it receives; it talks to its peer only through a
:class:`~tbqkd.session.transport.Transport`. The classical channel is
assumed authenticated (ideal authentication is out of scope here), so the
security of the final key rests on the finite-key bound and the
correctness tag, not on the transport.

Message flow (A = Alice, B = Bob)::

    A -> B  Hello          version, seed, pulses sent, config fingerprint
    B -> A  Detections     detected slots and the detector that clicked
    A -> B  BasisInfo      basis and intensity per reported slot
    B -> A  XReport        X-X outcomes and error tallies
    B -> A  ZSample        Bob's bits on a random sample of Z-Z slots
    A -> B  EcSyndrome     sample errors and lambda_EC syndrome bits
    B -> A  EcConfirm      corrected errors per intensity
    A -> B  Tag            correctness tag of Alice's key
    B -> A  TagResult
    A -> B  PaSeed         final length and privacy-amplification seed
    B -> A  Done

Either side may send ``Abort`` instead of its next message.
"""
from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..channel import X, Z, BlockCounts, seeds_for
from ..finite_key import KeyLengthReport, binary_entropy, secret_key_length
from ..hashing import seeded_hash
from ..model import LinkModel, ProtocolConfig, config_to_dict
from .messages import (ABORT_REASONS, PROTOCOL_VERSION, Abort, BasisInfo, CodecError,
                       Detections, Done, EcConfirm, EcSyndrome, Hello, Message, PaSeed,
                       Tag, TagResult, XReport, ZSample)
from .records import DetectionRecords, ProtocolError, PulseRecords, lookup, sift, transmit
from .transport import Transport, TransportError

# Seed-tree branches under the session seed.
TRANSMISSION_STREAM = 0
ALICE_STREAM = 1
BOB_STREAM = 2

_U64 = 1 << 64


class AbortReason(enum.IntEnum):
    CORRECTNESS = 0
    NO_KEY = 1
    CHANNEL = 2

    @property
    def text(self) -> str:
        return ABORT_REASONS[self.value]


class SessionAbort(RuntimeError):
    """The session ended without a key; ``reason`` is one of :data:`ABORT_REASONS`."""

    def __init__(self, reason: AbortReason, detail: str = ""):
        super().__init__(f"{reason.text}: {detail}" if detail else reason.text)
        self.reason = reason
        self.detail = detail


def tag_length(eps_cor: float) -> int:
    """Correctness tag length ceil(log2(2/eps_cor)); collisions occur with probability 2^-len."""
    return int(math.ceil(math.log2(2.0 / eps_cor)))


@dataclass(frozen=True)
class BlockPolicy:
    """How much is sent per session and how the key is checked.

    Attributes:
        block_size: Target sifted Z detections per session.
        sample_fraction: Share of sifted Z slots disclosed to estimate qber_z.
        tag_bits: Correctness tag length; None means ceil(log2(2/eps_cor)).
        max_pulses: Largest block, in pulses, the session will attempt.
    """

    block_size: int = 200_000
    sample_fraction: float = 0.02
    tag_bits: int | None = None
    max_pulses: int = 10**13

    def __post_init__(self):
        if self.block_size < 1:
            raise ValueError("block_size must be at least 1")
        if not 0.0 <= self.sample_fraction < 1.0:
            raise ValueError("sample_fraction must lie in [0, 1)")
        if self.tag_bits is not None and not 1 <= self.tag_bits <= 1024:
            raise ValueError("tag_bits must lie in [1, 1024]")

    def tag_len(self, config: ProtocolConfig) -> int:
        return tag_length(config.eps_cor) if self.tag_bits is None else self.tag_bits


def fingerprint(config: ProtocolConfig, link: LinkModel) -> int:
    """64-bit digest of the shared configuration, checked in the Hello exchange."""
    blob = json.dumps(config_to_dict(config, link), sort_keys=True).encode()
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little")


def sample_positions(n: int, fraction: float, seed: int) -> np.ndarray:
    """Sorted positions (among ``n`` sifted Z slots) disclosed for estimation."""
    if n == 0 or fraction == 0.0:
        return np.zeros(0, dtype=np.int64)
    k = min(n, int(math.ceil(fraction * n)))
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=k, replace=False)).astype(np.int64)


def leakage_bits(n_key: int, sample_errors: int, sample_size: int, f_ec: float) -> int:
    """Syndrome length ceil(f_ec * n_key * h(q)) from the sampled qber, at most n_key."""
    if n_key == 0:
        return 0
    q = sample_errors / sample_size if sample_size else 0.0
    if q >= 0.5:
        return n_key
    return min(n_key, int(math.ceil(f_ec * n_key * binary_entropy(q))))


class Reconciler:
    """Error-reconciliation interface used by Bob.

    ``reconcile`` receives Bob's raw key bits, their slot indices and Alice's
    syndrome and returns the corrected key.
    """

    def reconcile(self, bits: np.ndarray, slots: np.ndarray, syndrome: EcSyndrome) -> np.ndarray:
        raise NotImplementedError


class OracleReconciler(Reconciler):
    """Modeled reconciliation: returns Alice's bits from the simulator.

    The leakage is still charged (the syndrome is real and goes on the
    transcript) and the correctness tag still guards the result, but no
    decoder runs. The oracle checks that the syndrome is Alice's.
    """

    def __init__(self, alice: PulseRecords):
        self._alice = alice

    def reconcile(self, bits, slots, syndrome):
        corrected = self._alice.bit[lookup(self._alice, slots)].copy()
        if syndrome.syndrome.size:
            expect = seeded_hash(corrected, syndrome.seed, syndrome.syndrome.size)
            if not np.array_equal(expect, syndrome.syndrome):
                raise ProtocolError("syndrome does not match the reconciled key")
        return corrected


def session_counts(intensities_z: np.ndarray, intensities_x: np.ndarray,
                   key_mask: np.ndarray, z_errors: tuple[int, int], x_flags: np.ndarray,
                   raw: tuple[int, int], n_pulses: int, config: ProtocolConfig) -> BlockCounts:
    """Public block statistics both parties can compute after reconciliation.

    Z counts cover only the key positions (the disclosed sample is excluded).
    """
    iz = intensities_z[key_mask]
    ix = intensities_x
    return BlockCounts(
        n_z_mu1=int(np.count_nonzero(iz == 0)), n_z_mu2=int(np.count_nonzero(iz == 1)),
        m_z_mu1=int(z_errors[0]), m_z_mu2=int(z_errors[1]),
        n_x_mu1=int(np.count_nonzero(ix == 0)), n_x_mu2=int(np.count_nonzero(ix == 1)),
        m_x_mu1=int(np.count_nonzero(x_flags[ix == 0])),
        m_x_mu2=int(np.count_nonzero(x_flags[ix == 1])),
        pulses_sent_per_cell=(0, 0, 0, 0),
        elapsed_time=n_pulses / config.pulse_rate,
        raw_z=int(raw[0]), raw_x=int(raw[1]))


class _Party:
    """Shared plumbing: typed receive, abort handling, state tracking."""

    name = "party"

    def __init__(self, config: ProtocolConfig, link: LinkModel, policy: BlockPolicy):
        self.config = config
        self.link = link
        self.policy = policy
        self.state = "init"
        self.key: np.ndarray | None = None
        self.report: KeyLengthReport | None = None
        self.abort: SessionAbort | None = None
        self.transport: Transport | None = None

    def _expect(self, cls: type[Message]) -> Message:
        msg, _ = self.transport.recv()
        if isinstance(msg, Abort):
            raise SessionAbort(AbortReason(msg.code), f"peer aborted: {msg.detail}")
        if not isinstance(msg, cls):
            raise ProtocolError(f"{self.name} expected {cls.__name__} in state "
                                f"{self.state!r}, got {type(msg).__name__}")
        return msg

    def _abort(self, reason: AbortReason, detail: str) -> SessionAbort:
        try:
            self.transport.send(Abort(int(reason), detail))
        except (TransportError, OSError):
            pass
        return SessionAbort(reason, detail)

    def run(self, transport: Transport) -> np.ndarray:
        """Run the protocol to completion; returns the final key or raises SessionAbort."""
        self.transport = transport
        try:
            self._run()
        except SessionAbort as exc:
            self.abort = exc
        except (ProtocolError, CodecError) as exc:
            self.abort = self._abort(AbortReason.CHANNEL, str(exc))
        except TransportError as exc:
            self.abort = SessionAbort(AbortReason.CHANNEL, str(exc))
        finally:
            self.state = "aborted" if self.abort else "done"
        if self.abort:
            raise self.abort
        return self.key

    def _run(self) -> None:
        raise NotImplementedError


class Alice(_Party):
    """Sender: prepares the pulses, answers Bob's report and drives the key steps."""

    name = "Alice"

    def __init__(self, config: ProtocolConfig, link: LinkModel, policy: BlockPolicy,
                 seed: int, n_pulses: int, records: PulseRecords | None = None):
        super().__init__(config, link, policy)
        self.seed = seed
        self.n_pulses = n_pulses
        self._records = records
        self.sample_size = 0
        self.lambda_ec = 0

    def _run(self) -> None:
        cfg, pol = self.config, self.policy
        rng = seeds_for(self.seed, ALICE_STREAM)
        if self._records is None:
            self._records = transmit(cfg, self.link, self.n_pulses,
                                     seeds_for(self.seed, TRANSMISSION_STREAM)).alice
        rec = self._records

        self.state = "hello"
        self.transport.send(Hello(PROTOCOL_VERSION, self.seed, self.n_pulses,
                                  fingerprint(cfg, self.link)))

        self.state = "await detections"
        det = self._expect(Detections)
        pos = lookup(rec, det.slots)
        sub = PulseRecords(det.slots, rec.basis[pos], rec.bit[pos], rec.intensity[pos])
        sifted = sift(sub, det.slots, det.bases)
        raw = (int(np.count_nonzero(det.bases == Z)), int(np.count_nonzero(det.bases == X)))
        self.transport.send(BasisInfo(sub.basis, sub.intensity))

        self.state = "await x report"
        xr = self._expect(XReport)
        if xr.outcomes.size != sifted.x_slots.size:
            raise ProtocolError("X report length differs from the sifted X slots")
        ix = sub.intensity[sifted.alice_x]
        tallies = (int(np.count_nonzero(xr.outcomes[ix == 0])),
                   int(np.count_nonzero(xr.outcomes[ix == 1])))
        if tallies != (xr.errors_mu1, xr.errors_mu2):
            raise ProtocolError("X error tallies disagree with the reported outcomes")

        self.state = "await sample"
        zs = self._expect(ZSample)
        bits = sub.bit[sifted.alice_z]
        n_z = bits.size
        sample = sample_positions(n_z, pol.sample_fraction, zs.seed)
        if zs.bits.size != sample.size:
            raise ProtocolError("sample length differs from the agreed sample")
        sample_errors = int(np.count_nonzero(zs.bits != bits[sample]))
        key_mask = np.ones(n_z, dtype=bool)
        key_mask[sample] = False
        key = bits[key_mask]
        self.sample_size = int(sample.size)

        self.state = "reconcile"
        lam = leakage_bits(key.size, sample_errors, sample.size, cfg.f_ec)
        self.lambda_ec = lam
        syn_seed = int(rng.integers(0, _U64, dtype=np.uint64))
        syndrome = seeded_hash(key, syn_seed, lam)
        self.transport.send(EcSyndrome(sample_errors, syn_seed, syndrome))
        conf = self._expect(EcConfirm)
        counts = session_counts(sub.intensity[sifted.alice_z], ix, key_mask,
                                (conf.errors_mu1, conf.errors_mu2), xr.outcomes, raw,
                                self.n_pulses, cfg)
        self.report = secret_key_length(counts, cfg, lambda_ec=lam)
        if self.report.key_length == 0:
            raise self._abort(AbortReason.NO_KEY, self.report.reason)

        self.state = "verify"
        tag_seed = int(rng.integers(0, _U64, dtype=np.uint64))
        tag_bits = min(pol.tag_len(cfg), key.size)
        self.transport.send(Tag(tag_seed, seeded_hash(key, tag_seed, tag_bits)))
        verdict = self._expect(TagResult)
        if not verdict.ok:
            raise SessionAbort(AbortReason.CORRECTNESS, "tag mismatch reported by Bob")

        self.state = "amplify"
        pa_seed = int(rng.integers(0, _U64, dtype=np.uint64))
        ell = self.report.key_length
        self.transport.send(PaSeed(ell, pa_seed))
        self.key = seeded_hash(key, pa_seed, ell)
        self._expect(Done)


class Bob(_Party):
    """Receiver: reports detections, discloses the sample and reconciles."""

    name = "Bob"

    def __init__(self, config: ProtocolConfig, link: LinkModel, policy: BlockPolicy,
                 records: DetectionRecords | None = None, reconciler: Reconciler | None = None,
                 tamper: Callable[[np.ndarray], np.ndarray] | None = None):
        super().__init__(config, link, policy)
        self._records = records
        self.reconciler = reconciler
        self.tamper = tamper

    def _run(self) -> None:
        cfg, pol = self.config, self.policy
        self.state = "await hello"
        hello = self._expect(Hello)
        if hello.version != PROTOCOL_VERSION:
            raise ProtocolError(f"unsupported protocol version {hello.version}")
        if hello.fingerprint != fingerprint(cfg, self.link):
            raise ProtocolError("configuration fingerprint mismatch")
        if self._records is None or self.reconciler is None:
            trans = transmit(cfg, self.link, hello.n_pulses,
                             seeds_for(hello.seed, TRANSMISSION_STREAM))
            if self._records is None:
                self._records = trans.bob
            if self.reconciler is None:
                self.reconciler = OracleReconciler(trans.alice)
        rec = self._records
        rng = seeds_for(hello.seed, BOB_STREAM)

        self.state = "report"
        self.transport.send(Detections(rec.slot, rec.basis))
        info = self._expect(BasisInfo)
        if info.bases.size != len(rec):
            raise ProtocolError("basis information length differs from the report")
        alice_view = PulseRecords(rec.slot, info.bases, np.zeros(len(rec)), info.intensities)
        sifted = sift(alice_view, rec.slot, rec.basis)
        raw = (int(np.count_nonzero(rec.basis == Z)), int(np.count_nonzero(rec.basis == X)))

        flags = rec.outcome[sifted.bob_x]
        ix = info.intensities[sifted.bob_x]
        self.transport.send(XReport(int(np.count_nonzero(flags[ix == 0])),
                                    int(np.count_nonzero(flags[ix == 1])), flags))

        self.state = "sample"
        bits = rec.outcome[sifted.bob_z]
        n_z = bits.size
        sample_seed = int(rng.integers(0, _U64, dtype=np.uint64))
        sample = sample_positions(n_z, pol.sample_fraction, sample_seed)
        self.transport.send(ZSample(sample_seed, bits[sample]))
        key_mask = np.ones(n_z, dtype=bool)
        key_mask[sample] = False
        raw_key = bits[key_mask]

        self.state = "reconcile"
        syn = self._expect(EcSyndrome)
        if syn.sample_errors > sample.size:
            raise ProtocolError("more sample errors than sampled bits")
        lam = leakage_bits(raw_key.size, syn.sample_errors, sample.size, cfg.f_ec)
        if syn.syndrome.size != lam:
            raise ProtocolError(f"syndrome of {syn.syndrome.size} bits, expected {lam}")
        key = self.reconciler.reconcile(raw_key, sifted.z_slots[key_mask], syn)
        iz = info.intensities[sifted.bob_z][key_mask]
        flipped = key != raw_key
        errors = (int(np.count_nonzero(flipped[iz == 0])), int(np.count_nonzero(flipped[iz == 1])))
        if self.tamper is not None:
            key = np.asarray(self.tamper(key.copy()), dtype=np.uint8)
        self.transport.send(EcConfirm(*errors))
        counts = session_counts(info.intensities[sifted.bob_z], ix, key_mask, errors,
                                flags, raw, hello.n_pulses, cfg)
        self.report = secret_key_length(counts, cfg, lambda_ec=lam)

        self.state = "verify"
        tag = self._expect(Tag)
        if tag.tag.size != min(pol.tag_len(cfg), key.size):
            raise ProtocolError("tag length differs from the agreed length")
        ok = bool(np.array_equal(seeded_hash(key, tag.seed, tag.tag.size), tag.tag))
        self.transport.send(TagResult(ok))
        if not ok:
            raise SessionAbort(AbortReason.CORRECTNESS, "tag mismatch")

        self.state = "amplify"
        pa = self._expect(PaSeed)
        if pa.key_length != self.report.key_length:
            raise ProtocolError(f"Alice's key length {pa.key_length} differs from "
                                f"{self.report.key_length}")
        self.key = seeded_hash(key, pa.seed, pa.key_length)
        self.transport.send(Done())


__all__ = [
    "AbortReason", "SessionAbort", "BlockPolicy", "tag_length", "fingerprint",
    "sample_positions", "leakage_bits", "Reconciler", "OracleReconciler", "session_counts",
    "Alice", "Bob",
]
