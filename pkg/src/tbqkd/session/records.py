"""Slot-level transmission records and sifting.

Records are stored column-wise (one numpy array per field). Only slots in
which one of Bob's detectors clicked are materialized: the session never
looks up Alice's record of an undetected slot, so the table of detected
slots is all either party ever reads.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..channel import X, Z, simulate_pulses
from ..model import LinkModel, ProtocolConfig


class ProtocolError(RuntimeError):
    """A peer sent something the protocol forbids."""


def _strictly_increasing(slots: np.ndarray, who: str) -> None:
    if slots.size > 1 and not np.all(np.diff(slots) > 0):
        raise ProtocolError(f"{who} slot indices must be strictly increasing "
                            "(duplicate or unsorted slot)")


@dataclass
class PulseRecords:
    """Alice's preparation record: basis (0 = Z, 1 = X), key bit (Z only), intensity index."""

    slot: np.ndarray
    basis: np.ndarray
    bit: np.ndarray
    intensity: np.ndarray

    def __post_init__(self):
        self.slot = np.asarray(self.slot, dtype=np.int64)
        self.basis = np.asarray(self.basis, dtype=np.uint8)
        self.bit = np.asarray(self.bit, dtype=np.uint8)
        self.intensity = np.asarray(self.intensity, dtype=np.uint8)
        self.bit[self.basis == X] = 0

    def __len__(self) -> int:
        return int(self.slot.size)


@dataclass
class DetectionRecords:
    """Bob's record: which detector clicked and its outcome.

    For the Z detector the outcome is the time bin; for the X detector it
    flags a click on the monitored (error) interferometer port.
    """

    slot: np.ndarray
    basis: np.ndarray
    outcome: np.ndarray

    def __post_init__(self):
        self.slot = np.asarray(self.slot, dtype=np.int64)
        self.basis = np.asarray(self.basis, dtype=np.uint8)
        self.outcome = np.asarray(self.outcome, dtype=np.uint8)

    def __len__(self) -> int:
        return int(self.slot.size)


@dataclass
class SiftResult:
    """Matching-basis slots and where they sit in each party's record arrays."""

    z_slots: np.ndarray
    x_slots: np.ndarray
    alice_z: np.ndarray
    bob_z: np.ndarray
    alice_x: np.ndarray
    bob_x: np.ndarray


def sift(alice: PulseRecords, bob_slots: np.ndarray, bob_bases: np.ndarray) -> SiftResult:
    """Intersect Alice's records with Bob's report, keeping matching bases.

    Raises:
        ProtocolError: if either list of slot indices is not strictly
            increasing.
    """
    bob_slots = np.asarray(bob_slots, dtype=np.int64)
    bob_bases = np.asarray(bob_bases, dtype=np.uint8)
    _strictly_increasing(alice.slot, "Alice's")
    _strictly_increasing(bob_slots, "Bob's")
    common, ia, ib = np.intersect1d(alice.slot, bob_slots, assume_unique=True,
                                    return_indices=True)
    same = alice.basis[ia] == bob_bases[ib]
    ia, ib, common = ia[same], ib[same], common[same]
    is_z = alice.basis[ia] == Z
    return SiftResult(z_slots=common[is_z], x_slots=common[~is_z],
                      alice_z=ia[is_z], bob_z=ib[is_z], alice_x=ia[~is_z], bob_x=ib[~is_z])


def lookup(alice: PulseRecords, slots: np.ndarray) -> np.ndarray:
    """Positions of ``slots`` in Alice's table; every slot must be present."""
    slots = np.asarray(slots, dtype=np.int64)
    pos = np.searchsorted(alice.slot, slots)
    ok = pos < alice.slot.size
    ok[ok] = alice.slot[pos[ok]] == slots[ok]
    if not ok.all():
        raise ProtocolError("reported slot outside the transmitted frame")
    return pos


@dataclass
class Transmission:
    """Joint realization of one block on the quantum channel.

    ``photons`` is simulator ground truth (photon number of each detected
    pulse) and is never sent over the classical channel.
    """

    alice: PulseRecords
    bob: DetectionRecords
    photons: np.ndarray
    n_pulses: int


def transmit(config: ProtocolConfig, link: LinkModel, n_pulses: int,
             rng: np.random.Generator) -> Transmission:
    """Sample the detected slots of ``n_pulses`` pulses and both parties' records.

    Outcome counts come from the aggregate channel sampler, so every
    marginal matches :func:`tbqkd.channel.simulate_pulses`; the events are
    then placed on distinct random slot indices.
    """
    _, gt = simulate_pulses(config, link, n_pulses, rng)
    a_basis, inten, k = np.meshgrid(np.arange(2), np.arange(2), np.arange(gt.pulses.shape[2]),
                                    indexing="ij")
    correct = (gt.detections - gt.errors).reshape(-1)
    kinds = np.concatenate([
        np.zeros(correct.sum(), np.uint8),
        np.ones(int(gt.errors.sum()), np.uint8),
        np.full(int(gt.cross.sum()), 2, np.uint8)])
    reps = np.concatenate([correct, gt.errors.reshape(-1), gt.cross.reshape(-1)])
    cells = np.tile(np.arange(a_basis.size), 3)
    cell = np.repeat(cells, reps)
    total = cell.size

    order = rng.permutation(total)
    cell, kinds = cell[order], kinds[order]
    basis = a_basis.reshape(-1)[cell].astype(np.uint8)
    intensity = inten.reshape(-1)[cell].astype(np.uint8)
    photons = k.reshape(-1)[cell].astype(np.int16)
    slots = np.sort(rng.choice(int(n_pulses), size=total, replace=False)).astype(np.int64)

    bit = rng.integers(0, 2, total, dtype=np.uint8)
    coin = rng.integers(0, 2, total, dtype=np.uint8)
    bob_basis = np.where(kinds == 2, 1 - basis, basis).astype(np.uint8)
    z_out = np.where(kinds == 0, bit, np.where(kinds == 1, 1 - bit, coin))
    x_out = np.where(kinds == 2, coin, kinds)
    outcome = np.where(bob_basis == Z, z_out, x_out).astype(np.uint8)

    alice = PulseRecords(slots, basis, bit, intensity)
    bob = DetectionRecords(slots.copy(), bob_basis, outcome)
    return Transmission(alice, bob, photons, int(n_pulses))


__all__ = [
    "ProtocolError", "PulseRecords", "DetectionRecords", "SiftResult", "sift", "lookup",
    "Transmission", "transmit",
]
