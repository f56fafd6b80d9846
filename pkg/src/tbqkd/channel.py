"""Photon-number-resolved channel simulation for one analysis block.

Source -> fiber -> passive 90/10 splitter -> two detectors (Z time-of-arrival,
X interferometer port). Per-slot event loops are out of the question at
595 MHz, so every block is sampled in aggregate: multinomial over
(Alice basis, intensity) cells, multinomial over photon number inside each
cell, and one more multinomial over detection outcomes per photon number.

The same per-slot probability table feeds both :func:`simulate_pulses` and
:func:`expected_pulses`, so the closed-form path is the Monte-Carlo path's
statistical oracle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import poisson

from .model import LinkModel, ProtocolConfig, db_to_transmittance

K_MAX = 12
Z, X = 0, 1
BASES = ("Z", "X")

# ~200 days of pulses at 595 MHz.
DEFAULT_PULSE_BUDGET = 10**16


class BlockUnreachable(RuntimeError):
    """The requested number of sifted detections needs too many pulses."""


def transmittance(link: LinkModel, basis: str) -> float:
    """Probability that one photon sent by Alice is registered in ``basis``."""
    if basis == "Z":
        split, eta_rx = link.bob_p_z, link.eta_receiver_z
    elif basis == "X":
        split, eta_rx = link.bob_p_x, link.eta_receiver_x
    else:
        raise ValueError(f"unknown basis {basis!r}")
    return db_to_transmittance(link.channel_loss) * split * eta_rx * link.eta_detector


def background_rate(link: LinkModel) -> float:
    """Background counts/s at each detector: dark + baseline + crosstalk."""
    return link.dark_rate + link.baseline_noise + link.crosstalk_coeff * link.classical_power_mw()


def background_probability(config: ProtocolConfig, link: LinkModel) -> float:
    """Probability of a background click inside one slot's detection window."""
    window = link.detection_window if link.detection_window is not None else 1.0 / config.pulse_rate
    return min(1.0, background_rate(link) * window)


def dead_time_throughput(rate_in, dead_time):
    """Non-paralyzable detector: ``rate_in / (1 + rate_in * dead_time)``."""
    rate_in = np.asarray(rate_in, dtype=float)
    if np.any(rate_in < 0):
        raise ValueError("rate_in must be non-negative")
    out = rate_in / (1.0 + rate_in * dead_time)
    return float(out) if out.ndim == 0 else out


def click_probability(mu, eta, p_bg_slot):
    """Weak-coherent-pulse click probability ``1 - (1 - p_bg) exp(-mu eta)``."""
    return 1.0 - (1.0 - p_bg_slot) * np.exp(-np.asarray(mu, dtype=float) * eta)


def photon_number_pmf(mu: float, k_max: int = K_MAX) -> np.ndarray:
    """Poisson(mu) over 0..k_max with the tail folded into the last bin."""
    pmf = poisson.pmf(np.arange(k_max + 1), mu)
    pmf[-1] += max(0.0, 1.0 - pmf.sum())
    return pmf / pmf.sum()


@dataclass(frozen=True)
class DriftProfile:
    """Slow variation of channel loss and interferometer visibility.

    Offsets are the sum of a sinusoid and a list of steps. ``steps`` holds
    ``(t_start, loss_offset_db, visibility_offset)`` tuples that apply from
    ``t_start`` (seconds from the start of the run) onward. Resulting values
    are clamped to ``loss >= 0`` and ``0 <= V <= 1``.
    """

    loss_amplitude_db: float = 0.0
    loss_period: float = 86400.0
    visibility_amplitude: float = 0.0
    visibility_period: float = 86400.0
    phase: float = 0.0
    steps: tuple[tuple[float, float, float], ...] = ()

    def offsets(self, t: float) -> tuple[float, float]:
        dloss = self.loss_amplitude_db * math.sin(2 * math.pi * t / self.loss_period + self.phase)
        dvis = self.visibility_amplitude * math.sin(
            2 * math.pi * t / self.visibility_period + self.phase)
        for t_start, sl, sv in self.steps:
            if t >= t_start:
                dloss += sl
                dvis += sv
        return dloss, dvis

    def link_at(self, link: LinkModel, t: float) -> LinkModel:
        dloss, dvis = self.offsets(t)
        return replace(link,
                       channel_loss=max(0.0, link.channel_loss + dloss),
                       visibility_x=min(1.0, max(0.0, link.visibility_x + dvis)))

    @property
    def is_static(self) -> bool:
        return (self.loss_amplitude_db == 0 and self.visibility_amplitude == 0
                and not self.steps)


@dataclass(frozen=True)
class BlockCounts:
    """Decoy-analysis observables of one block.

    Counts are integers for simulated blocks and floats for closed-form
    expectations. ``pulses_sent_per_cell`` is ordered
    ``(Z mu1, Z mu2, X mu1, X mu2)``. ``raw_z``/``raw_x`` are all detections
    registered by each detector before sifting.
    """

    n_z_mu1: float
    n_z_mu2: float
    m_z_mu1: float
    m_z_mu2: float
    n_x_mu1: float
    n_x_mu2: float
    m_x_mu1: float
    m_x_mu2: float
    pulses_sent_per_cell: tuple[float, float, float, float]
    elapsed_time: float
    raw_z: float = 0.0
    raw_x: float = 0.0

    def n(self, basis: int, intensity: int) -> float:
        return (self.n_z_mu1, self.n_z_mu2, self.n_x_mu1, self.n_x_mu2)[2 * basis + intensity]

    def m(self, basis: int, intensity: int) -> float:
        return (self.m_z_mu1, self.m_z_mu2, self.m_x_mu1, self.m_x_mu2)[2 * basis + intensity]

    @property
    def n_z(self) -> float:
        return self.n_z_mu1 + self.n_z_mu2

    @property
    def m_z(self) -> float:
        return self.m_z_mu1 + self.m_z_mu2

    @property
    def n_x(self) -> float:
        return self.n_x_mu1 + self.n_x_mu2

    @property
    def m_x(self) -> float:
        return self.m_x_mu1 + self.m_x_mu2

    @property
    def qber_z(self) -> float:
        return self.m_z / self.n_z if self.n_z > 0 else 0.0

    @property
    def qber_x(self) -> float:
        return self.m_x / self.n_x if self.n_x > 0 else 0.0

    @property
    def total_pulses(self) -> float:
        return sum(self.pulses_sent_per_cell)

    def scaled(self, factor: float) -> BlockCounts:
        """All counts and the elapsed time multiplied by ``factor``."""
        names = ("n_z_mu1", "n_z_mu2", "m_z_mu1", "m_z_mu2",
                 "n_x_mu1", "n_x_mu2", "m_x_mu1", "m_x_mu2", "raw_z", "raw_x")
        kw = {k: getattr(self, k) * factor for k in names}
        return replace(self, **kw,
                       pulses_sent_per_cell=tuple(p * factor for p in self.pulses_sent_per_cell),
                       elapsed_time=self.elapsed_time * factor)

    def __add__(self, other: BlockCounts) -> BlockCounts:
        names = ("n_z_mu1", "n_z_mu2", "m_z_mu1", "m_z_mu2",
                 "n_x_mu1", "n_x_mu2", "m_x_mu1", "m_x_mu2", "raw_z", "raw_x")
        kw = {k: getattr(self, k) + getattr(other, k) for k in names}
        return BlockCounts(
            **kw,
            pulses_sent_per_cell=tuple(a + b for a, b in
                                       zip(self.pulses_sent_per_cell, other.pulses_sent_per_cell)),
            elapsed_time=self.elapsed_time + other.elapsed_time)


@dataclass
class GroundTruth:
    """Simulator-only tallies indexed ``[alice_basis, intensity, k]``.

    ``detections``/``errors`` are matching-basis events (Bob's detector in
    Alice's basis); ``cross`` are clicks of the other detector, which sifting
    discards. Never serialized into session outputs.
    """

    pulses: np.ndarray
    detections: np.ndarray
    errors: np.ndarray
    cross: np.ndarray

    @classmethod
    def zeros(cls, k_max: int = K_MAX) -> GroundTruth:
        shape = (2, 2, k_max + 1)
        return cls(*(np.zeros(shape, dtype=np.int64) for _ in range(4)))

    def __iadd__(self, other: GroundTruth) -> GroundTruth:
        self.pulses += other.pulses
        self.detections += other.detections
        self.errors += other.errors
        self.cross += other.cross
        return self

    def detections_with(self, basis: int, k: int) -> int:
        return int(self.detections[basis, :, k].sum())

    def errors_with(self, basis: int, k: int) -> int:
        return int(self.errors[basis, :, k].sum())


@dataclass(frozen=True)
class SlotModel:
    """Per-pulse outcome probabilities for one link state.

    Arrays are indexed ``[alice_basis, intensity, k]``. ``detect`` and
    ``error`` are joint probabilities for the matching detector (error
    implies detection); ``cross`` is a click of the other detector when the
    matching one stays silent. ``thinning`` is the dead-time survival factor
    per detector and is already folded into the probabilities.
    """

    cell: np.ndarray
    pmf: np.ndarray
    detect: np.ndarray
    error: np.ndarray
    cross: np.ndarray
    thinning: np.ndarray
    rate_in: np.ndarray


def slot_model(config: ProtocolConfig, link: LinkModel, k_max: int = K_MAX) -> SlotModel:
    p_basis = np.array([config.p_z_alice, config.p_x_alice])
    p_int = np.array(config.intensity_probs)
    cell = p_basis[:, None] * p_int[None, :]
    pmf = np.stack([photon_number_pmf(mu, k_max) for mu in config.intensities])
    k = np.arange(k_max + 1)
    eta = np.array([transmittance(link, "Z"), transmittance(link, "X")])
    p_bg = background_probability(config, link)
    e_sig = np.array([link.e_intrinsic_z, link.e_intrinsic_x])

    miss = (1.0 - eta[:, None]) ** k[None, :]          # [detector, k]
    signal = 1.0 - miss
    click = 1.0 - (1.0 - p_bg) * miss

    # Every photon and every background count loads the detector, including
    # those outside the detection window and from the other basis.
    photon_rate = config.pulse_rate * np.einsum("ai,ik,dk->d", cell, pmf, signal)
    rate_in = photon_rate + background_rate(link)
    thinning = np.where(rate_in > 0,
                        1.0 / (1.0 + rate_in * link.dead_time), 1.0)

    detect = np.empty((2, 2, k_max + 1))
    error = np.empty_like(detect)
    cross = np.empty_like(detect)
    for a in (Z, X):
        d_other = 1 - a
        detect[a] = (click[a] * thinning[a])[None, :].repeat(2, axis=0)
        err_k = (signal[a] * e_sig[a] + 0.5 * p_bg * miss[a]) * thinning[a]
        error[a] = err_k[None, :].repeat(2, axis=0)
        other_only = click[d_other] * thinning[d_other] * (1.0 - click[a] * thinning[a])
        cross[a] = other_only[None, :].repeat(2, axis=0)
    return SlotModel(cell, pmf, detect, error, cross, thinning, rate_in)


def _segment_links(link: LinkModel, drift: DriftProfile | None, t0: float,
                   duration: float, segments: int) -> list[LinkModel]:
    if drift is None or drift.is_static:
        return [link if drift is None else drift.link_at(link, t0)]
    dt = duration / segments
    return [drift.link_at(link, t0 + (j + 0.5) * dt) for j in range(segments)]


def sifted_z_probability(config: ProtocolConfig, link: LinkModel) -> float:
    """Expected sifted Z detections per pulse sent."""
    sm = slot_model(config, link)
    return float(np.einsum("i,ik,ik->", sm.cell[Z], sm.pmf, sm.detect[Z]))


def plan_block(config: ProtocolConfig, link: LinkModel, drift: DriftProfile | None = None,
               max_pulses: int = DEFAULT_PULSE_BUDGET, segments: int = 64) -> int:
    """Number of pulses whose expected sifted Z count equals ``block_size``."""
    if drift is None or drift.is_static:
        p = sifted_z_probability(config, link if drift is None else drift.link_at(link, 0.0))
    else:
        # Duration depends on the pulse count; two fixed-point passes suffice
        # for drifts slow compared with the block.
        p = sifted_z_probability(config, link)
        for _ in range(2):
            n = config.block_size / p if p > 0 else math.inf
            if not math.isfinite(n) or n > max_pulses:
                break
            links = _segment_links(link, drift, 0.0, n / config.pulse_rate, segments)
            p = float(np.mean([sifted_z_probability(config, lk) for lk in links]))
    if p <= 0 or config.block_size / p > max_pulses:
        raise BlockUnreachable(
            f"block unreachable at this loss: {config.block_size} sifted detections need "
            f"more than {max_pulses:.3g} pulses")
    return int(math.ceil(config.block_size / p))


def _split(n: int, parts: int) -> list[int]:
    base, rem = divmod(n, parts)
    return [base + (1 if j < rem else 0) for j in range(parts)]


def _counts_from_truth(gt: GroundTruth, n_pulses: int, config: ProtocolConfig) -> BlockCounts:
    det = gt.detections.sum(axis=2)
    err = gt.errors.sum(axis=2)
    pulses = gt.pulses.sum(axis=2)
    cross = gt.cross.sum(axis=2)
    return BlockCounts(
        n_z_mu1=int(det[Z, 0]), n_z_mu2=int(det[Z, 1]),
        m_z_mu1=int(err[Z, 0]), m_z_mu2=int(err[Z, 1]),
        n_x_mu1=int(det[X, 0]), n_x_mu2=int(det[X, 1]),
        m_x_mu1=int(err[X, 0]), m_x_mu2=int(err[X, 1]),
        pulses_sent_per_cell=tuple(int(v) for v in pulses.reshape(-1)),
        elapsed_time=n_pulses / config.pulse_rate,
        raw_z=int(det[Z].sum() + cross[X].sum()),
        raw_x=int(det[X].sum() + cross[Z].sum()))


def _sample_segment(sm: SlotModel, n_pulses: int, rng: np.random.Generator) -> GroundTruth:
    cells = rng.multinomial(n_pulses, sm.cell.reshape(-1)).reshape(2, 2)
    pulses = rng.multinomial(cells, sm.pmf[None, :, :].repeat(2, axis=0))
    # Outcomes per (basis, intensity, k): correct, error, cross click, nothing.
    p_ok = sm.detect - sm.error
    probs = np.stack([p_ok, sm.error, sm.cross, 1.0 - sm.detect - sm.cross], axis=-1)
    probs = np.clip(probs, 0.0, 1.0)
    probs /= probs.sum(axis=-1, keepdims=True)
    out = rng.multinomial(pulses, probs)
    return GroundTruth(pulses=pulses.astype(np.int64),
                       detections=(out[..., 0] + out[..., 1]).astype(np.int64),
                       errors=out[..., 1].astype(np.int64),
                       cross=out[..., 2].astype(np.int64))


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def simulate_pulses(config: ProtocolConfig, link: LinkModel, n_pulses: int, seed=0,
                    drift: DriftProfile | None = None, t0: float = 0.0,
                    segments: int = 64) -> tuple[BlockCounts, GroundTruth]:
    """Sample the detection record produced by ``n_pulses`` slots."""
    rng = _as_rng(seed)
    duration = n_pulses / config.pulse_rate
    links = _segment_links(link, drift, t0, duration, segments)
    gt = GroundTruth.zeros()
    for lk, n in zip(links, _split(int(n_pulses), len(links))):
        gt += _sample_segment(slot_model(config, lk), n, rng)
    return _counts_from_truth(gt, int(n_pulses), config), gt


def simulate_block(config: ProtocolConfig, link: LinkModel, drift: DriftProfile | None = None,
                   seed=0, max_pulses: int = DEFAULT_PULSE_BUDGET,
                   segments: int = 64) -> tuple[BlockCounts, GroundTruth]:
    """Simulate one analysis block of about ``config.block_size`` sifted Z detections.

    Deterministic in ``seed`` (an int or a :class:`numpy.random.Generator`).
    Raises :class:`BlockUnreachable` if the block needs more than
    ``max_pulses`` pulses.
    """
    n = plan_block(config, link, drift, max_pulses, segments)
    return simulate_pulses(config, link, n, seed, drift, 0.0, segments)


def expected_pulses(config: ProtocolConfig, link: LinkModel, n_pulses: float,
                    drift: DriftProfile | None = None, t0: float = 0.0,
                    segments: int = 64) -> BlockCounts:
    """Closed-form means of every :class:`BlockCounts` field for ``n_pulses`` slots."""
    duration = n_pulses / config.pulse_rate
    links = _segment_links(link, drift, t0, duration, segments)
    total = None
    for lk in links:
        sm = slot_model(config, lk)
        n = n_pulses / len(links)
        w = n * sm.cell[:, :, None] * sm.pmf[None, :, :]
        det = (w * sm.detect).sum(axis=2)
        err = (w * sm.error).sum(axis=2)
        cross = (w * sm.cross).sum(axis=2)
        bc = BlockCounts(
            n_z_mu1=det[Z, 0], n_z_mu2=det[Z, 1], m_z_mu1=err[Z, 0], m_z_mu2=err[Z, 1],
            n_x_mu1=det[X, 0], n_x_mu2=det[X, 1], m_x_mu1=err[X, 0], m_x_mu2=err[X, 1],
            pulses_sent_per_cell=tuple(float(v) for v in (n * sm.cell).reshape(-1)),
            elapsed_time=n / config.pulse_rate,
            raw_z=float(det[Z].sum() + cross[X].sum()),
            raw_x=float(det[X].sum() + cross[Z].sum()))
        total = bc if total is None else total + bc
    return total


def expected_observables(config: ProtocolConfig, link: LinkModel,
                         drift: DriftProfile | None = None,
                         max_pulses: int = DEFAULT_PULSE_BUDGET) -> BlockCounts:
    """Expected counts of the block :func:`simulate_block` would draw."""
    n = plan_block(config, link, drift, max_pulses)
    return expected_pulses(config, link, n, drift)


def expected_ground_truth(config: ProtocolConfig, link: LinkModel,
                          n_pulses: float) -> dict[str, np.ndarray]:
    """Expected photon-number-resolved tallies (static link)."""
    sm = slot_model(config, link)
    w = n_pulses * sm.cell[:, :, None] * sm.pmf[None, :, :]
    return {"pulses": w, "detections": w * sm.detect, "errors": w * sm.error,
            "cross": w * sm.cross}


def saturated_rate(config: ProtocolConfig, link: LinkModel, basis: str = "Z") -> float:
    """Closed-form detector output rate under the dead-time model (counts/s)."""
    sm = slot_model(config, link)
    d = Z if basis == "Z" else X
    return dead_time_throughput(float(sm.rate_in[d]), link.dead_time)


def seeds_for(master: int, *path: int) -> np.random.Generator:
    """Counter-style split of a master seed into an independent stream."""
    return np.random.default_rng(np.random.SeedSequence(master, spawn_key=tuple(path)))


__all__ = [
    "K_MAX", "BASES", "Z", "X", "BlockUnreachable", "DEFAULT_PULSE_BUDGET",
    "transmittance", "background_rate", "background_probability", "dead_time_throughput",
    "click_probability", "photon_number_pmf", "DriftProfile", "BlockCounts", "GroundTruth",
    "SlotModel", "slot_model", "sifted_z_probability", "plan_block", "simulate_pulses",
    "simulate_block", "expected_pulses", "expected_observables", "expected_ground_truth",
    "saturated_rate", "seeds_for",
]
