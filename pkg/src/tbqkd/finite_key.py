"""One-decoy finite-key secret key length.

Observed counts per (basis, intensity) are turned into bounds on the
vacuum and single-photon contributions, the single-photon phase error is
bounded from the X basis, and the key length follows as

    l = s_z0_low + s_z1_low * (1 - h(phi_z_up)) - lambda_ec
        - 6 log2(19 / eps_sec) - log2(2 / eps_cor)

Decoy counts enter the bounds normalized as ``e^mu / p_mu * (count +- delta)``
with a Hoeffding deviation ``delta`` computed from the same cell's count at
failure probability ``eps_sec``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

from .channel import X, Z, BlockCounts
from .model import ProtocolConfig

BASIS_INDEX = {"Z": Z, "X": X}


class DegenerateDecoy(ValueError):
    """The two intensities coincide, so the decoy equations are singular."""


class InsufficientStatistics(ValueError):
    """A single-photon lower bound came out non-positive."""


def binary_entropy(p: float) -> float:
    """h(p) in bits, with h(0) = h(1) = 0."""
    if not 0.0 <= p <= 1.0 or math.isnan(p):
        raise ValueError(f"binary entropy undefined for p={p!r}")
    if p == 0.0 or p == 1.0:
        return 0.0
    return -p * math.log2(p) - (1.0 - p) * math.log2(1.0 - p)


def hoeffding_delta(n: float, eps: float) -> float:
    """Hoeffding deviation sqrt(n/2 * ln(1/eps))."""
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps must lie in (0, 1), got {eps!r}")
    if n < 0:
        raise ValueError("count must be non-negative")
    return math.sqrt(n / 2.0 * math.log(1.0 / eps))


def tau_n(n: int, config: ProtocolConfig) -> float:
    """Probability that Alice sends an n-photon pulse, mixed over intensities."""
    return sum(p * math.exp(-mu) * mu**n / math.factorial(n)
               for mu, p in zip(config.intensities, config.intensity_probs))


def _check_decoy(config: ProtocolConfig) -> None:
    if not config.mu1 > config.mu2:
        raise DegenerateDecoy("mu1 must exceed mu2 for the one-decoy bounds")


def decoy_count(count: float, intensity: int, config: ProtocolConfig, sign: int,
                eps: float) -> float:
    """Decoy-normalized Hoeffding bound ``e^mu/p_mu * max(0, count + sign*delta)``."""
    mu = config.intensities[intensity]
    p = config.intensity_probs[intensity]
    shifted = count + sign * hoeffding_delta(count, eps)
    return math.exp(mu) / p * max(0.0, shifted)


def vacuum_bounds(counts: BlockCounts, config: ProtocolConfig, eps: float | None = None,
                  basis: str = "Z") -> tuple[float, float]:
    """Lower and upper bounds on vacuum detections in ``basis``.

    Vacuum events are background clicks, wrong half the time, so twice the
    errors bound them from above, and the decoy combination of the error
    counts bounds them from below.
    """
    _check_decoy(config)
    eps = config.eps_sec if eps is None else eps
    b = BASIS_INDEX[basis]
    mu1, mu2 = config.intensities
    m_tot = counts.m(b, 0) + counts.m(b, 1)
    upper = 2.0 * (m_tot + hoeffding_delta(m_tot, eps))
    m2_minus = decoy_count(counts.m(b, 1), 1, config, -1, eps)
    m1_plus = decoy_count(counts.m(b, 0), 0, config, +1, eps)
    lower = 2.0 * tau_n(0, config) * (mu1 * m2_minus - mu2 * m1_plus) / (mu1 - mu2)
    return max(0.0, lower), upper


def single_photon_bound(counts: BlockCounts, config: ProtocolConfig, s0_up: float,
                        eps: float | None = None, basis: str = "Z") -> float:
    """Lower bound on single-photon detections in ``basis``."""
    _check_decoy(config)
    eps = config.eps_sec if eps is None else eps
    b = BASIS_INDEX[basis]
    mu1, mu2 = config.intensities
    n2_minus = decoy_count(counts.n(b, 1), 1, config, -1, eps)
    n1_plus = decoy_count(counts.n(b, 0), 0, config, +1, eps)
    pref = tau_n(1, config) * mu1 / (mu2 * (mu1 - mu2))
    inner = (n2_minus - (mu2**2 / mu1**2) * n1_plus
             - ((mu1**2 - mu2**2) / mu1**2) * s0_up / tau_n(0, config))
    return max(0.0, pref * inner)


def single_photon_error_bound(counts: BlockCounts, config: ProtocolConfig,
                              eps: float | None = None) -> float:
    """Upper bound on single-photon errors in the X basis (unclamped)."""
    _check_decoy(config)
    eps = config.eps_sec if eps is None else eps
    mu1, mu2 = config.intensities
    m1_plus = decoy_count(counts.m_x_mu1, 0, config, +1, eps)
    m2_minus = decoy_count(counts.m_x_mu2, 1, config, -1, eps)
    return tau_n(1, config) * (m1_plus - m2_minus) / (mu1 - mu2)


def gamma(a: float, b: float, c: float, d: float) -> float:
    """Random-sampling penalty between c Z and d X single-photon events."""
    var = (c + d) * (1.0 - b) * b / (c * d * math.log(2.0))
    arg = (c + d) / (c * d * (1.0 - b) * b) * (21.0**2 / a**2)
    if arg <= 1.0:
        return 0.0
    return math.sqrt(var * math.log2(arg))


def phase_error_bound(s_z1_low: float, s_x1_low: float, v_x1_up: float,
                      eps_sec: float) -> float:
    """Upper bound on the Z-basis single-photon phase error rate, at most 1/2.

    A zero observed error ratio is evaluated as one error in ``s_x1_low`` inside
    the sampling penalty, which keeps the bound strictly positive.
    """
    if s_x1_low <= 0:
        raise InsufficientStatistics("insufficient X statistics")
    if s_z1_low <= 0:
        raise InsufficientStatistics("insufficient Z statistics")
    ratio = max(0.0, v_x1_up) / s_x1_low
    if ratio >= 0.5:
        return 0.5
    b = max(ratio, 1.0 / s_x1_low)
    if b >= 0.5:
        return 0.5
    return float(min(0.5, ratio + gamma(eps_sec, b, s_z1_low, s_x1_low)))


def ec_leakage(n_z: float, qber_z: float, f_ec: float) -> float:
    """Error-correction leakage f_ec * n_z * h(qber_z), capped at n_z."""
    return min(float(n_z), f_ec * n_z * binary_entropy(qber_z))


REPORT_COLUMNS = (
    "n_z", "m_z", "n_x", "m_x", "qber_z", "qber_x", "elapsed_time",
    "tau0", "tau1", "s_z0_low", "s_z0_up", "s_z1_low", "s_x0_up", "s_x1_low",
    "v_x1_up", "phi_z_up", "lambda_ec", "key_length", "skr", "reason",
)


@dataclass(frozen=True)
class KeyLengthReport:
    """Every intermediate of one key-length evaluation.

    ``reason`` is empty when ``key_length > 0`` and otherwise names why no key
    was extracted. ``clamps`` lists the bounds that were clamped into their
    physical range.
    """

    n_z: float
    m_z: float
    n_x: float
    m_x: float
    qber_z: float
    qber_x: float
    elapsed_time: float
    tau0: float
    tau1: float
    s_z0_low: float
    s_z0_up: float
    s_z1_low: float
    s_x0_up: float
    s_x1_low: float
    v_x1_up: float
    phi_z_up: float
    lambda_ec: float
    key_length: int
    skr: float
    reason: str = ""
    clamps: tuple[str, ...] = field(default=())

    def csv_row(self) -> list:
        d = asdict(self)
        return [d[c] for c in REPORT_COLUMNS]


def secret_key_length(counts: BlockCounts, config: ProtocolConfig, *,
                      lambda_ec: float | None = None) -> KeyLengthReport:
    """Key length and rate for one block of observed counts.

    ``lambda_ec`` overrides the modeled leakage with the number of bits a
    reconciliation step actually disclosed.
    """
    _check_decoy(config)
    eps = config.eps_sec
    clamps: list[str] = []
    n_z, m_z, n_x, m_x = counts.n_z, counts.m_z, counts.n_x, counts.m_x
    qz, qx = counts.qber_z, counts.qber_x
    t0, t1 = tau_n(0, config), tau_n(1, config)

    s_z0_low, s_z0_up = vacuum_bounds(counts, config, eps, "Z")
    if s_z0_low > n_z:
        clamps.append("s_z0_low")
        s_z0_low = float(n_z)
    if s_z0_up > n_z:
        clamps.append("s_z0_up")
    _, s_x0_up = vacuum_bounds(counts, config, eps, "X")
    # Clamping s0_up to the detected total keeps it a valid upper bound.
    s_z1_low = single_photon_bound(counts, config, min(s_z0_up, n_z), eps, "Z")
    s_x1_low = single_photon_bound(counts, config, min(s_x0_up, n_x), eps, "X")
    if s_z1_low > n_z - s_z0_low:
        clamps.append("s_z1_low")
        s_z1_low = max(0.0, n_z - s_z0_low)
    if s_x1_low > n_x:
        clamps.append("s_x1_low")
        s_x1_low = float(n_x)
    v_raw = single_photon_error_bound(counts, config, eps)
    v_x1_up = min(max(v_raw, 0.0), float(m_x))
    if v_x1_up != v_raw:
        clamps.append("v_x1_up")

    reason = ""
    try:
        phi = phase_error_bound(s_z1_low, s_x1_low, v_x1_up, eps)
    except InsufficientStatistics as exc:
        phi, reason = 0.5, str(exc)
    if phi >= 0.5 and not reason:
        reason = "phase error bound at 1/2"

    if lambda_ec is None:
        lam = ec_leakage(n_z, min(qz, 0.5), config.f_ec) if n_z > 0 else 0.0
    else:
        lam = min(float(lambda_ec), float(n_z))

    penalty = 6.0 * math.log2(19.0 / eps) + math.log2(2.0 / config.eps_cor)
    raw = s_z0_low + s_z1_low * (1.0 - binary_entropy(phi)) - lam - penalty
    length = int(math.floor(raw)) if raw > 0 else 0
    if length > n_z:
        clamps.append("key_length")
        length = int(n_z)
    if qz >= 0.5:
        length, reason = 0, "qber_z at or above 1/2"
    elif phi >= 0.5:
        length = 0
    if length == 0 and not reason:
        reason = "negative key length" if n_z > 0 else "no detections"
    skr = length / counts.elapsed_time if counts.elapsed_time > 0 else 0.0
    return KeyLengthReport(
        n_z=float(n_z), m_z=float(m_z), n_x=float(n_x), m_x=float(m_x),
        qber_z=float(qz), qber_x=float(qx), elapsed_time=float(counts.elapsed_time),
        tau0=t0, tau1=t1, s_z0_low=s_z0_low, s_z0_up=s_z0_up, s_z1_low=s_z1_low,
        s_x0_up=s_x0_up, s_x1_low=s_x1_low, v_x1_up=v_x1_up, phi_z_up=phi,
        lambda_ec=lam, key_length=length, skr=skr, reason=reason, clamps=tuple(clamps))


__all__ = [
    "DegenerateDecoy", "InsufficientStatistics", "binary_entropy", "hoeffding_delta",
    "tau_n", "decoy_count", "vacuum_bounds", "single_photon_bound",
    "single_photon_error_bound", "gamma", "phase_error_bound", "ec_leakage",
    "REPORT_COLUMNS", "KeyLengthReport", "secret_key_length",
]
