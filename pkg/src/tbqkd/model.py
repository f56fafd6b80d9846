"""Protocol and link parameters for the three-state time-bin BB84 system.

Every other module takes its numbers from :class:`ProtocolConfig` and
:class:`LinkModel`. Both are frozen dataclasses; sweeps derive variants with
:func:`dataclasses.replace`.

Unit conventions are fixed here and nowhere else: powers in dBm are turned
into mW with :func:`dbm_to_mw`, attenuations in dB into transmittances with
:func:`db_to_transmittance`.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

SCHEMA_VERSION = 1


class ValidationError(ValueError):
    """Raised when a configuration violates one or more invariants.

    ``violations`` carries every violated invariant, not just the first one.
    """

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


def dbm_to_mw(power_dbm: float) -> float:
    """Convert a power in dBm to mW. ``-inf`` maps to 0."""
    if power_dbm == -math.inf:
        return 0.0
    return 10.0 ** (power_dbm / 10.0)


def mw_to_dbm(power_mw: float) -> float:
    if power_mw <= 0:
        return -math.inf
    return 10.0 * math.log10(power_mw)


def db_to_transmittance(loss_db: float) -> float:
    return 10.0 ** (-loss_db / 10.0)


@dataclass(frozen=True)
class SyncMode:
    """How Alice and Bob share the clock.

    ``electrical`` is the bench connection used for the dark-fiber runs.
    ``optical`` sends a pulsed pattern at ``launch_power_dbm`` through the
    quantum fiber; its only modeled effect is extra crosstalk background.
    """

    kind: str = "electrical"
    launch_power_dbm: float | None = None
    pattern_rate_bps: float | None = None

    @classmethod
    def electrical(cls) -> SyncMode:
        return cls()

    @classmethod
    def optical(cls, launch_power_dbm: float = -29.0,
                pattern_rate_bps: float = 0.145e6) -> SyncMode:
        return cls("optical", float(launch_power_dbm), float(pattern_rate_bps))

    @property
    def is_optical(self) -> bool:
        return self.kind == "optical"


@dataclass(frozen=True)
class ProtocolConfig:
    """Source and protocol parameters.

    ``block_size`` counts sifted Z-basis detections per analysis block.
    """

    pulse_rate: float = 595e6
    p_z_alice: float = 0.9
    p_x_alice: float = 0.1
    mu1: float = 0.41
    mu2: float = 0.15
    p_mu1: float = 0.7
    p_mu2: float = 0.3
    eps_sec: float = 1e-9
    eps_cor: float = 1e-9
    block_size: int = 10**9
    f_ec: float = 1.16

    @property
    def intensities(self) -> tuple[float, float]:
        return (self.mu1, self.mu2)

    @property
    def intensity_probs(self) -> tuple[float, float]:
        return (self.p_mu1, self.p_mu2)

    @property
    def mean_photon_number(self) -> float:
        return self.p_mu1 * self.mu1 + self.p_mu2 * self.mu2


# Calibrated constants; see ``tbqkd.harness.calibrate``. Regenerate with
# ``tbqkd calibrate`` and paste the printed values here.
CALIBRATED_INTRINSIC_ERROR = 0.024373322374561718
CALIBRATED_DETECTION_WINDOW = 1.6436413637007745e-10
CALIBRATED_CROSSTALK_COEFF = 6374622.148972137
CALIBRATED_SYNC_CROSSTALK_FRACTION = 0.3748450250791286


@dataclass(frozen=True)
class LinkModel:
    """Channel, receiver and detector parameters.

    Background counts are per detector and are integrated over
    ``detection_window`` seconds per slot (``None`` means the whole slot,
    ``1/pulse_rate``). ``classical_power_dbm`` is CW light co-propagating in
    the fiber; ``-inf`` is a dark fiber. An optical ``sync`` adds its launch
    power, weighted by ``sync_crosstalk_fraction``, to the same budget.
    """

    channel_loss: float = 21.0
    bob_p_z: float = 0.9
    eta_receiver_z: float = 0.5
    eta_receiver_x: float = 0.28
    eta_detector: float = 0.2
    dark_rate: float = 2700.0
    dead_time: float = 20e-6
    e_intrinsic_z: float = CALIBRATED_INTRINSIC_ERROR
    visibility_x: float = 1.0 - 2.0 * CALIBRATED_INTRINSIC_ERROR
    crosstalk_coeff: float = CALIBRATED_CROSSTALK_COEFF
    classical_power_dbm: float = -math.inf
    baseline_noise: float = 0.0
    detection_window: float | None = CALIBRATED_DETECTION_WINDOW
    sync_crosstalk_fraction: float = CALIBRATED_SYNC_CROSSTALK_FRACTION
    sync: SyncMode = field(default_factory=SyncMode)

    @property
    def bob_p_x(self) -> float:
        return 1.0 - self.bob_p_z

    @property
    def e_intrinsic_x(self) -> float:
        return (1.0 - self.visibility_x) / 2.0

    def classical_power_mw(self) -> float:
        """Crosstalk-weighted classical power reaching the fiber, in mW."""
        total = dbm_to_mw(self.classical_power_dbm)
        if self.sync.is_optical:
            total += self.sync_crosstalk_fraction * dbm_to_mw(self.sync.launch_power_dbm)
        return total


def default_setup() -> tuple[ProtocolConfig, LinkModel]:
    """The built-in parameter set: 21 dB loss, dark fiber, electrical sync, calibrated constants."""
    return ProtocolConfig(), LinkModel()


def _bad_number(x: Any) -> bool:
    return not isinstance(x, (int, float)) or isinstance(x, bool) or math.isnan(x)


def check(config: ProtocolConfig, link: LinkModel) -> list[str]:
    """Return every violated invariant as a list of messages (empty when valid)."""
    out: list[str] = []

    def number(name: str, value: Any, *, allow_neg_inf: bool = False) -> bool:
        if _bad_number(value):
            out.append(f"{name}: not a number")
            return False
        if math.isinf(value) and not (allow_neg_inf and value < 0):
            out.append(f"{name}: must be finite")
            return False
        return True

    def prob(name: str, value: Any, *, open_interval: bool = False) -> None:
        if not number(name, value):
            return
        ok = 0.0 < value < 1.0 if open_interval else 0.0 <= value <= 1.0
        if not ok:
            out.append(f"{name}: probability out of range")

    def nonneg(name: str, value: Any) -> None:
        if number(name, value) and value < 0:
            out.append(f"{name}: must be non-negative")

    c = config
    if number("pulse_rate", c.pulse_rate) and c.pulse_rate <= 0:
        out.append("pulse_rate: must be positive")
    prob("p_z_alice", c.p_z_alice, open_interval=True)
    prob("p_x_alice", c.p_x_alice, open_interval=True)
    if not _bad_number(c.p_z_alice) and not _bad_number(c.p_x_alice):
        if abs(c.p_z_alice + c.p_x_alice - 1.0) > 1e-12:
            out.append("p_z_alice + p_x_alice must equal 1")
    mu_ok = number("mu1", c.mu1) & number("mu2", c.mu2)
    if mu_ok:
        if c.mu2 < 0:
            out.append("mu2: must be non-negative")
        if not c.mu1 > c.mu2:
            out.append("mu1 must exceed mu2")
    prob("p_mu1", c.p_mu1)
    prob("p_mu2", c.p_mu2)
    if not _bad_number(c.p_mu1) and not _bad_number(c.p_mu2):
        if abs(c.p_mu1 + c.p_mu2 - 1.0) > 1e-12:
            out.append("p_mu1 + p_mu2 must equal 1")
        elif min(c.p_mu1, c.p_mu2) <= 0:
            out.append("both intensities must have nonzero probability")
    prob("eps_sec", c.eps_sec, open_interval=True)
    prob("eps_cor", c.eps_cor, open_interval=True)
    if number("block_size", c.block_size) and c.block_size < 1:
        out.append("block_size: must be at least 1")
    if number("f_ec", c.f_ec) and c.f_ec < 1:
        out.append("f_ec: must be at least 1")

    k = link
    nonneg("channel_loss", k.channel_loss)
    prob("bob_p_z", k.bob_p_z)
    for name in ("eta_receiver_z", "eta_receiver_x", "eta_detector",
                 "e_intrinsic_z", "visibility_x", "sync_crosstalk_fraction"):
        prob(name, getattr(k, name))
    for name in ("dark_rate", "dead_time", "crosstalk_coeff", "baseline_noise"):
        nonneg(name, getattr(k, name))
    number("classical_power_dbm", k.classical_power_dbm, allow_neg_inf=True)
    if k.detection_window is not None and number("detection_window", k.detection_window):
        if k.detection_window <= 0:
            out.append("detection_window: must be positive")
        elif not _bad_number(c.pulse_rate) and c.pulse_rate > 0 \
                and k.detection_window > 1.0 / c.pulse_rate * (1 + 1e-12):
            out.append("detection_window: longer than one slot")
    s = k.sync
    if s.kind not in ("electrical", "optical"):
        out.append(f"sync: unknown mode {s.kind!r}")
    elif s.is_optical:
        number("sync.launch_power_dbm", s.launch_power_dbm)
        if number("sync.pattern_rate_bps", s.pattern_rate_bps) and s.pattern_rate_bps <= 0:
            out.append("sync.pattern_rate_bps: must be positive")
    return out


def validate(config: ProtocolConfig, link: LinkModel) -> tuple[ProtocolConfig, LinkModel]:
    """Return ``(config, link)`` unchanged, or raise :class:`ValidationError`."""
    violations = check(config, link)
    if violations:
        raise ValidationError(violations)
    return config, link


# -- configuration file -----------------------------------------------------
#
# JSON document:
#   {"schema_version": 1, "protocol": {...}, "link": {..., "sync": {...}}}
# ``-inf`` dBm is written as null. Missing keys take the built-in defaults;
# unknown keys are rejected.

def _encode_float(x):
    if isinstance(x, float) and math.isinf(x) and x < 0:
        return None
    return x


def config_to_dict(config: ProtocolConfig, link: LinkModel) -> dict:
    link_d = asdict(link)
    link_d["classical_power_dbm"] = _encode_float(link.classical_power_dbm)
    return {"schema_version": SCHEMA_VERSION, "protocol": asdict(config), "link": link_d}


def _take(cls, data: dict, where: str) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ValidationError([f"{where}: unknown key {u!r}" for u in unknown])
    return data


def config_from_dict(data: dict) -> tuple[ProtocolConfig, LinkModel]:
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValidationError([f"schema_version: expected {SCHEMA_VERSION}, got {version!r}"])
    extra = sorted(set(data) - {"schema_version", "protocol", "link"})
    if extra:
        raise ValidationError([f"unknown top-level key {e!r}" for e in extra])
    proto = dict(_take(ProtocolConfig, data.get("protocol", {}), "protocol"))
    link_d = dict(_take(LinkModel, data.get("link", {}), "link"))
    if "classical_power_dbm" in link_d and link_d["classical_power_dbm"] is None:
        link_d["classical_power_dbm"] = -math.inf
    if "sync" in link_d:
        link_d["sync"] = SyncMode(**_take(SyncMode, link_d["sync"], "link.sync"))
    if "block_size" in proto and isinstance(proto["block_size"], float) \
            and proto["block_size"].is_integer():
        proto["block_size"] = int(proto["block_size"])
    config, link = ProtocolConfig(**proto), LinkModel(**link_d)
    return validate(config, link)


def save_config(path: str | Path, config: ProtocolConfig, link: LinkModel) -> None:
    Path(path).write_text(json.dumps(config_to_dict(config, link), indent=2) + "\n")


def load_config(path: str | Path) -> tuple[ProtocolConfig, LinkModel]:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError([f"{path}: not valid JSON ({exc})"]) from None
    if not isinstance(data, dict):
        raise ValidationError([f"{path}: top level must be an object"])
    return config_from_dict(data)


__all__ = [
    "SCHEMA_VERSION", "ValidationError", "SyncMode", "ProtocolConfig", "LinkModel",
    "default_setup", "check", "validate", "dbm_to_mw", "mw_to_dbm",
    "db_to_transmittance", "config_to_dict", "config_from_dict", "save_config",
    "load_config",
]
