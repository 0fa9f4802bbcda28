"""Problem instances for a single small-cell cluster.

Geometry, path loss and block fading are drawn from a seeded generator, so a
``ScenarioConfig`` (which carries its own seed) fully determines the channel.
Rates are handled in Mbit/s everywhere downstream; the config keeps the raw
SI values (Hz, bit/s, dBm) and exposes converted views.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

__all__ = [
    "ConfigurationError",
    "Iterations",
    "Steps",
    "ScenarioConfig",
    "ChannelTensor",
    "PRESETS",
    "dbm_to_watt",
    "noise_power",
    "pathloss_db",
    "generate_instance",
    "load_config",
]

MIN_DISTANCE_M = 1.0
PLACEMENT_RETRIES = 1000


class ConfigurationError(ValueError):
    """Raised for invalid scenario settings or an impossible SBS drop."""


@dataclass(frozen=True)
class Iterations:
    """Iteration budgets: zeta passes, nu updates, power steps, UA/PC rounds."""

    I_zeta: int = 10
    I_nu: int = 400
    I_P: int = 2000
    outer_rounds: int = 3


@dataclass(frozen=True)
class Steps:
    alpha: float = 1e-4
    gamma: float | None = None  # None -> each reduction moves 5% of that SBS's P_max
    epsilon_f: float = 1e-9
    epsilon_conv: float = 1e-6


# budgets used for the two complexity settings of the experiment runner
PRESETS: dict[str, Iterations] = {
    "high": Iterations(I_zeta=10, I_nu=400, I_P=2000, outer_rounds=3),
    "low": Iterations(I_zeta=1, I_nu=40, I_P=10, outer_rounds=3),
}


@dataclass(frozen=True)
class ScenarioConfig:
    """All knobs of one cluster instance.

    ``tx_power_dbm`` and ``backhaul_capacity_bps`` accept either a scalar
    (applied to every SBS) or a per-SBS sequence.
    """

    num_sbs: int = 4
    num_users: int = 40
    num_rbs: int = 100
    rb_bandwidth_hz: float = 180e3
    noise_psd_dbm_hz: float = -174.0
    tx_power_dbm: float | tuple[float, ...] = 35.0
    backhaul_capacity_bps: float | tuple[float, ...] = 81e6
    cluster_diameter_m: float = 1000.0
    pathloss_a_db: float = 38.0
    pathloss_b: float = 30.0
    rng_seed: int = 0
    iters: Iterations = field(default_factory=Iterations)
    steps: Steps = field(default_factory=Steps)

    def __post_init__(self) -> None:
        # normalise sequences to tuples so the dataclass stays hashable
        for name in ("tx_power_dbm", "backhaul_capacity_bps"):
            value = getattr(self, name)
            if not np.isscalar(value):
                object.__setattr__(self, name, tuple(float(v) for v in value))
        self.validate()

    def validate(self) -> None:
        if self.num_sbs < 1 or self.num_users < 1 or self.num_rbs < 1:
            raise ConfigurationError("num_sbs, num_users and num_rbs must be >= 1")
        if not self.rb_bandwidth_hz > 0:
            raise ConfigurationError("rb_bandwidth_hz must be positive")
        if not self.cluster_diameter_m > 0:
            raise ConfigurationError("cluster_diameter_m must be positive")
        for name in ("tx_power_dbm", "backhaul_capacity_bps"):
            value = getattr(self, name)
            if not np.isscalar(value) and len(value) != self.num_sbs:
                raise ConfigurationError(f"{name} needs one entry per SBS")
        if np.any(self.backhaul_bps <= 0):
            raise ConfigurationError("backhaul capacities must be positive")
        if not np.all(np.isfinite(self.p_max_w)):
            raise ConfigurationError("tx powers must be finite")
        it = self.iters
        if min(it.I_zeta, it.I_nu, it.I_P, it.outer_rounds) < 1:
            raise ConfigurationError("iteration budgets must be >= 1")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.num_users, self.num_sbs, self.num_rbs

    @property
    def p_max_w(self) -> np.ndarray:
        return dbm_to_watt(np.broadcast_to(np.asarray(self.tx_power_dbm, float), (self.num_sbs,)))

    @property
    def backhaul_bps(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.backhaul_capacity_bps, float), (self.num_sbs,)).copy()

    @property
    def backhaul_mbps(self) -> np.ndarray:
        return self.backhaul_bps / 1e6

    def with_backhaul_mbps(self, z: float) -> "ScenarioConfig":
        return replace(self, backhaul_capacity_bps=float(z) * 1e6)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        for name in ("tx_power_dbm", "backhaul_capacity_bps"):
            if isinstance(d[name], tuple):
                d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "iters" in kwargs and isinstance(kwargs["iters"], dict):
            kwargs["iters"] = Iterations(**kwargs["iters"])
        if "steps" in kwargs and isinstance(kwargs["steps"], dict):
            kwargs["steps"] = Steps(**kwargs["steps"])
        return cls(**kwargs)


def load_config(path: str | Path) -> ScenarioConfig:
    """Read a JSON config; keys mirror the ``ScenarioConfig`` fields."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ConfigurationError("config file must hold a JSON object")
    return ScenarioConfig.from_dict(data)


def dbm_to_watt(x):
    """Convert dBm to watts (works elementwise on arrays)."""
    return 10.0 ** ((np.asarray(x, dtype=float) - 30.0) / 10.0) if np.ndim(x) else 10.0 ** ((x - 30.0) / 10.0)


def noise_power(cfg: ScenarioConfig) -> float:
    """Per-RB noise power in watts."""
    return float(dbm_to_watt(cfg.noise_psd_dbm_hz + 10.0 * np.log10(cfg.rb_bandwidth_hz)))


def pathloss_db(d, a_db: float = 38.0, b: float = 30.0):
    return a_db + b * np.log10(np.maximum(d, MIN_DISTANCE_M))


@dataclass(frozen=True)
class ChannelTensor:
    """Linear power gains ``gains[i, j, c]`` from SBS j to user i on RB c."""

    gains: np.ndarray
    sbs_xy: np.ndarray | None = None
    user_xy: np.ndarray | None = None

    def __post_init__(self) -> None:
        g = np.asarray(self.gains, dtype=float)
        if g.ndim != 3:
            raise ValueError("gains must have shape (N, J, C)")
        if not (np.all(np.isfinite(g)) and np.all(g > 0)):
            raise ValueError("gains must be strictly positive and finite")
        object.__setattr__(self, "gains", g)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.gains.shape


def _uniform_disk(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    r = radius * np.sqrt(rng.random(n))
    theta = 2.0 * np.pi * rng.random(n)
    return np.column_stack((r * np.cos(theta), r * np.sin(theta)))


def _drop_sbs(rng: np.random.Generator, num_sbs: int, radius: float, min_sep: float) -> np.ndarray:
    placed: list[np.ndarray] = []
    retries = 0
    while len(placed) < num_sbs:
        cand = _uniform_disk(rng, 1, radius)[0]
        if all(np.hypot(*(cand - q)) >= min_sep for q in placed):
            placed.append(cand)
            continue
        retries += 1
        if retries > PLACEMENT_RETRIES:
            raise ConfigurationError(
                f"could not place {num_sbs} SBSs with separation {min_sep:.1f} m"
            )
    return np.array(placed)


def generate_instance(cfg: ScenarioConfig) -> ChannelTensor:
    """Draw SBS/user positions and Rayleigh block fading for ``cfg``.

    SBSs are dropped uniformly in the cluster disk with a minimum pairwise
    separation of one tenth of the diameter; users are uniform in the same
    disk. Power fading is unit-mean exponential, i.i.d. over (user, SBS, RB).
    """
    rng = np.random.default_rng(cfg.rng_seed)
    radius = cfg.cluster_diameter_m / 2.0
    sbs = _drop_sbs(rng, cfg.num_sbs, radius, cfg.cluster_diameter_m / 10.0)
    users = _uniform_disk(rng, cfg.num_users, radius)
    dist = np.linalg.norm(users[:, None, :] - sbs[None, :, :], axis=-1)
    large_scale = 10.0 ** (-pathloss_db(dist, cfg.pathloss_a_db, cfg.pathloss_b) / 10.0)
    fading = rng.exponential(1.0, size=cfg.shape)
    return ChannelTensor(large_scale[:, :, None] * fading, sbs_xy=sbs, user_xy=users)
