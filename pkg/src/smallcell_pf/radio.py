"""Shannon rates, proportional-fair utility and backhaul bookkeeping.

Conventions used across the package:

* gains ``H[i, j, c]`` are linear power gains, shape (N, J, C);
* powers ``P.p[j, c]`` are in watts;
* rates are in Mbit/s, so the bandwidth enters formulas as ``W / 1e6``;
* an assignment stores one served user per (SBS, RB) in ``user_of[j, c]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PowerMatrix",
    "Assignment",
    "UtilityReport",
    "compute_rates",
    "served_rates",
    "throughputs",
    "sbs_loads",
    "utility",
    "utility_value",
    "backhaul_slack",
    "is_feasible",
    "FEAS_TOL_REL",
]

FEAS_TOL_REL = 1e-9
POWER_TOL_REL = 1e-12


@dataclass
class PowerMatrix:
    """Per-(SBS, RB) transmit powers with per-SBS sum caps (watts)."""

    p: np.ndarray
    p_max: np.ndarray

    def __post_init__(self):
        self.p = np.array(self.p, dtype=float)
        self.p_max = np.broadcast_to(np.asarray(self.p_max, dtype=float), (self.p.shape[0],)).copy()
        if self.p.ndim != 2:
            raise ValueError("p must have shape (J, C)")

    @classmethod
    def uniform(cls, p_max, num_rbs: int) -> "PowerMatrix":
        p_max = np.asarray(p_max, dtype=float)
        return cls(np.repeat((p_max / num_rbs)[:, None], num_rbs, axis=1), p_max)

    def copy(self) -> "PowerMatrix":
        return PowerMatrix(self.p.copy(), self.p_max.copy())

    @property
    def sums(self) -> np.ndarray:
        return self.p.sum(axis=1)

    def violations(self) -> list[str]:
        out = []
        neg = np.argwhere(self.p < 0)
        for j, c in neg:
            out.append(f"negative power at sbs {j} rb {c}")
        over = np.nonzero(self.sums > self.p_max * (1.0 + POWER_TOL_REL))[0]
        for j in over:
            out.append(f"sum power of sbs {j} exceeds p_max")
        return out


@dataclass
class Assignment:
    """User association plus RB allocation: ``user_of[j, c]`` serves RB c of SBS j."""

    user_of: np.ndarray
    num_users: int = field(default=-1)

    def __post_init__(self):
        self.user_of = np.array(self.user_of, dtype=np.int64)
        if self.user_of.ndim != 2:
            raise ValueError("user_of must have shape (J, C)")
        if self.num_users < 0:
            self.num_users = int(self.user_of.max()) + 1
        if self.user_of.min() < 0 or self.user_of.max() >= self.num_users:
            raise ValueError("user index out of range")

    def copy(self) -> "Assignment":
        return Assignment(self.user_of.copy(), self.num_users)

    def indicator(self) -> np.ndarray:
        """Dense binary tensor x[i, j, c]."""
        J, C = self.user_of.shape
        x = np.zeros((self.num_users, J, C), dtype=np.int8)
        jj, cc = np.indices((J, C))
        x[self.user_of, jj, cc] = 1
        return x

    def __eq__(self, other) -> bool:
        return isinstance(other, Assignment) and np.array_equal(self.user_of, other.user_of)


@dataclass
class UtilityReport:
    throughput: np.ndarray  # lambda_i, Mbit/s
    utility: float  # nats, -inf if someone starves
    load: np.ndarray  # per SBS, Mbit/s
    slack: np.ndarray | None = None  # Z_j - load_j when Z given


def _gains(H) -> np.ndarray:
    return H.gains if hasattr(H, "gains") else np.asarray(H, dtype=float)


def _powers(P) -> np.ndarray:
    return P.p if isinstance(P, PowerMatrix) else np.asarray(P, dtype=float)


def compute_rates(H, P, noise_w: float, bandwidth_hz: float) -> np.ndarray:
    """Rate tensor ``r[i, j, c]`` in Mbit/s for every (user, SBS, RB) triple.

    Interference on RB c seen by user i is everything received on c except
    the SBS under consideration.
    """
    g = _gains(H)
    p = _powers(P)
    rx = g * p[None, :, :]
    interference = np.maximum(rx.sum(axis=1, keepdims=True) - rx, 0.0)
    return (bandwidth_hz / 1e6) * np.log2(1.0 + rx / (noise_w + interference))


def served_rates(X: Assignment, R: np.ndarray) -> np.ndarray:
    """Rate of the served user on each (j, c), shape (J, C)."""
    J, C = X.user_of.shape
    jj, cc = np.indices((J, C))
    return R[X.user_of, jj, cc]


def throughputs(X: Assignment, R: np.ndarray) -> np.ndarray:
    return np.bincount(X.user_of.ravel(), weights=served_rates(X, R).ravel(), minlength=R.shape[0])


def sbs_loads(X: Assignment, R: np.ndarray) -> np.ndarray:
    return served_rates(X, R).sum(axis=1)


def utility_value(lam: np.ndarray) -> float:
    """Sum of log throughputs; ``-inf`` when any user gets nothing."""
    if np.any(lam <= 0):
        return -np.inf
    return float(np.sum(np.log(lam)))


def utility(X: Assignment, R: np.ndarray, Z=None) -> UtilityReport:
    lam = throughputs(X, R)
    load = sbs_loads(X, R)
    slack = None if Z is None else np.asarray(Z, dtype=float) - load
    return UtilityReport(lam, utility_value(lam), load, slack)


def backhaul_slack(X: Assignment, R: np.ndarray, Z) -> np.ndarray:
    """Remaining backhaul ``L_j = Z_j - load_j`` (Mbit/s); negative means overload."""
    return np.asarray(Z, dtype=float) - sbs_loads(X, R)


def is_feasible(X: Assignment, R: np.ndarray, Z, P: PowerMatrix | None = None, tol_rel: float = FEAS_TOL_REL):
    """Check backhaul and power constraints.

    Returns ``(ok, violations)`` where ``violations`` is a list of readable
    strings naming the offending SBS.
    """
    Z = np.broadcast_to(np.asarray(Z, dtype=float), (R.shape[1],))
    slack = backhaul_slack(X, R, Z)
    problems = [
        f"backhaul of sbs {j} exceeded by {-slack[j]:.6g} Mbit/s"
        for j in np.nonzero(slack < -tol_rel * Z)[0]
    ]
    if P is not None:
        problems.extend(P.violations())
    return (not problems), problems
