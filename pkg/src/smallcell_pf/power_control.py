"""Per-RB power exchange for a fixed assignment.

Within one SBS, power is moved from the RB with the smallest marginal utility
(among active RBs) to the RB with the largest, by the root of a second-order
model of the marginal difference, clipped so no SBS exceeds its backhaul.
When the marginals of an SBS are equalised at a negative level its total
power is reduced. SBSs are processed one after another, and the passes are
repeated until a full pass leaves every SBS untouched.

All marginals are exact derivatives of the utility in nats per watt. The
first and second derivatives along an exchange are exact as well: next to
the per-link terms they carry the change of the served users' throughputs,
which is small once throughputs are large compared with one RB's bandwidth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from . import _kernels as _k
from .radio import Assignment, PowerMatrix, utility_value

__all__ = [
    "DerivativeTriple",
    "PcResult",
    "PcModel",
    "marginal_utility",
    "select_rb_pair",
    "derivatives",
    "delta_p_star",
    "delta_p_cap",
    "apply_exchange",
    "adjust_total_power",
    "run_pc",
    "StarvedUserError",
    "NoDonorError",
]

LN2 = math.log(2.0)


class StarvedUserError(ValueError):
    pass


class NoDonorError(ValueError):
    pass


class PcModel:
    """Served-link view of one assignment.

    ``S[k, b, c]`` is the gain from SBS b to the user served by SBS k on RB c,
    divided by the noise power, so that ``D[k, c] = 1 + sum_b S[k, b, c] p[b, c]``.
    Everything the power loop needs (served rates, throughputs, marginals,
    derivatives) follows from S and the current powers.
    """

    def __init__(self, X: Assignment, H, noise_w: float, bandwidth_hz: float):
        g = H.gains if hasattr(H, "gains") else np.asarray(H, dtype=float)
        self.N, self.J, self.C = g.shape
        self.user_of = np.ascontiguousarray(X.user_of, dtype=np.int64)
        cc = np.arange(self.C)[None, :]
        # g[user_of[k, c], b, c] arranged as (k, b, c)
        self.S = np.ascontiguousarray(g[self.user_of, :, cc].transpose(0, 2, 1)) / noise_w
        self.S_own = np.ascontiguousarray(np.einsum("kkc->kc", self.S))
        self.S_off = self.S.copy()
        self.S_off[np.arange(self.J), np.arange(self.J)] = 0.0  # interference links only
        self.Wm = bandwidth_hz / 1e6
        self.coef = self.Wm / LN2

    def denominators(self, p: np.ndarray):
        D = 1.0 + np.einsum("kbc,bc->kc", self.S, p)
        Dp = D - self.S_own * p
        return D, Dp

    def rb_denominators(self, p: np.ndarray, c: int):
        D = 1.0 + self.S[:, :, c] @ p[:, c]
        return D, D - self.S_own[:, c] * p[:, c]

    def served_rates(self, p: np.ndarray) -> np.ndarray:
        D, Dp = self.denominators(p)
        return self.Wm * np.log2(D / Dp)

    def throughputs(self, p: np.ndarray) -> np.ndarray:
        return np.bincount(self.user_of.ravel(), weights=self.served_rates(p).ravel(), minlength=self.N)

    def loads(self, p: np.ndarray) -> np.ndarray:
        return self.served_rates(p).sum(axis=1)

    def utility(self, p: np.ndarray) -> float:
        return utility_value(self.throughputs(p))

    def _weights(self, p: np.ndarray) -> np.ndarray:
        lam = self.throughputs(p)
        if np.any(lam[self.user_of] <= 0):
            raise StarvedUserError("a served user has zero throughput")
        return 1.0 / lam[self.user_of]

    def marginals(self, p: np.ndarray) -> np.ndarray:
        """``dU/dp[j, c]`` for all SBSs and RBs, shape (J, C)."""
        D, Dp = self.denominators(p)
        wt = self._weights(p)
        own = self.S_own * wt / D
        # 1/D - 1/D' = -(S_own p) / (D D'), written without the subtraction
        cross = np.einsum("kjc,kc->jc", self.S_off, wt * self.S_own * p / (D * Dp))
        return self.coef * (own - cross)


def marginal_utility(j: int, c: int, X: Assignment, H, P: PowerMatrix, noise_w: float, bandwidth_hz: float) -> float:
    """Exact ``dU/dp_j^(c)`` in nats per watt."""
    return float(PcModel(X, H, noise_w, bandwidth_hz).marginals(P.p)[j, c])


def _select(m: np.ndarray, p_row: np.ndarray, blocked=()):
    active = p_row > 0
    if blocked:
        active = active.copy()
        active[list(blocked)] = False
    if not np.any(active):
        raise NoDonorError("no active RB left to donate power")
    c1 = int(np.argmax(m))
    masked = np.where(active, m, np.inf)
    c2 = int(np.argmin(masked))
    return c1, c2


def select_rb_pair(j: int, X: Assignment, H, P: PowerMatrix, noise_w: float, bandwidth_hz: float):
    """Receiver RB (largest marginal, any power) and donor RB (smallest marginal, positive power)."""
    if not np.any(P.p[j] > 0):
        raise NoDonorError(f"sbs {j} has no RB with positive power")
    m = PcModel(X, H, noise_w, bandwidth_hz).marginals(P.p)[j]
    return _select(m, P.p[j])


@dataclass
class DerivativeTriple:
    f: float  # marginal difference, nats/W
    f1: float  # first derivative along the exchange, nats/W^2
    f2: float  # second derivative, nats/W^3


def _triple(model: PcModel, p: np.ndarray, j: int, c1: int, c2: int) -> DerivativeTriple:
    D, Dp = model.denominators(p)
    model._weights(p)  # raises on a starved served user
    lam = model.throughputs(p)
    return DerivativeTriple(*_k.triple(model.S, model.S_own, model.user_of, lam, D, Dp, p, j, c1, c2, model.coef))


def derivatives(j, c1, c2, X, H, P, noise_w, bandwidth_hz) -> DerivativeTriple:
    return _triple(PcModel(X, H, noise_w, bandwidth_hz), P.p, j, c1, c2)


def _root(d: DerivativeTriple, p_scale: float) -> float:
    f, f1, f2 = d.f, d.f1, d.f2
    if f == 0.0:
        return 0.0
    if abs(f2) < 1e-12 * abs(f1) / max(p_scale, 1e-12):
        return -f / f1 if f1 != 0.0 else 0.0
    disc = f1 * f1 - 2.0 * f2 * f
    if disc < 0:
        # the quadratic model never reaches zero; go to its turning point
        return -f1 / f2
    sgn = math.copysign(1.0, f1) if f1 != 0.0 else 0.0
    den = f1 + sgn * math.sqrt(disc)
    if den == 0.0:
        return 0.0
    # same root as (-f' + sgn(f') sqrt(disc)) / f'', written without cancellation
    return -2.0 * f / den


def delta_p_star(j, c1, c2, X, H, P, noise_w, bandwidth_hz) -> float:
    """Exchange that zeroes the second-order model of the marginal difference (watts)."""
    if c1 == c2:
        raise ValueError("c1 and c2 must differ")
    d = derivatives(j, c1, c2, X, H, P, noise_w, bandwidth_hz)
    return _root(d, max(P.p[j, c1], P.p[j, c2]))


def _cap(model: PcModel, p: np.ndarray, j: int, c1: int, c2: int, slack: np.ndarray) -> float:
    Wm = model.Wm
    L = np.maximum(slack, 0.0)
    donor = p[j, c2]
    cap = donor
    others = np.arange(model.J) != j
    if np.any(others):
        with np.errstate(over="ignore"):
            cap = min(cap, float(np.min(donor * (1.0 - np.exp2(-L[others] / Wm)))))
    with np.errstate(over="ignore"):
        growth = np.exp2(L[j] / Wm) - 1.0
    if p[j, c1] > 0:
        recv = p[j, c1] * growth
    else:
        # a silent RB: the exact headroom is (2^{L/W} - 1)(p + 1/a) with a the link SINR per watt
        _, Dp = model.rb_denominators(p, c1)
        a = model.S_own[j, c1] / Dp[j]
        recv = growth / a if growth > 0 else 0.0
    return float(min(cap, recv))


def delta_p_cap(j, c1, c2, X, R, Z, P: PowerMatrix, bandwidth_hz, H=None, noise_w=None) -> float:
    """Largest exchange that cannot push any SBS over its backhaul (watts).

    ``R`` is the rate tensor in Mbit/s. ``H`` and ``noise_w`` are only needed
    when RB ``c1`` is currently silent.
    """
    from .radio import sbs_loads

    slack = np.asarray(Z, dtype=float) - sbs_loads(X, R)
    Wm = bandwidth_hz / 1e6
    L = np.maximum(slack, 0.0)
    donor = P.p[j, c2]
    cap = donor
    J = P.p.shape[0]
    others = np.arange(J) != j
    with np.errstate(over="ignore"):
        if np.any(others):
            cap = min(cap, float(np.min(donor * (1.0 - np.exp2(-L[others] / Wm)))))
        growth = np.exp2(L[j] / Wm) - 1.0
    if P.p[j, c1] > 0:
        return float(min(cap, P.p[j, c1] * growth))
    if H is None or noise_w is None:
        return 0.0
    return _cap(PcModel(X, H, noise_w, bandwidth_hz), P.p, j, c1, c2, slack)


def apply_exchange(j: int, c1: int, c2: int, dp: float, P: PowerMatrix) -> PowerMatrix:
    """Move ``dp`` watts from RB c2 to RB c1 of SBS j (new matrix)."""
    if not (0.0 <= dp <= P.p[j, c2]):
        raise ValueError(f"exchange {dp!r} outside [0, {P.p[j, c2]!r}]")
    out = P.copy()
    if dp == 0.0:
        return out
    out.p[j, c1] += dp
    out.p[j, c2] = 0.0 if dp == P.p[j, c2] else P.p[j, c2] - dp
    return out


def adjust_total_power(j: int, xi: float, gamma: float, P: PowerMatrix, p_max=None) -> PowerMatrix:
    """Scale SBS j's powers so the sum changes by ``min(gamma xi, P_max - sum)``."""
    p_max = P.p_max if p_max is None else np.broadcast_to(np.asarray(p_max, dtype=float), P.p_max.shape)
    total = P.p[j].sum()
    out = P.copy()
    if total <= 0:
        return out
    delta = min(gamma * xi, p_max[j] - total)
    out.p[j] *= max(total + delta, 0.0) / total
    return out


@dataclass
class PcResult:
    P: PowerMatrix
    xi: np.ndarray
    trace: list = field(default_factory=list)
    converged: bool = False
    budget_exhausted: bool = False
    blocked: bool = False  # some SBS stopped with a backhaul-blocked donor
    iterations: int = 0
    utility: float = -np.inf


class _Loop:
    """Incremental bookkeeping for the exchange loop.

    Keeps the per-RB denominators, served rates, throughputs and loads in sync
    with ``p``; an exchange only touches two RB columns.
    """

    def __init__(self, model: PcModel, p: np.ndarray):
        self.m = model
        self.p = p.copy()
        self.resync()

    def resync(self):
        m = self.m
        self.D, self.Dp = m.denominators(self.p)
        self.rates = m.Wm * np.log2(self.D / self.Dp)
        self.lam = np.bincount(m.user_of.ravel(), weights=self.rates.ravel(), minlength=m.N)
        self.load = self.rates.sum(axis=1)

    def set_column(self, c: int, col: np.ndarray):
        m = self.m
        _k.set_column(m.S, m.S_own, m.user_of, m.Wm, self.p, c, col, self.D, self.Dp, self.rates, self.lam, self.load)

    def utility(self) -> float:
        return utility_value(self.lam)

    def marg_row(self, j: int) -> np.ndarray:
        m = self.m
        out = np.empty(m.C)
        if not _k.marg_row(m.S, m.S_own, m.user_of, self.lam, self.D, self.Dp, self.p, j, m.coef, out):
            raise StarvedUserError("a served user has zero throughput")
        return out

    def triple(self, j: int, c1: int, c2: int) -> DerivativeTriple:
        m = self.m
        return DerivativeTriple(*_k.triple(m.S, m.S_own, m.user_of, self.lam, self.D, self.Dp, self.p, j, c1, c2, m.coef))

    def f_after(self, j: int, c1: int, c2: int, dp: float) -> float:
        """Exact marginal difference once ``dp`` has moved from c2 to c1 (throughputs updated too)."""
        m = self.m
        return _k.f_after(m.S, m.S_own, m.user_of, m.Wm, m.coef, self.p, self.rates, self.lam, j, c1, c2, float(dp))

    def exchange(self, j: int, c1: int, c2: int, dp: float):
        col1 = self.p[:, c1].copy()
        col1[j] += dp
        col2 = self.p[:, c2].copy()
        col2[j] = 0.0 if dp >= col2[j] else col2[j] - dp
        self.set_column(c1, col1)
        self.set_column(c2, col2)


def _safeguarded_step(loop: _Loop, j, c1, c2, dstar: float, cap: float) -> float:
    """Exchange size: the second-order root, clipped to ``cap`` and pulled back if it overshoots.

    If the model root would reverse the order of the two marginals, the
    exact marginal difference is solved for zero on ``[0, step]`` instead.
    """
    hi = min(dstar, cap) if dstar > 0 else cap
    if hi <= 0:
        return 0.0
    f_hi = loop.f_after(j, c1, c2, hi)
    if f_hi >= 0:
        return hi
    return float(brentq(lambda d: loop.f_after(j, c1, c2, d), 0.0, hi, xtol=1e-12 * hi, rtol=1e-10, maxiter=100))


def _restore(model: PcModel, p: np.ndarray, Z: np.ndarray, trace: list, it: int) -> np.ndarray:
    """Scale down overloaded SBSs until every backhaul holds.

    Shrinking a group of SBSs lowers their own loads but can raise the
    others', so the group grows until it is stable; with every SBS included
    the common scale lowers all loads at once.
    """
    group = model.loads(p) > Z
    while np.any(group):
        def ok(s):
            q = p.copy()
            q[group] *= s
            return np.all(model.loads(q)[group] <= Z[group])

        lo, hi = 0.0, 1.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if ok(mid):
                lo = mid
            else:
                hi = mid
        q = p.copy()
        q[group] *= lo
        for j in np.nonzero(group)[0]:
            trace.append(_row(it, int(j), "restore", -1, -1, float(q[j].sum() - p[j].sum()),
                              model.utility(q), float((Z - model.loads(q)).min())))
        p = q
        over = model.loads(p) > Z
        if not np.any(over & ~group):
            break
        group = group | over
    return p


def _row(it, j, kind, c1, c2, amount, U, min_slack, xi=float("nan")):
    return {
        "iteration": it,
        "sbs": j,
        "kind": kind,
        "c1": c1,
        "c2": c2,
        "delta_p": amount,
        "xi": xi,
        "utility": U,
        "min_slack": min_slack,
    }


def run_pc(
    X: Assignment,
    H,
    Z,
    P0: PowerMatrix,
    noise_w: float,
    bandwidth_hz: float,
    epsilon_f: float = 1e-9,
    gamma: float | None = None,
    I_P: int = 2000,
) -> PcResult:
    """Power exchange loop for a fixed assignment.

    ``I_P`` bounds the total number of accepted power updates (exchanges and
    sum-power reductions). If the start point overloads some backhaul, the
    offending SBSs are first scaled down (``restore`` rows in the trace). On
    budget exhaustion the best feasible iterate seen is returned with
    ``budget_exhausted=True``. With ``gamma=None`` each sum-power step is
    sized to 5% of the SBS's ``P_max`` (``gamma = 0.05 P_max / |xi_j|``).
    """
    model = PcModel(X, H, noise_w, bandwidth_hz)
    J = model.J
    Z = np.broadcast_to(np.asarray(Z, dtype=float), (J,)).copy()
    p_max = P0.p_max
    trace: list = []
    it = 0

    p0 = P0.p.copy()
    if np.any(model.loads(p0) > Z):
        p0 = _restore(model, p0, Z, trace, it)
    loop = _Loop(model, p0)

    xi = np.full(J, np.nan)
    blocked_any = False
    converged = False
    best = (loop.utility(), loop.p.copy())

    while it < I_P:
        changed_pass = False
        for j in range(J):
            loop.resync()
            blocked: set[int] = set()
            while it < I_P:
                m = loop.marg_row(j)
                try:
                    c1, c2 = _select(m, loop.p[j], blocked)
                except NoDonorError:
                    if np.any(loop.p[j] > 0):
                        blocked_any = True
                    else:
                        xi[j] = float(m.max())
                    break
                f = m[c1] - m[c2]
                if c1 == c2 or f < epsilon_f:
                    xi[j] = float(m[c2])
                    if blocked:
                        blocked_any = True
                    if xi[j] >= -epsilon_f or loop.p[j].sum() <= 1e-6 * p_max[j]:
                        break
                    g = 0.05 * p_max[j] / -xi[j] if gamma is None else gamma
                    q = _reduce(model, loop.p, j, xi[j], g, p_max, Z)
                    if q is None:
                        break
                    it += 1
                    amount = float(q[j].sum() - loop.p[j].sum())
                    loop.p = q
                    loop.resync()
                    trace.append(_row(it, j, "reduce", -1, -1, amount, loop.utility(), float((Z - loop.load).min()), xi[j]))
                    changed_pass = True
                    blocked.clear()
                    continue

                d = loop.triple(j, c1, c2)
                # without a real root the model's vertex can be a vanishing step; search up to the cap instead
                dstar = _root(d, max(loop.p[j, c1], loop.p[j, c2])) if d.f1 * d.f1 >= 2.0 * d.f2 * d.f else np.inf
                cap = _cap(model, loop.p, j, c1, c2, Z - loop.load)
                if _sole_link(model, loop.p, j, c2):
                    cap = min(cap, 0.5 * loop.p[j, c2])
                dp = _safeguarded_step(loop, j, c1, c2, dstar, cap) if cap > 0 else 0.0
                if not dp > 0:
                    blocked.add(c2)
                    continue
                loop.exchange(j, c1, c2, dp)
                it += 1
                changed_pass = True
                blocked.clear()
                U = loop.utility()
                trace.append(_row(it, j, "exchange", c1, c2, float(dp), U, float((Z - loop.load).min())))
                if U > best[0] and np.all(loop.load <= Z * (1 + 1e-9)):
                    best = (U, loop.p.copy())
        if not changed_pass:
            converged = True
            break

    p = loop.p
    exhausted = not converged
    if exhausted and best[0] > loop.utility():
        p = best[1]
    return PcResult(PowerMatrix(p, p_max), xi, trace, converged, exhausted, blocked_any, it, model.utility(p))


def _sole_link(model: PcModel, p: np.ndarray, j: int, c: int) -> bool:
    """True when draining (j, c) would leave its user with no rate at all."""
    u = model.user_of[j, c]
    mine = (model.user_of == u) & (p > 0)
    mine[j, c] = False
    return not np.any(mine)


def _reduce(model, p, j, xi, gamma, p_max, Z, max_halvings: int = 40):
    """Sum-power step for SBS j with backtracking.

    The step is halved until the utility does not drop and no SBS is pushed
    over its backhaul (less power at j means less interference elsewhere,
    hence higher rates there).
    """
    U0 = model.utility(p)
    total = p[j].sum()
    delta = min(gamma * xi, p_max[j] - total)
    for _ in range(max_halvings):
        q = p.copy()
        q[j] *= max(total + delta, 0.0) / total
        if model.utility(q) >= U0 and np.all(model.loads(q) <= Z):
            return q
        delta *= 0.5
    return None
