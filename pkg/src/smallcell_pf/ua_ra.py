"""Cyclic coordinate descent for user association / RB allocation.

Each RB of each SBS is handed to the user maximising ``r (zeta - nu_j)``,
where ``zeta`` is the reciprocal of the user's throughput with that RB
removed and ``nu_j`` prices SBS j's backhaul. Sweeping RBs in row-major order
until nothing moves yields a local optimum in the single-RB-reassignment
sense (a 2-distance ring solution) when no price is active.

The implementation keeps ``lambda`` and ``zeta`` incrementally: a
reassignment touches only the two users involved.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .radio import Assignment, sbs_loads, throughputs, utility_value

__all__ = [
    "PricingState",
    "Algorithm1Result",
    "zeta_of",
    "allocate_rb",
    "sweep",
    "nu_step",
    "run_algorithm1",
    "verify_ring_solution",
    "gap_bound",
    "certify_prices",
    "greedy_assignment",
    "rows_to_csv",
]

NU_CONV_REL = 1e-6
BREAKPOINT_MARGIN = 1e-9
RING_SLACK = 1e-12


def greedy_assignment(R: np.ndarray) -> Assignment:
    """Max-rate rule: each (j, c) goes to the user with the largest rate."""
    return Assignment(np.argmax(R, axis=0), R.shape[0])


def zeta_of(X: Assignment, R: np.ndarray) -> np.ndarray:
    """``zeta[i, j, c] = 1 / (lambda_i - r[i,j,c] x[i,j,c])``; ``+inf`` if that is not positive."""
    lam = throughputs(X, R)
    denom = lam[:, None, None] - R * X.indicator()
    with np.errstate(divide="ignore"):
        return np.where(denom > 0, 1.0 / np.where(denom > 0, denom, 1.0), np.inf)


def _score(r: np.ndarray, zeta: np.ndarray, nu: float) -> np.ndarray:
    # 0 * inf counts as 0: a user with no rate on the RB gains nothing from it
    with np.errstate(invalid="ignore"):
        return np.where(r > 0, r * (zeta - nu), 0.0)


def _pick(scores: np.ndarray, holder: int) -> int:
    best = scores.max()
    if scores[holder] >= best:
        return holder
    return int(np.argmax(scores))


class _State:
    """Mutable working copy: assignment, throughputs, loads and zeta in (J, C, N) layout."""

    def __init__(self, R: np.ndarray, X: Assignment, nu: np.ndarray):
        self.R = R
        self.Rt = np.ascontiguousarray(R.transpose(1, 2, 0))
        self.N, self.J, self.C = R.shape
        self.user_of = X.user_of.copy()
        self.nu = np.asarray(nu, dtype=float).copy()
        self._rebuild()

    def _rebuild(self):
        X = Assignment(self.user_of, self.N)
        self.lam = throughputs(X, self.R)
        self.load = sbs_loads(X, self.R)
        self.zeta = np.ascontiguousarray(zeta_of(X, self.R).transpose(1, 2, 0))

    def refresh_user(self, u: int):
        held = self.user_of == u
        denom = self.lam[u] - self.Rt[:, :, u] * held
        with np.errstate(divide="ignore"):
            self.zeta[:, :, u] = np.where(denom > 0, 1.0 / np.where(denom > 0, denom, 1.0), np.inf)

    def scores(self, j: int, c: int) -> np.ndarray:
        return _score(self.Rt[j, c], self.zeta[j, c], self.nu[j])

    def move(self, j: int, c: int, new: int):
        old = int(self.user_of[j, c])
        r = self.Rt[j, c]
        self.user_of[j, c] = new
        self.lam[old] -= r[old]
        self.lam[new] += r[new]
        # float drift guard: a user left with no RBs has exactly zero throughput
        if not np.any(self.user_of == old):
            self.lam[old] = 0.0
        self.load[j] += r[new] - r[old]
        self.refresh_user(old)
        self.refresh_user(new)

    def fixed_mask(self, j: int | None = None) -> np.ndarray:
        """True where the holder already attains the allocation maximum."""
        sl = slice(None) if j is None else slice(j, j + 1)
        r = self.Rt[sl]
        nu = self.nu[sl][:, None, None]
        sc = _score(r, self.zeta[sl], nu)
        held = np.take_along_axis(sc, self.user_of[sl][:, :, None], axis=2)[:, :, 0]
        return held >= sc.max(axis=2)

    def assignment(self) -> Assignment:
        return Assignment(self.user_of.copy(), self.N)

    def utility(self) -> float:
        return utility_value(throughputs(Assignment(self.user_of, self.N), self.R))


@dataclass
class PricingState:
    zeta: np.ndarray  # (N, J, C)
    nu: np.ndarray
    alpha: float = 1e-4
    history: list = field(default_factory=list)  # (outer, j, nu_before, nu_after)

    @classmethod
    def initial(cls, R: np.ndarray, X: Assignment, nu=None, alpha: float = 1e-4) -> "PricingState":
        J = R.shape[1]
        nu = np.zeros(J) if nu is None else np.asarray(nu, dtype=float).copy()
        return cls(zeta_of(X, R), nu, alpha)


def allocate_rb(j: int, c: int, R: np.ndarray, ps: PricingState, X: Assignment) -> int:
    """Winner of RB c at SBS j under the current prices.

    The current holder keeps the RB on ties; otherwise the lowest index wins.
    """
    scores = _score(R[:, j, c], ps.zeta[:, j, c], ps.nu[j])
    return _pick(scores, int(X.user_of[j, c]))


def _sweep_state(st: _State, j: int) -> bool:
    # a pass makes no change exactly when every RB of j is already at its maximum
    if st.fixed_mask(j).all():
        return False
    changed = False
    for c in range(st.C):
        holder = int(st.user_of[j, c])
        new = _pick(st.scores(j, c), holder)
        if new != holder:
            st.move(j, c, new)
            changed = True
    return changed


def sweep(X: Assignment, R: np.ndarray, ps: PricingState, sbs=None):
    """One row-major pass over the RBs of ``sbs`` (all SBSs if None).

    Returns the new assignment and whether anything moved; ``ps.zeta`` is
    updated in place.
    """
    st = _State(R, X, ps.nu)
    js = range(st.J) if sbs is None else [sbs]
    changed = False
    for j in js:
        changed |= _sweep_state(st, j)
    ps.zeta = np.ascontiguousarray(st.zeta.transpose(2, 0, 1))
    return st.assignment(), changed


def _breakpoints(st: _State, j: int) -> np.ndarray:
    """Price values of SBS j at which some RB would change hands."""
    r = st.Rt[j]  # (C, N)
    z = st.zeta[j]
    h = st.user_of[j]
    cols = np.arange(st.C)
    rh = r[cols, h][:, None]
    zh = z[cols, h][:, None]
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        beta = (r * z - rh * zh) / (r - rh)
    ok = np.isfinite(beta) & np.isfinite(z) & np.isfinite(zh) & (r != rh) & (r > 0)
    ok[cols, h] = False
    return beta[ok]


def _nu_step_state(st: _State, j: int, Z: np.ndarray, alpha: float) -> float:
    d = Z[j] - st.load[j]
    nu = st.nu[j]
    if d == 0.0:
        return nu
    beta = _breakpoints(st, j)
    alpha_dyn = alpha
    if d < 0:
        above = beta[beta > nu]
        if above.size:
            b = above.min()
            target = b + BREAKPOINT_MARGIN * max(abs(b), 1e-9)
            alpha_dyn = max(alpha, abs(nu - target) / abs(d))
    else:
        below = beta[beta < nu]
        if below.size:
            b = below.max()
            target = b - BREAKPOINT_MARGIN * max(abs(b), 1e-9)
            alpha_dyn = max(alpha, abs(nu - target) / abs(d))
    new = max(nu - alpha_dyn * d, 0.0)
    st.nu[j] = new
    return new


def nu_step(j: int, X: Assignment, R: np.ndarray, Z, ps: PricingState) -> float:
    """Move ``nu_j`` against the backhaul subgradient, jumping to the nearest breakpoint.

    ``ps.nu`` is updated in place and the new value returned.
    """
    Z = np.broadcast_to(np.asarray(Z, dtype=float), (R.shape[1],))
    st = _State(R, X, ps.nu)
    st.zeta = np.ascontiguousarray(ps.zeta.transpose(1, 2, 0))
    before = float(ps.nu[j])
    new = _nu_step_state(st, j, Z, ps.alpha)
    ps.nu[j] = new
    ps.history.append((len(ps.history), j, before, new))
    return new


@dataclass
class Algorithm1Result:
    X: Assignment
    pricing: PricingState
    utility: float
    feasible: bool
    certified: bool  # X is a fixed point of the priced rule under the reported nu
    converged: bool
    outer_iterations: int
    trace: list  # per outer iteration
    zeta_trace: list  # per (outer, sbs) zeta loop
    stop_reason: str = ""


def run_algorithm1(
    R: np.ndarray,
    Z,
    ps0: PricingState | None = None,
    I_zeta: int = 10,
    I_nu: int = 400,
    X0: Assignment | None = None,
    alpha: float | None = None,
) -> Algorithm1Result:
    """Priced cyclic coordinate descent over (SBS, RB) slots.

    For each SBS the RB sweep is repeated until nothing moves (at most
    ``I_zeta`` passes), then its backhaul price takes one step. The outer
    loop stops once prices have settled, every backhaul holds and the
    assignment did not move, or after ``I_nu`` outer iterations, or when a
    previously visited (assignment, price) state recurs.

    Every backhaul-feasible iterate is offered to :func:`certify_prices`. The
    returned assignment is the best certified one, reported with its
    certificate prices, so it is an exact fixed point of the allocation rule
    under ``pricing.nu``. Without any certified point the best feasible
    iterate is returned, and failing that the final iterate with
    ``feasible=False``.
    """
    if I_zeta < 1 or I_nu < 1:
        raise ValueError("iteration budgets must be >= 1")
    N, J, C = R.shape
    Z = np.broadcast_to(np.asarray(Z, dtype=float), (J,)).copy()
    X = X0 if X0 is not None else greedy_assignment(R)
    nu0 = np.zeros(J) if ps0 is None else ps0.nu
    alpha = alpha if alpha is not None else (ps0.alpha if ps0 is not None else 1e-4)
    st = _State(R, X, nu0)
    history = list(ps0.history) if ps0 is not None else []

    best = None  # (U, user_of, nu, certified)
    fallback = None
    trace, zeta_trace = [], []
    seen = set()
    converged = False
    reason = "budget"
    outer = 0

    for outer in range(1, I_nu + 1):
        x_before = st.user_of.copy()
        nu_before = st.nu.copy()
        st._rebuild()  # drop accumulated rounding in lambda / load
        for j in range(J):
            passes, done = 0, False
            while passes < I_zeta:
                passes += 1
                if not _sweep_state(st, j):
                    done = True
                    break
            zeta_trace.append({"outer": outer, "sbs": j, "passes": passes, "converged": done})

            Xc = Assignment(st.user_of, N)
            if np.all(sbs_loads(Xc, R) <= Z):
                U = st.utility()
                if fallback is None or U > fallback[0]:
                    fallback = (U, st.user_of.copy(), st.nu.copy(), False)
                if best is None or U > best[0]:
                    nu_cert = certify_prices(Xc, R)
                    if nu_cert is not None:
                        best = (U, st.user_of.copy(), nu_cert, True)

            before = float(st.nu[j])
            _nu_step_state(st, j, Z, alpha)
            history.append((len(history), j, before, float(st.nu[j])))

        U = st.utility()
        trace.append({
            "outer": outer,
            "utility": U,
            "min_slack": float((Z - st.load).min()),
            "max_nu": float(st.nu.max()),
            "load": st.load.copy(),
            "nu": st.nu.copy(),
        })
        nu_settled = np.all(np.abs(st.nu - nu_before) <= NU_CONV_REL * np.maximum(1.0, st.nu))
        if nu_settled and np.all(st.load <= Z) and np.array_equal(x_before, st.user_of):
            converged = True
            reason = "converged"
            break
        key = st.user_of.tobytes() + st.nu.tobytes()
        if key in seen:
            reason = "cycle"
            break
        seen.add(key)

    pick = best or fallback
    if pick is None:
        pick = (st.utility(), st.user_of.copy(), st.nu.copy(), False)
        feasible = False
    else:
        feasible = True
    U, user_of, nu, certified = pick
    Xout = Assignment(user_of, N)
    ps = PricingState(zeta_of(Xout, R), nu.copy(), alpha, history)
    return Algorithm1Result(Xout, ps, U, feasible, certified, converged, outer, trace, zeta_trace, reason)


def certify_prices(X: Assignment, R: np.ndarray, max_nudges: int = 8):
    """Smallest prices under which ``X`` is a fixed point of the allocation rule.

    For fixed X each rival i of the holder h on (j, c) imposes a linear
    condition ``nu_j (r_i - r_h) >= r_i zeta_i - r_h zeta_h`` on the price of
    SBS j alone, so the admissible prices form one interval per SBS. Returns
    the lower ends (clipped at zero) or ``None`` if some interval is empty.
    The choice is confirmed with the same floating-point test the sweep uses.
    """
    N, J, C = R.shape
    zeta = zeta_of(X, R)
    jj, cc = np.indices((J, C))
    rh = R[X.user_of, jj, cc][None]
    zh = zeta[X.user_of, jj, cc][None]
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        rhs = np.where(rh > 0, rh * zh, 0.0) - np.where(R > 0, R * zeta, 0.0)
        rhs = -rhs  # need nu * (r_i - r_h) >= r_i zeta_i - r_h zeta_h
        diff = R - rh
    rival = np.ones(R.shape, dtype=bool)
    rival[X.user_of, jj, cc] = False
    lo = np.zeros(J)
    hi = np.full(J, np.inf)
    for j in range(J):
        rv, d, b = rival[:, j], diff[:, j], rhs[:, j]
        if np.any(rv & np.isnan(b)):
            return None
        inf_rival = rv & np.isposinf(b)  # rival has infinite priority: no price helps
        if np.any(inf_rival & (d <= 0)):
            return None
        ok = rv & np.isfinite(b)
        zero = ok & (d == 0)
        if np.any(zero & (b > 0)):
            return None
        up = ok & (d > 0)
        dn = ok & (d < 0)
        if np.any(up):
            lo[j] = max(0.0, float((b[up] / d[up]).max()))
        if np.any(dn):
            hi[j] = float((b[dn] / d[dn]).min())
        if lo[j] > hi[j]:
            return None
    st = _State(R, X, lo)
    for _ in range(max_nudges):
        fixed = st.fixed_mask()
        if fixed.all():
            return st.nu.copy()
        bad = ~fixed.all(axis=1)
        st.nu[bad] = st.nu[bad] * (1.0 + 1e-12) + 1e-300
        if np.any(st.nu > hi * (1.0 + 1e-9)):
            return None
    return None


def _neighbor_gaps(X: Assignment, R: np.ndarray) -> np.ndarray:
    """``U(X') - U(X)`` for every single-slot reassignment, shape (N, J, C); holders get -inf."""
    N = R.shape[0]
    J, C = X.user_of.shape
    jj, cc = np.indices((J, C))
    lam = throughputs(X, R)
    if np.all(lam > 0):
        zeta = zeta_of(X, R)
        rh = R[X.user_of, jj, cc]
        zh = zeta[X.user_of, jj, cc]
        with np.errstate(invalid="ignore"):
            loss = np.where(rh > 0, np.log1p(rh * zh), 0.0)
            gaps = np.log1p(R * zeta) - loss[None]
        # taking the holder's only RB starves it, whatever the rival gains
        gaps[:, np.isinf(loss)] = -np.inf
    else:
        # U(X) = -inf: a neighbour improves exactly when it feeds everybody
        gaps = np.zeros((N, J, C))
        for j in range(J):
            for c in range(C):
                h = X.user_of[j, c]
                for i in range(N):
                    lam2 = lam.copy()
                    lam2[h] -= R[h, j, c]
                    lam2[i] += R[i, j, c]
                    if np.all(lam2 > 0):
                        gaps[i, j, c] = np.inf
    gaps[X.user_of, jj, cc] = -np.inf
    return gaps


def verify_ring_solution(X: Assignment, R: np.ndarray) -> dict:
    """Check that no single (j, c) reassignment raises the utility.

    Enumerates all ``J C (N - 1)`` neighbours. ``worst_neighbor_gap`` is the
    largest ``U(X') - U(X)``; anything above 1e-12 nats counts as improving.
    """
    N = R.shape[0]
    if N == 1:
        return {"is_ring": True, "worst_neighbor_gap": 0.0, "num_neighbors": 0}
    gaps = _neighbor_gaps(X, R)
    worst = float(gaps.max())
    return {
        "is_ring": bool(worst <= RING_SLACK),
        "worst_neighbor_gap": worst,
        "num_neighbors": int(X.user_of.size * (N - 1)),
    }


def gap_bound(X: Assignment, R: np.ndarray, Z, ps: PricingState) -> float:
    """``max_j eps_j nu_j`` with ``eps_j`` the remaining backhaul of SBS j."""
    eps = np.broadcast_to(np.asarray(Z, dtype=float), (R.shape[1],)) - sbs_loads(X, R)
    if np.any(eps < 0):
        raise ValueError(f"gap bound needs nonnegative backhaul slack, got {eps.min():.6g}")
    return float(np.max(eps * ps.nu))


def rows_to_csv(rows: list[dict], fh=None) -> str:
    """Serialise trace rows; array-valued fields are expanded per index."""
    flat = []
    for row in rows:
        out = {}
        for k, v in row.items():
            if isinstance(v, np.ndarray):
                for idx, x in enumerate(v):
                    out[f"{k}_{idx}"] = repr(float(x))
            elif isinstance(v, float):
                out[k] = repr(v)
            else:
                out[k] = v
        flat.append(out)
    buf = fh or io.StringIO()
    if flat:
        writer = csv.DictWriter(buf, fieldnames=list(flat[0].keys()), lineterminator="\n")
        writer.writeheader()
        writer.writerows(flat)
    return buf.getvalue() if fh is None else ""
