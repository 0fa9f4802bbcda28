"""Lagrangian dual of the fixed-power association problem.

The dual variables are ``mu`` (one per user, prices the throughput
definition) and ``nu`` (one per SBS, prices backhaul). For given duals the
inner maximisation over assignments decouples per (SBS, RB), which is what
:func:`dual_allocation` computes. :func:`kkt_check` evaluates the optimality
conditions of the dual problem together with the scalar global-optimality
test ``N >= sum_{j,c} max_i r / lambda_i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .radio import Assignment, sbs_loads, throughputs

__all__ = ["DualState", "dual_allocation", "dual_function", "dual_solve", "kkt_check", "KKT_TOL"]

KKT_TOL = 1e-6


@dataclass
class DualState:
    mu: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float).copy()
        self.nu = np.asarray(self.nu, dtype=float).copy()
        if np.any(self.nu < 0):
            raise ValueError("nu must be nonnegative")

    @property
    def lam(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.where(self.mu > 0, 1.0 / self.mu, np.inf)


def _scores(R: np.ndarray, ds: DualState) -> np.ndarray:
    return R * (ds.mu[:, None, None] - ds.nu[None, :, None])


def dual_allocation(R: np.ndarray, ds: DualState) -> Assignment:
    """Per (j, c) pick ``argmax_i r[i,j,c] (mu_i - nu_j)``; ties go to the lowest index."""
    return Assignment(np.argmax(_scores(R, ds), axis=0), R.shape[0])


def dual_function(R: np.ndarray, ds: DualState, Z) -> float:
    if np.any(ds.mu <= 0):
        raise ValueError("dual function needs mu > 0")
    Z = np.broadcast_to(np.asarray(Z, dtype=float), ds.nu.shape)
    inner = _scores(R, ds).max(axis=0).sum()
    nuz = float(np.dot(ds.nu, Z)) if np.any(ds.nu > 0) else 0.0
    return float(-np.log(ds.mu).sum() + inner + nuz - R.shape[0])


def dual_solve(R: np.ndarray, Z, max_iters: int = 500, step: float = 0.5):
    """Minimise the dual function by projected subgradient steps.

    ``mu`` moves multiplicatively (mirror step) which keeps it positive, ``nu``
    takes a projected additive step scaled by ``mean(mu) / Z``. The step at
    iteration t is ``step / sqrt(t)``. The best iterate by dual value is
    returned together with its induced assignment and a trace of dicts.

    Returns
    -------
    ds : DualState
    X : Assignment
    trace : list of dict
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    N, J, _ = R.shape
    Z = np.broadcast_to(np.asarray(Z, dtype=float), (J,)).copy()

    # start from the max-rate assignment priced at its own throughputs
    X0 = Assignment(np.argmax(R, axis=0), N)
    lam0 = throughputs(X0, R)
    fallback = R.sum(axis=(1, 2)) + 1e-300
    mu = 1.0 / np.where(lam0 > 0, lam0, fallback)
    nu = np.zeros(J)

    best = None
    trace = []
    for t in range(1, max_iters + 1):
        ds = DualState(mu, nu)
        X = dual_allocation(R, ds)
        g = dual_function(R, ds, Z)
        if best is None or g < best[0]:
            best = (g, ds, X)
        lam = throughputs(X, R)
        load = sbs_loads(X, R)
        trace.append({"iteration": t, "g": g, "max_nu": float(nu.max())})
        s = step / math.sqrt(t)
        mu = mu * np.exp(-s * np.clip(mu * lam - 1.0, -50.0, 50.0))
        nu = np.maximum(nu - s * mu.mean() * (Z - load) / Z, 0.0)

    # polishing: price every user at the throughput the best allocation gives
    g, ds, X = best
    lam = throughputs(X, R)
    if np.all(lam > 0):
        cand = DualState(1.0 / lam, ds.nu)
        g_c = dual_function(R, cand, Z)
        if g_c <= g:
            ds, g = cand, g_c
            X = dual_allocation(R, ds)
    trace.append({"iteration": max_iters + 1, "g": g, "max_nu": float(ds.nu.max())})
    return ds, X, trace


def kkt_check(R: np.ndarray, Z, ds: DualState, X: Assignment, tol: float = KKT_TOL) -> dict:
    """Evaluate the dual KKT conditions at ``(ds, X)``.

    Residuals are relative: backhaul subgradient against ``Z``, complementary
    slackness against ``nu_j Z_j``, stationarity against ``1 / mu_i`` and the
    global-optimality sum against ``N``. The report holds plain Python types
    so it can be dumped as JSON directly.
    """
    N, J, _ = R.shape
    Z = np.broadcast_to(np.asarray(Z, dtype=float), (J,))
    lam = throughputs(X, R)
    load = sbs_loads(X, R)
    dg_dnu = Z - load

    primal = np.maximum(-dg_dnu, 0.0) / Z
    with np.errstate(divide="ignore", invalid="ignore"):
        comp = np.where(ds.nu > 0, np.abs(ds.nu * dg_dnu) / (ds.nu * Z), 0.0)
        inv_mu = np.where(ds.mu > 0, 1.0 / ds.mu, np.inf)
        stat = np.abs(lam - inv_mu) / inv_mu
        ratio = np.where(lam[:, None, None] > 0, R / lam[:, None, None], np.inf)
    stat = np.where(np.isfinite(stat), stat, np.inf)
    ratio_sum = float(ratio.max(axis=0).sum())
    ratio_res = max(0.0, (ratio_sum - N) / N)

    checks = {
        "backhaul": bool(primal.max() <= tol),
        "complementary_slackness": bool(comp.max() <= tol),
        "stationarity": bool(stat.max() <= tol),
        "dual_feasible": bool(np.all(ds.nu >= 0) and np.all(ds.mu > 0)),
        "global_test": bool(ratio_res <= tol),
    }
    return {
        "satisfied": all(checks.values()),
        "checks": checks,
        "residuals": {
            "backhaul": float(primal.max()),
            "complementary_slackness": float(comp.max()),
            "stationarity": float(stat.max()),
            "global_test": float(ratio_res),
        },
        "dg_dnu": [float(v) for v in dg_dnu],
        "dg_dmu": [float(v) for v in (lam - inv_mu)],
        "ratio_sum": ratio_sum,
        "num_users": int(N),
        "tol": tol,
    }
