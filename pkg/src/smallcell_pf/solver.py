"""Alternating UA/RA and power control for one cluster instance."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .power_control import run_pc
from .radio import Assignment, PowerMatrix, compute_rates, is_feasible, sbs_loads, utility
from .scenario import ScenarioConfig, noise_power
from .ua_ra import run_algorithm1

__all__ = ["SolveResult", "solve_joint"]


@dataclass
class SolveResult:
    X: Assignment
    P: PowerMatrix
    U: float
    feasible: bool
    trace: list = field(default_factory=list)  # one row per round
    wall_s: float = 0.0
    violations: list = field(default_factory=list)
    convergence: list = field(default_factory=list)  # per-iteration rows of both stages
    min_slack: float = float("nan")  # Mbit/s, of the returned (X, P)

    def to_dict(self) -> dict:
        return {
            "user_of": self.X.user_of.tolist(),
            "p": self.P.p.tolist(),
            "p_max": self.P.p_max.tolist(),
            "utility": _num(self.U),
            "feasible": bool(self.feasible),
            "min_slack_mbps": _num(self.min_slack),
            "violations": list(self.violations),
            "rounds": [{k: _num(v) for k, v in row.items()} for row in self.trace],
            "wall_s": self.wall_s,
        }


def _num(v):
    # JSON has no infinities; encode them as strings the way Python's float() reads them back
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else repr(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    return v


def _evaluate(H, X, P, Z, noise_w, W):
    R = compute_rates(H, P, noise_w, W)
    ok, problems = is_feasible(X, R, Z, P)
    return utility(X, R).utility, ok, problems, float((Z - sbs_loads(X, R)).min())


def solve_joint(H, cfg: ScenarioConfig, keep_convergence: bool = False) -> SolveResult:
    """Alternate Algorithm 1 (assignment for fixed power) and the power loop.

    Starts from uniform power. Each round re-prices with the rates of the
    current power, warm-started from the previous assignment and prices.
    Stops after ``cfg.iters.outer_rounds`` rounds or when the round-to-round
    utility change falls below ``epsilon_conv`` relative. A last assignment
    pass on the best power matrix is kept only if it is feasible and does
    not lower the utility. The best feasible round-end state is returned.
    """
    t0 = time.perf_counter()
    noise_w = noise_power(cfg)
    W = cfg.rb_bandwidth_hz
    Z = cfg.backhaul_mbps
    it, st = cfg.iters, cfg.steps
    P = PowerMatrix.uniform(cfg.p_max_w, cfg.num_rbs)

    X, ps = None, None
    best = None  # (U, X, P, feasible, problems, slack)
    fallback = None
    trace, conv = [], []
    prev_U = None
    best_U = -np.inf
    for rnd in range(1, it.outer_rounds + 1):
        R = compute_rates(H, P, noise_w, W)
        a = run_algorithm1(R, Z, ps0=ps, I_zeta=it.I_zeta, I_nu=it.I_nu, X0=X, alpha=st.alpha)
        pc = run_pc(a.X, H, Z, P, noise_w, W, epsilon_f=st.epsilon_f, gamma=st.gamma, I_P=it.I_P)
        X, ps, P = a.X, a.pricing, pc.P
        U, ok, problems, slack = _evaluate(H, X, P, Z, noise_w, W)
        cand = (U, X.copy(), P.copy(), ok, problems, slack)
        if ok and (best is None or U > best[0]):
            best = cand
        if fallback is None or U > fallback[0]:
            fallback = cand
        if ok:
            best_U = max(best_U, U)
        xi = pc.xi[np.isfinite(pc.xi)]
        trace.append({
            "round": rnd,
            "kind": "alternation",
            "utility": U,
            "best_utility": best_U,
            "feasible": ok,
            "min_slack": slack,
            "max_nu": float(ps.nu.max()),
            "min_xi": float(xi.min()) if xi.size else float("nan"),
            "ua_iterations": a.outer_iterations,
            "pc_iterations": pc.iterations,
            "pc_converged": pc.converged,
        })
        if keep_convergence:
            conv.extend({"round": rnd, "stage": "ua_ra", "iteration": r["outer"], "utility": r["utility"]} for r in a.trace)
            conv.extend({"round": rnd, "stage": "pc", "iteration": r["iteration"], "utility": r["utility"]} for r in pc.trace)
        if prev_U is not None and math.isfinite(U) and abs(U - prev_U) < st.epsilon_conv * abs(U):
            break
        prev_U = U

    chosen = best if best is not None else fallback
    U, X, P, ok, problems, slack = chosen
    if ok:
        R = compute_rates(H, P, noise_w, W)
        a = run_algorithm1(R, Z, ps0=ps, I_zeta=it.I_zeta, I_nu=it.I_nu, X0=X, alpha=st.alpha)
        U2, ok2, problems2, slack2 = _evaluate(H, a.X, P, Z, noise_w, W)
        if ok2 and U2 >= U:
            X, U, problems, slack = a.X, U2, problems2, slack2
            trace.append({**trace[-1], "round": len(trace) + 1, "kind": "refresh", "utility": U, "best_utility": max(best_U, U),
                          "min_slack": slack, "max_nu": float(a.pricing.nu.max()),
                          "ua_iterations": a.outer_iterations, "pc_iterations": 0})
    # utility and feasibility are reported exactly as a fresh evaluation of (X, P) gives them
    U, ok, problems, slack = _evaluate(H, X, P, Z, noise_w, W)
    return SolveResult(X, P, U, ok, trace, time.perf_counter() - t0, problems, conv, slack)
