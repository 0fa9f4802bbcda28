"""Compiled inner loops of the power exchange.

Plain loops over the served links of one or two RB columns. They mirror the
numpy expressions in :mod:`power_control` one to one and exist only because
the exchange loop calls them thousands of times per solve.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

INV_LN2 = 1.0 / math.log(2.0)


@njit(cache=True)
def set_column(S, S_own, user_of, Wm, p, c, col, D, Dp, rates, lam, load):
    J = S.shape[0]
    for b in range(J):
        p[b, c] = col[b]
    for k in range(J):
        d = 1.0
        for b in range(J):
            d += S[k, b, c] * col[b]
        dp = d - S_own[k, c] * col[k]
        r = Wm * math.log(d / dp) * INV_LN2
        delta = r - rates[k, c]
        lam[user_of[k, c]] += delta
        load[k] += delta
        D[k, c] = d
        Dp[k, c] = dp
        rates[k, c] = r


@njit(cache=True)
def _link(S, S_own, D, Dp, p, k, j, c):
    """``sigma``, ``tau`` and ``g = sigma - tau`` of served link (k, c) for power at SBS j.

    For k != j the difference is formed as ``-S sig / (D D')`` with
    ``sig = D - D'`` the link's own received power, which avoids cancelling
    two nearly equal reciprocals.
    """
    s = S[k, j, c] / D[k, c]
    if k == j:
        return s, 0.0, s
    t = S[k, j, c] / Dp[k, c]
    return s, t, -s * (S_own[k, c] * p[k, c]) / Dp[k, c]


@njit(cache=True)
def marg_row(S, S_own, user_of, lam, D, Dp, p, j, coef, out):
    """Marginals of SBS j on every RB; returns False if a served user starves."""
    J, _, C = S.shape
    for c in range(C):
        acc = 0.0
        for k in range(J):
            ls = lam[user_of[k, c]]
            if ls <= 0.0:
                return False
            acc += _link(S, S_own, D, Dp, p, k, j, c)[2] / ls
        out[c] = coef * acc
    return True


@njit(cache=True)
def triple(S, S_own, user_of, lam, D, Dp, p, j, c1, c2, coef):
    """Marginal difference f and its first two derivatives along the exchange.

    Power moves into c1 (sign +1) and out of c2 (sign -1). Per link,
    ``g = sigma - tau`` is the marginal factor, ``g' = -sign (sigma^2 - tau^2)``
    and ``g'' = 2 (sigma^3 - tau^3)``. The user weights ``w = 1 / lambda`` move
    too, because the served rates on both RBs change along the exchange.
    """
    J = S.shape[0]
    N = lam.shape[0]
    lp = np.zeros(N)  # d lambda / d delta
    lpp = np.zeros(N)  # d2 lambda / d delta2
    for side in range(2):
        c = c1 if side == 0 else c2
        sg = 1.0 if side == 0 else -1.0
        for k in range(J):
            s, t, g = _link(S, S_own, D, Dp, p, k, j, c)
            u = user_of[k, c]
            lp[u] += coef * sg * g
            lpp[u] -= coef * g * (s + t)
    f = 0.0
    f1 = 0.0
    f2 = 0.0
    for side in range(2):
        c = c1 if side == 0 else c2
        sg = 1.0 if side == 0 else -1.0
        for k in range(J):
            u = user_of[k, c]
            w = 1.0 / lam[u]
            w1 = -w * w * lp[u]
            w2 = 2.0 * w * w * w * lp[u] * lp[u] - w * w * lpp[u]
            s, t, g = _link(S, S_own, D, Dp, p, k, j, c)
            g1 = -sg * g * (s + t)
            g2 = 2.0 * g * (s * s + s * t + t * t)
            f += sg * w * g
            f1 += sg * (w1 * g + w * g1)
            f2 += sg * (w2 * g + 2.0 * w1 * g1 + w * g2)
    return coef * f, coef * f1, coef * f2


@njit(cache=True)
def f_after(S, S_own, user_of, Wm, coef, p, rates, lam, j, c1, c2, dp):
    """Exact marginal difference once ``dp`` moved from c2 to c1, throughputs included."""
    J = S.shape[0]
    lam2 = lam.copy()
    Dn = np.empty((J, 2))
    Dpn = np.empty((J, 2))
    pn = np.empty((J, 2))
    for side in range(2):
        c = c1 if side == 0 else c2
        for k in range(J):
            pn[k, side] = p[k, c]
        pn[j, side] = p[j, c] + dp if side == 0 else max(p[j, c] - dp, 0.0)
        for k in range(J):
            d = 1.0
            for b in range(J):
                d += S[k, b, c] * pn[b, side]
            dpk = d - S_own[k, c] * pn[k, side]
            Dn[k, side] = d
            Dpn[k, side] = dpk
            lam2[user_of[k, c]] += Wm * math.log(d / dpk) * INV_LN2 - rates[k, c]
    v0 = 0.0
    v1 = 0.0
    for side in range(2):
        c = c1 if side == 0 else c2
        for k in range(J):
            ls = lam2[user_of[k, c]]
            if ls <= 0.0:
                # a starved receiver-side user pulls infinitely hard, a starved donor-side user blocks
                return -np.inf if side == 0 else np.inf
            s = S[k, j, c] / Dn[k, side]
            g = s if k == j else -s * (S_own[k, c] * pn[k, side]) / Dpn[k, side]
            if side == 0:
                v0 += g / ls
            else:
                v1 += g / ls
    return coef * (v0 - v1)
