"""Reference methods: exhaustive search, max-rate greedy and a genetic algorithm.

All three work on a fixed rate tensor (fixed power). Exhaustive search is
only meant for tiny instances; it enumerates both halves of the slot list
separately and combines them block by block, which keeps memory bounded.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .radio import FEAS_TOL_REL, Assignment, utility_value
from .ua_ra import greedy_assignment

__all__ = [
    "OracleResult",
    "OracleLimitError",
    "GaParams",
    "brute_force",
    "greedy_max_rate",
    "genetic_opt",
    "BRUTE_FORCE_LIMIT",
]

BRUTE_FORCE_LIMIT = 10**7
_BLOCK_CELLS = 1 << 20  # combined (A-row, B-row) pairs evaluated per block


class OracleLimitError(ValueError):
    """The instance has more assignments than the enumeration limit allows."""


@dataclass
class OracleResult:
    X: Assignment | None
    U: float
    num_enumerated: int
    num_feasible: int

    @property
    def feasible_set_empty(self) -> bool:
        return self.num_feasible == 0


def _half_tables(R2: np.ndarray, slots: list[int], sbs_of: np.ndarray, J: int):
    """Digits, partial throughputs and partial loads of every assignment of ``slots`` (lex order)."""
    N = R2.shape[0]
    # an empty half has exactly one (empty) assignment
    digits = np.array(list(product(range(N), repeat=len(slots))), dtype=np.int64).reshape(N ** len(slots), len(slots))
    M = digits.shape[0]
    lam = np.zeros((M, N))
    load = np.zeros((M, J))
    rows = np.arange(M)
    for t, s in enumerate(slots):
        r = R2[digits[:, t], s]
        lam[rows, digits[:, t]] += r
        load[:, sbs_of[s]] += r
    return digits, lam, load


def brute_force(R: np.ndarray, Z=np.inf, limit: int = BRUTE_FORCE_LIMIT) -> OracleResult:
    """Best backhaul-feasible assignment by full enumeration.

    Slots are ordered row-major over (SBS, RB), and ties go to the
    lexicographically smallest ``user_of`` sequence. Raises
    :class:`OracleLimitError` if ``N ** (J*C)`` exceeds ``limit``.
    """
    N, J, C = R.shape
    S = J * C
    total = N**S
    if total > limit:
        raise OracleLimitError(f"{N}^{S} = {total} assignments exceed the limit {limit}")
    Z = np.broadcast_to(np.asarray(Z, dtype=float), (J,))
    zcap = Z + FEAS_TOL_REL * Z
    R2 = R.reshape(N, S)
    sbs_of = np.repeat(np.arange(J), C)

    h = S // 2
    dA, lamA, loadA = _half_tables(R2, list(range(h)), sbs_of, J)
    dB, lamB, loadB = _half_tables(R2, list(range(h, S)), sbs_of, J)
    nB = dB.shape[0]
    step = max(1, _BLOCK_CELLS // nB)

    # when even the heaviest assignment fits, the load check can be skipped
    slack = bool(np.all(R.max(axis=0).sum(axis=1) <= zcap))

    best_u, best_code = -np.inf, None
    n_feas = 0
    for a0 in range(0, dA.shape[0], step):
        a1 = min(a0 + step, dA.shape[0])
        if slack:
            feas = np.ones((a1 - a0, nB), dtype=bool)
        else:
            feas = np.all(loadA[a0:a1, None, :] + loadB[None, :, :] <= zcap, axis=-1)
        k = int(feas.sum())
        if k == 0:
            continue
        n_feas += k
        with np.errstate(divide="ignore"):
            U = np.log(lamA[a0:a1, None, :] + lamB[None, :, :]).sum(axis=-1)
        U = np.where(feas, U, -np.inf)
        flat = int(np.argmax(U))
        u = float(U.flat[flat])
        if u == -np.inf:
            # every feasible entry starves someone; keep the first feasible one
            flat = int(np.argmax(feas))
        if best_code is None or u > best_u:
            best_u, best_code = u, (a0 + flat // nB, flat % nB)

    if best_code is None:
        return OracleResult(None, -np.inf, total, 0)
    user_of = np.concatenate((dA[best_code[0]], dB[best_code[1]])).reshape(J, C)
    return OracleResult(Assignment(user_of, N), best_u, total, n_feas)


def greedy_max_rate(R: np.ndarray) -> Assignment:
    """Each (SBS, RB) goes to the user with the largest rate; ties to the lowest index."""
    return greedy_assignment(R)


@dataclass(frozen=True)
class GaParams:
    pop: int = 100
    crossover_frac: float = 0.8
    max_gen: int = 200
    elite: int = 50
    tournament: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.pop < 1 or self.max_gen < 0 or self.tournament < 1:
            raise ValueError("pop and tournament must be >= 1, max_gen >= 0")
        if not 0 <= self.elite <= self.pop:
            raise ValueError("elite must lie in [0, pop]")
        if not 0.0 <= self.crossover_frac <= 1.0:
            raise ValueError("crossover_frac must lie in [0, 1]")


def _fitness(genes: np.ndarray, R2: np.ndarray) -> np.ndarray:
    P, S = genes.shape
    lam = np.zeros((P, R2.shape[0]))
    rows = np.arange(P)
    for s in range(S):
        lam[rows, genes[:, s]] += R2[genes[:, s], s]
    with np.errstate(divide="ignore"):
        return np.log(lam).sum(axis=1)


def genetic_opt(R: np.ndarray, params: GaParams | None = None, history: list | None = None):
    """Genetic search over assignments at fixed power, ignoring backhaul.

    A chromosome holds one user index per (SBS, RB). Each generation keeps
    the ``elite`` best, fills ``crossover_frac`` of the rest with uniform
    crossover children of tournament winners and the remainder with mutated
    copies (each gene redrawn with probability ``1 / (J*C)``). If
    ``history`` is a list, the best fitness of every generation is appended.

    Returns ``(Assignment, U)``.
    """
    params = params or GaParams()
    N, J, C = R.shape
    S = J * C
    R2 = R.reshape(N, S)
    rng = np.random.default_rng(params.seed)
    rate = 1.0 / S

    genes = rng.integers(0, N, size=(params.pop, S))
    fit = _fitness(genes, R2)

    def tournament(k: int) -> np.ndarray:
        cand = rng.integers(0, params.pop, size=(k, params.tournament))
        # first maximum wins, so equal fitness goes to the earlier draw
        return cand[np.arange(k), np.argmax(fit[cand], axis=1)]

    for _ in range(params.max_gen):
        order = np.argsort(-fit, kind="stable")
        if history is not None:
            history.append(float(fit[order[0]]))
        rest = params.pop - params.elite
        n_x = int(round(params.crossover_frac * rest))
        n_m = rest - n_x

        a, b = tournament(n_x), tournament(n_x)
        mask = rng.random((n_x, S)) < 0.5
        kids_x = np.where(mask, genes[a], genes[b])

        kids_m = genes[tournament(n_m)].copy()
        hit = rng.random(kids_m.shape) < rate
        kids_m[hit] = rng.integers(0, N, size=int(hit.sum()))

        kids = np.concatenate((kids_x, kids_m))
        genes = np.concatenate((genes[order[: params.elite]], kids))
        fit = np.concatenate((fit[order[: params.elite]], _fitness(kids, R2)))

    i = int(np.argmax(fit))
    if history is not None:
        history.append(float(fit[i]))
    X = Assignment(genes[i].reshape(J, C), N)
    return X, utility_value(np.bincount(genes[i], weights=R2[genes[i], np.arange(S)], minlength=N))
