"""Batch experiment runner: backhaul sweeps x trials x methods -> CSV/JSON.

Usage::

    smallcell-pf --preset high --sweep 20,40,60,80,100 --trials 20 --out runs/fig4

Trial ``t`` uses channel seed ``base_seed + t`` for every method and every
backhaul point, so methods are compared on identical channels. Output rows
are sorted by (method, backhaul, seed) before writing, so the files do not
depend on the number of worker processes.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .baselines import BRUTE_FORCE_LIMIT, GaParams, brute_force, genetic_opt, greedy_max_rate
from .radio import PowerMatrix, compute_rates, is_feasible, sbs_loads, utility
from .scenario import PRESETS, ConfigurationError, ScenarioConfig, generate_instance, load_config, noise_power
from .solver import solve_joint

log = logging.getLogger("smallcell_pf")

METHODS = ("proposed_high", "proposed_low", "greedy", "ga", "brute")
SUMMARY_COLUMNS = ["method", "backhaul_mbps", "seed", "utility_nats", "feasible", "min_slack_mbps", "wall_ms"]
CONVERGENCE_COLUMNS = ["method", "backhaul_mbps", "seed", "round", "stage", "iteration", "utility_nats"]
DEFAULT_SWEEP = (20.0, 40.0, 60.0, 80.0, 100.0)


@dataclass
class ExperimentSpec:
    base: ScenarioConfig
    sweep: tuple[float, ...] = DEFAULT_SWEEP
    trials: int = 1
    methods: tuple[str, ...] = ("proposed_high", "proposed_low", "greedy")
    out: Path = Path("results")
    threads: int = 1
    timing: bool = True
    ga: GaParams = field(default_factory=GaParams)

    def validate(self) -> None:
        if self.trials < 1:
            raise ConfigurationError("trials must be >= 1")
        if not self.sweep:
            raise ConfigurationError("sweep list is empty")
        if any(b <= a for a, b in zip(self.sweep, self.sweep[1:])):
            raise ConfigurationError("sweep values must be strictly increasing")
        if any(not z > 0 for z in self.sweep):
            raise ConfigurationError("backhaul values must be positive")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown or not self.methods:
            raise ConfigurationError(f"unknown methods {unknown}; choose from {list(METHODS)}")
        N, J, C = self.base.shape
        if "brute" in self.methods and N ** (J * C) > BRUTE_FORCE_LIMIT:
            raise ConfigurationError(f"brute needs N^(J*C) <= {BRUTE_FORCE_LIMIT}, got {N}^{J * C}")
        if self.threads < 1:
            raise ConfigurationError("threads must be >= 1")

    def seeds(self) -> list[int]:
        return [self.base.rng_seed + t for t in range(self.trials)]

    def to_dict(self) -> dict:
        return {
            "base": self.base.to_dict(),
            "sweep_backhaul_mbps": list(self.sweep),
            "trials": self.trials,
            "seeds": self.seeds(),
            "methods": list(self.methods),
            "timing": self.timing,
            "ga": {k: getattr(self.ga, k) for k in ("pop", "crossover_frac", "max_gen", "elite", "tournament", "seed")},
        }


def _common_scale_restore(X, H, P, Z, noise_w, W) -> PowerMatrix:
    """Scale every SBS by one common factor until all backhauls hold (bisection)."""
    def loads(s):
        return sbs_loads(X, compute_rates(H, P.p * s, noise_w, W))

    if np.all(loads(1.0) <= Z):
        return P
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if np.all(loads(mid) <= Z):
            lo = mid
        else:
            hi = mid
    return PowerMatrix(P.p * lo, P.p_max)


def run_one(method: str, cfg: ScenarioConfig, ga: GaParams | None = None, keep_convergence: bool = False):
    """Solve one (method, backhaul, seed) cell; returns (summary row, convergence rows)."""
    t0 = time.perf_counter()
    H = generate_instance(cfg)
    noise_w, W, Z = noise_power(cfg), cfg.rb_bandwidth_hz, cfg.backhaul_mbps
    conv = []
    if method.startswith("proposed_"):
        res = solve_joint(H, replace(cfg, iters=PRESETS[method.split("_", 1)[1]]), keep_convergence)
        U, ok, slack = res.U, res.feasible, res.min_slack
        conv = res.convergence
    else:
        P = PowerMatrix.uniform(cfg.p_max_w, cfg.num_rbs)
        R = compute_rates(H, P, noise_w, W)
        if method == "greedy":
            X = greedy_max_rate(R)
            P = _common_scale_restore(X, H, P, Z, noise_w, W)
            R = compute_rates(H, P, noise_w, W)
        elif method == "ga":
            history = [] if keep_convergence else None
            X, _ = genetic_opt(R, replace(ga or GaParams(), seed=cfg.rng_seed), history)
            conv = [{"round": 1, "stage": "ga", "iteration": g, "utility": u} for g, u in enumerate(history or [])]
        else:
            X = brute_force(R, Z).X
            if X is None:
                X = greedy_max_rate(R)  # nothing feasible exists; report the unconstrained fallback as infeasible
        rep = utility(X, R)
        U, slack = rep.utility, float((Z - sbs_loads(X, R)).min())
        ok = is_feasible(X, R, Z, P)[0]
        if method == "greedy" and keep_convergence:
            conv = [{"round": 1, "stage": "greedy", "iteration": 0, "utility": U}]
    wall_ms = (time.perf_counter() - t0) * 1e3
    row = {
        "method": method,
        "backhaul_mbps": float(cfg.backhaul_mbps[0]),
        "seed": cfg.rng_seed,
        "utility_nats": U,
        "feasible": bool(ok),
        "min_slack_mbps": slack,
        "wall_ms": wall_ms,
    }
    return row, conv


def _task(args):
    method, cfg, ga, keep = args
    try:
        return run_one(method, cfg, ga, keep), None
    except Exception as exc:  # recorded and turned into a nonzero exit code
        return None, f"{method} backhaul={cfg.backhaul_mbps[0]:g} seed={cfg.rng_seed}: {exc!r}"


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    return str(v)


def _write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def run_experiment(spec: ExperimentSpec) -> int:
    """Run every (method, backhaul, trial) cell and write the three output files.

    Returns the number of failed runs.
    """
    spec.validate()
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    first_seed = spec.base.rng_seed
    tasks = [
        (m, replace(spec.base, rng_seed=s).with_backhaul_mbps(z), spec.ga, s == first_seed)
        for m in spec.methods
        for z in spec.sweep
        for s in spec.seeds()
    ]
    log.info("running %d solves on %d worker(s)", len(tasks), spec.threads)
    if spec.threads > 1:
        with ProcessPoolExecutor(max_workers=spec.threads) as pool:
            results = list(pool.map(_task, tasks, chunksize=1))
    else:
        results = [_task(t) for t in tasks]

    summary, conv, failures = [], [], []
    for (res, err), (m, cfg, _, _) in zip(results, tasks):
        if err is not None:
            failures.append(err)
            log.error("run failed: %s", err)
            continue
        row, trace = res
        if not spec.timing:
            row["wall_ms"] = 0.0
        summary.append(row)
        conv.extend({"method": m, "backhaul_mbps": row["backhaul_mbps"], "seed": row["seed"],
                     "round": t["round"], "stage": t["stage"], "iteration": t["iteration"],
                     "utility_nats": t["utility"]} for t in trace)

    summary.sort(key=lambda r: (r["method"], r["backhaul_mbps"], r["seed"]))
    # the sort is stable, so rows of one run keep their iteration order
    conv.sort(key=lambda r: (r["method"], r["backhaul_mbps"], r["seed"]))
    _write_csv(out / "summary.csv", SUMMARY_COLUMNS, summary)
    _write_csv(out / "convergence.csv", CONVERGENCE_COLUMNS, conv)
    with open(out / "spec.json", "w", encoding="utf-8") as fh:
        json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return len(failures)


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smallcell-pf", description=__doc__.split("\n\n")[0])
    p.add_argument("--config", type=Path, help="JSON file with ScenarioConfig fields")
    p.add_argument("--preset", choices=sorted(PRESETS), help="iteration budgets for the base config")
    p.add_argument("--sweep", type=_float_list, default=DEFAULT_SWEEP, help="backhaul values in Mbit/s, comma separated")
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--methods", default="proposed_high,proposed_low,greedy",
                   help=f"comma separated subset of {','.join(METHODS)}")
    p.add_argument("--out", type=Path, default=Path("results"))
    p.add_argument("--seed", type=int, help="base channel seed (default: the config's rng_seed)")
    p.add_argument("--threads", type=int, default=1, help="worker processes")
    p.add_argument("--no-timing", action="store_true", help="write wall_ms as 0 so reruns are byte-identical")
    p.add_argument("--ga-generations", type=int, default=GaParams.max_gen)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        try:
            base = load_config(args.config) if args.config else ScenarioConfig()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config: {exc}") from exc
        if args.preset:
            base = replace(base, iters=PRESETS[args.preset])
        if args.seed is not None:
            base = replace(base, rng_seed=args.seed)
        spec = ExperimentSpec(
            base=base,
            sweep=tuple(args.sweep),
            trials=args.trials,
            methods=tuple(m.strip() for m in args.methods.split(",") if m.strip()),
            out=args.out,
            threads=args.threads,
            timing=not args.no_timing,
            ga=GaParams(max_gen=args.ga_generations),
        )
        failures = run_experiment(spec)
    except (ConfigurationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: cannot write results: {exc}", file=sys.stderr)
        return 1
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
