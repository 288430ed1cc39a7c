"""Experiment specs, grid expansion and the runners behind the CLI.

A spec is a JSON object::

    {
      "problem": {"kind": "synthetic", "alpha": 1, "beta": 1, "N": 20, "total": 5000},
      "base": {"scheme": "scheme_i", "K": 6, "E": 5, "rounds": 200, "batch_size": 10,
               "schedule": {"kind": "inverse", "eta0": 0.1, "period": "E"}},
      "grid": {"E": [1, 2, 5], "seed": [0, 1]},
      "target_loss": 0.95
    }

``rounds`` (communication rounds) may replace ``T``; then ``T = rounds * E``.
Grid keys are expanded as a Cartesian product in sorted key order and runs
are reported in that order whatever order they finish in.
"""
from __future__ import annotations

import itertools
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fedsim import counterexample as ce
from fedsim import datasets, engine, theory
from fedsim.errors import ConfigError, DivergenceError
from fedsim.objectives import GlobalObjective
from fedsim.sampling import Scheme

RUN_KEYS = {"scheme", "E", "K", "T", "rounds", "batch_size", "schedule", "seed"}


def rounds_to_eps(losses, eps: float) -> int:
    """First 1-based round whose loss is ``<= eps``; ``-1`` if never reached."""
    losses = np.asarray(losses, dtype=np.float64)
    hit = np.flatnonzero(losses <= eps)
    return int(hit[0]) + 1 if hit.size else -1


@dataclass
class Problem:
    objective: GlobalObjective
    w_star: np.ndarray | None
    f_star: float | None
    info: dict = field(default_factory=dict)


def _require(d, key, where):
    if key not in d:
        raise ConfigError(f"{where}: missing key {key!r}")
    return d[key]


def make_synthetic(spec: dict) -> datasets.FederatedDataset:
    """Synthetic dataset from a ``problem`` block (explicit ``sizes`` or power-law ``total``)."""
    N = int(_require(spec, "N", "problem"))
    seed = int(spec.get("seed", 0))
    alpha, beta = float(_require(spec, "alpha", "problem")), float(_require(spec, "beta", "problem"))
    kwargs = dict(n_features=int(spec.get("n_features", 60)), n_classes=int(spec.get("n_classes", 10)))
    try:
        if "sizes" in spec:
            return datasets.generate_synthetic(alpha, beta, N, spec["sizes"], seed=seed, **kwargs)
        return datasets.synthetic_power_law(alpha, beta, N, int(_require(spec, "total", "problem")), seed=seed,
                                            exponent=float(spec.get("exponent", 1.5)),
                                            min_size=int(spec.get("min_size", 10)), **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"problem: {exc}") from exc


def build_problem(spec: dict, base_dir: Path | None = None) -> Problem:
    """Instantiate the problem described by a ``problem`` block."""
    if not isinstance(spec, dict):
        raise ConfigError("problem: expected an object")
    kind = _require(spec, "kind", "problem")
    lam = float(spec.get("lam", 1e-4))
    if kind == "counterexample":
        prob = ce.build(int(spec.get("N", 5)), int(spec.get("p", 4)), float(spec.get("mu", 2e-4)))
        F = prob.objective()
        w_star = ce.optimum(prob)
        return Problem(F, w_star, F.loss(w_star), {"dim": prob.dim})
    if kind == "synthetic":
        ds = make_synthetic(spec)
    elif kind == "file":
        path = Path(_require(spec, "path", "problem"))
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        ds = datasets.load(path)
    else:
        raise ConfigError(f"problem: unknown kind {kind!r}")
    F = ds.objective(lam)
    info = {"n_total": ds.n_total}
    if spec.get("solve", True):
        m = F.minimum()
        return Problem(F, m.w, m.value, info)
    return Problem(F, None, None, info)


def schedule_from_dict(d: dict, E: int, problem: Problem | None = None) -> engine.LrSchedule:
    if not isinstance(d, dict):
        raise ConfigError("schedule: expected an object")
    kind = _require(d, "kind", "schedule")
    try:
        if kind == "constant":
            return engine.LrSchedule.constant(_require(d, "eta", "schedule"))
        if kind == "inverse":
            period = d.get("period", 1)
            period = E if period == "E" else int(period)
            return engine.LrSchedule.inverse(_require(d, "eta0", "schedule"), period)
        if kind == "rational":
            return engine.LrSchedule.rational(d.get("num", 0.2), d.get("den", 5.0), _require(d, "a", "schedule"))
        if kind == "theoretical":
            mu, L = d.get("mu", "auto"), d.get("L", "auto")
            if "auto" in (mu, L):
                if problem is None:
                    raise ConfigError("schedule: 'auto' constants need a problem")
                locs = problem.objective.locals
                mu = min(o.strong_convexity() for o in locs) if mu == "auto" else mu
                L = max(o.smoothness_bound() for o in locs) if L == "auto" else L
            return engine.LrSchedule.theoretical(float(mu), float(L), E, d.get("variant", "reduced"))
    except ValueError as exc:
        raise ConfigError(f"schedule: {exc}") from exc
    raise ConfigError(f"schedule: unknown kind {kind!r}")


def config_from_dict(d: dict, problem: Problem | None = None) -> engine.RunConfig:
    unknown = set(d) - RUN_KEYS
    if unknown:
        raise ConfigError(f"run config: unknown keys {sorted(unknown)}")
    try:
        E = int(_require(d, "E", "run config"))
        if "T" in d:
            T = int(d["T"])
        else:
            T = int(_require(d, "rounds", "run config")) * E
        sched = schedule_from_dict(_require(d, "schedule", "run config"), E, problem)
        return engine.RunConfig(scheme=Scheme(d.get("scheme", "full")), E=E, T=T, schedule=sched,
                                K=d.get("K"), batch_size=d.get("batch_size"), seed=int(d.get("seed", 0)))
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"run config: {exc}") from exc


def expand_grid(base: dict, grid: dict | None) -> list[tuple[dict, dict]]:
    """``[(coords, merged_config)]`` in sorted-key Cartesian order."""
    if grid is None:
        return [({}, dict(base))]
    if not isinstance(grid, dict) or not grid:
        raise ConfigError("grid: expected a non-empty object")
    keys = sorted(grid)
    for k in keys:
        if not isinstance(grid[k], list) or not grid[k]:
            raise ConfigError(f"grid: {k!r} must be a non-empty list")
    out = []
    for values in itertools.product(*(grid[k] for k in keys)):
        coords = dict(zip(keys, values))
        out.append((coords, {**base, **coords}))
    return out


def load_spec(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            spec = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(spec, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return spec


@dataclass
class RunOutcome:
    coords: dict
    status: str  # "ok" or "diverged"
    records: list
    final_loss: float
    rounds_to_eps: int
    diverged_at: int | None = None


def execute(problem: Problem, cfg: engine.RunConfig, coords: dict, eps: float | None) -> RunOutcome:
    try:
        res = engine.run_fedavg(problem.objective, cfg, w_star=problem.w_star)
        status, records, bad = "ok", res.records, None
    except DivergenceError as exc:
        status, records, bad = "diverged", list(exc.records or []), exc.step
    losses = [r.loss for r in records]
    final = losses[-1] if losses and status == "ok" else float("nan")
    r_eps = rounds_to_eps(losses, eps) if eps is not None else -1
    return RunOutcome(coords, status, records, final, r_eps, bad)


def _execute_packed(args):
    return execute(*args)


def run_grid(problem: Problem, runs: list[tuple[dict, engine.RunConfig]], eps: float | None,
             jobs: int = 1) -> list[RunOutcome]:
    """Execute runs, in parallel when ``jobs > 1``; results keep input order."""
    tasks = [(problem, cfg, coords, eps) for coords, cfg in runs]
    if jobs <= 1 or len(tasks) == 1:
        return [execute(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks), os.cpu_count() or 1)) as pool:
        return list(pool.map(_execute_packed, tasks))


def predicted_bracket(problem: Problem, E: int, K: int | None, batch_size: int | None, G: float | None = None):
    c = theory.estimate_constants(problem.objective, E=E, K=K, G=G, batch_size=batch_size)
    return theory.predict_comm_rounds(c, K=K, E=E)


@dataclass
class CounterexampleRow:
    eta: float
    E: int
    gap_actual: float | None
    gap_bound: float | None
    fixed_point_residual: float | None
    rounds: int | None
    flag: str


def counterexample_table(N: int, p: int, mu: float, etas, Es, tol: float = 1e-13) -> list[CounterexampleRow]:
    """Per ``(eta, E)``: iterated fixed point vs. closed form, gap to the optimum and its lower bound."""
    prob = ce.build(N, p, mu)
    w_star = ce.optimum(prob)
    rows = []
    for eta in etas:
        for E in Es:
            if not 0 < eta < ce.max_step_size(prob):
                rows.append(CounterexampleRow(eta, E, None, None, None, None, "eta_out_of_range"))
                continue
            it = ce.iterate_fixed_point(prob, eta, E, tol=tol)
            closed = ce.fedavg_fixed_point(prob, eta, E)
            rows.append(CounterexampleRow(
                eta, E,
                gap_actual=float(np.linalg.norm(it.w - w_star)),
                gap_bound=ce.gap_lower_bound(prob, eta, E, w_star),
                fixed_point_residual=float(np.linalg.norm(it.w - closed)),
                rounds=it.rounds,
                flag="ok",
            ))
    return rows


def decayed_counterexample_run(N: int, p: int, mu: float, E: int, rounds: int, num: float, den: float, a: float):
    """Final distance to the optimum of full-batch FedAvg under ``num / (den + a s)``."""
    prob = ce.build(N, p, mu)
    w_star = ce.optimum(prob)
    cfg = engine.RunConfig(Scheme.FULL, E, rounds * E, engine.LrSchedule.rational(num, den, a))
    res = engine.run_fedavg(prob.objective(), cfg, w_star=w_star)
    return res.records[-1].dist_opt, res
