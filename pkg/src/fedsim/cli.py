"""Command-line entry point: ``fedsim <command> --config spec.json --out dir``.

Exit codes: 0 success, 2 configuration error, 3 divergence of a required
(non-grid) run. Logging verbosity comes from ``FEDSIM_LOG``
(``error``, ``info`` or ``debug``).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from fedsim import datasets, engine, experiments, theory
from fedsim.errors import ConfigError, DatasetFormatError

log = logging.getLogger("fedsim")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


def _write_csv(path: Path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _setup_logging():
    level = os.environ.get("FEDSIM_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError(f"FEDSIM_LOG must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s")


def _prepare_runs(spec, args, base_dir, required_key=None):
    problem = experiments.build_problem(experiments._require(spec, "problem", "spec"), base_dir)
    base = dict(spec.get("base", {}))
    if args.seed is not None:
        base["seed"] = args.seed
    grid = spec.get("grid")
    if required_key is not None and (not isinstance(grid, dict) or required_key not in grid):
        raise ConfigError(f"grid: sweep needs a {required_key!r} list")
    expanded = experiments.expand_grid(base, grid)
    runs = [(coords, experiments.config_from_dict(merged, problem)) for coords, merged in expanded]
    eps = spec.get("target_loss")
    return problem, runs, (None if eps is None else float(eps)), sorted(grid) if grid else []


def _write_outcomes(out: Path, outcomes, keys, extra_cols=(), extra=None):
    header = ["run", *keys, "status", "rounds", "rounds_to_eps", "final_loss", "diverged_at", *extra_cols,
              "trajectory"]
    rows = []
    for i, oc in enumerate(outcomes):
        name = f"run_{i:04d}.csv"
        engine.write_trajectory(oc.records, out / name)
        more = [] if extra is None else extra(i)
        rows.append([i, *(oc.coords[k] for k in keys), oc.status, len(oc.records), oc.rounds_to_eps,
                     oc.final_loss, oc.diverged_at, *more, name])
    _write_csv(out / "summary.csv", header, rows)


def cmd_run(spec, args, base_dir, out) -> int:
    problem, runs, eps, keys = _prepare_runs(spec, args, base_dir)
    outcomes = experiments.run_grid(problem, runs, eps, args.jobs)
    _write_outcomes(out, outcomes, keys)
    if not keys and outcomes[0].status == "diverged":
        log.error("run diverged at step %s", outcomes[0].diverged_at)
        return EXIT_DIVERGED
    return EXIT_OK


def _sweep(spec, args, base_dir, out, key) -> int:
    problem, runs, eps, keys = _prepare_runs(spec, args, base_dir, required_key=key)
    if eps is None:
        raise ConfigError("sweeps need target_loss")
    outcomes = experiments.run_grid(problem, runs, eps, args.jobs)
    cfgs = [cfg for _, cfg in runs]
    # one constant estimate; G is the largest probe gradient norm unless given
    c = theory.estimate_constants(problem.objective, E=1, K=cfgs[0].K, G=spec.get("G"),
                                  batch_size=cfgs[0].batch_size)

    def bracket(i):
        cfg = cfgs[i]
        K = None if cfg.scheme.value == "full" else cfg.K
        return [theory.predict_comm_rounds(c.with_(E=cfg.E, K=K), K=K, E=cfg.E)]

    _write_outcomes(out, outcomes, keys, ["predicted_bracket"], bracket)
    return EXIT_OK


def cmd_sweep_e(spec, args, base_dir, out) -> int:
    return _sweep(spec, args, base_dir, out, "E")


def cmd_sweep_k(spec, args, base_dir, out) -> int:
    return _sweep(spec, args, base_dir, out, "K")


def cmd_counterexample(spec, args, base_dir, out) -> int:
    N, p, mu = int(spec.get("N", 5)), int(spec.get("p", 4)), float(spec.get("mu", 2e-4))
    etas = spec.get("etas", [1e-3, 1e-4])
    Es = spec.get("E", [1, 2, 4, 8])
    if not etas or not Es:
        raise ConfigError("counterexample: etas and E must be non-empty")
    rows = experiments.counterexample_table(N, p, mu, [float(e) for e in etas], [int(e) for e in Es])
    _write_csv(out / "counterexample.csv",
               ["eta", "E", "gap_actual", "gap_bound", "fixed_point_residual", "rounds", "flag"],
               [[r.eta, r.E, r.gap_actual, r.gap_bound, r.fixed_point_residual, r.rounds, r.flag] for r in rows])
    decay = spec.get("decay")
    if decay:
        E = int(decay.get("E", 4))
        rounds = int(decay.get("rounds", 10_000))
        drows = []
        for a in decay.get("a", [1e-2, 1e-4, 1e-6]):
            dist, _ = experiments.decayed_counterexample_run(N, p, mu, E, rounds, float(decay.get("num", 0.2)),
                                                             float(decay.get("den", 5.0)), float(a))
            drows.append([float(a), E, rounds, dist])
        _write_csv(out / "decay.csv", ["a", "E", "rounds", "final_dist_opt"], drows)
    return EXIT_OK


def cmd_validate(spec, args, base_dir, out) -> int:
    problem = experiments.build_problem(experiments._require(spec, "problem", "spec"), base_dir)
    base = experiments._require(spec, "base", "spec")
    cfg = experiments.config_from_dict(base, problem)
    c = theory.estimate_constants(problem.objective, E=cfg.E, K=cfg.K, G=spec.get("G"), batch_size=cfg.batch_size)
    report = engine.validate_schedule(cfg.schedule, c.L, cfg.E, cfg.T)
    doc = {
        "schedule": cfg.schedule.to_dict(),
        "E": cfg.E,
        "T": cfg.T,
        "report": report.to_dict(),
        "constants": {
            "L": c.L, "mu": c.mu, "kappa": c.kappa, "G": c.G, "Gamma": c.Gamma,
            "sigma": c.sigma.tolist(), "tags": c.tags,
        },
        "B": theory.compute_B(c),
    }
    with open(out / "validate.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return EXIT_OK


def cmd_gen_data(spec, args, base_dir, out) -> int:
    block = dict(experiments._require(spec, "problem", "spec"))
    if block.get("kind") != "synthetic":
        raise ConfigError("gen-data: problem.kind must be 'synthetic'")
    if args.seed is not None:
        block["seed"] = args.seed
    ds = experiments.make_synthetic(block)
    name = spec.get("output", "dataset.txt")
    datasets.save(ds, out / name)
    with open(out / "stats.json", "w", encoding="utf-8") as fh:
        json.dump(ds.stats(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "sweep-e": cmd_sweep_e,
    "sweep-k": cmd_sweep_k,
    "counterexample": cmd_counterexample,
    "validate": cmd_validate,
    "gen-data": cmd_gen_data,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsim", description="Deterministic FedAvg simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON experiment spec")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the base seed")
        p.add_argument("--jobs", type=int, default=1, help="parallel runs for grids")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        spec = experiments.load_spec(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](spec, args, Path(args.config).resolve().parent, out)
    except (ConfigError, DatasetFormatError) as exc:
        print(f"fedsim: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
