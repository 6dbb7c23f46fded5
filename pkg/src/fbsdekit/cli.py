"""Command line driver.

    fbsde-bench simulate    --config cfg.ini --out DIR [--seed S]
    fbsde-bench solve-bcos  --config cfg.ini --out DIR [--seed S] [--runs R]
    fbsde-bench solve-deep  --config cfg.ini --out DIR [--seed S] [--runs R]
    fbsde-bench convergence --config cfg.ini --out DIR [--runs R] [--workers W]
    fbsde-bench report      --out DIR

Outputs: errors_run<r>.csv, summary.csv, convergence.csv, seeds.json.  All
CSV content except the runtime column is byte-deterministic for a fixed
config and seed.  Partial outputs are removed when a pipeline fails.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .bench import (
    convergence_study,
    write_convergence_csv,
    write_curves_csv,
    write_errors_csv,
    write_summary_csv,
)
from .config import build_model, parse_config, run_solver
from .exceptions import ConfigError
from .grids import make_grid, sample_brownian
from .seeds import TEST, derive_seed
from .simulate import euler_maruyama, exact_paths


def _build_parser():
    p = argparse.ArgumentParser(prog="fbsde-bench")
    sub = p.add_subparsers(dest="pipeline", required=True)
    for name in ("simulate", "solve-bcos", "solve-deep", "convergence"):
        q = sub.add_parser(name)
        q.add_argument("--config", required=True)
        q.add_argument("--seed", type=int, default=None)
        q.add_argument("--out", default=".")
        q.add_argument("--runs", type=int, default=None)
        q.add_argument("--workers", type=int, default=1)
    q = sub.add_parser("report")
    q.add_argument("--out", default=".")
    return p


class _OutputTracker:
    """Tracks files written by a pipeline so failures leave no partial output."""

    def __init__(self, out_dir):
        self.out_dir = out_dir
        self.paths = []
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name):
        p = os.path.join(self.out_dir, name)
        self.paths.append(p)
        return p

    def cleanup(self):
        for p in self.paths:
            if os.path.exists(p):
                os.unlink(p)


def _write_seed_audit(tracker, cfg, extra=None):
    audit = {"root_seed": cfg.seed, "namespaces": {
        "train": "derive(run_seed, 'train', stage, phase, iteration)",
        "test": "derive(run_seed, 'test')",
        "init": "derive(run_seed, 'init', role)",
    }}
    audit.update(extra or {})
    with open(tracker.path("seeds.json"), "w") as fh:
        json.dump(audit, fh, indent=2, sort_keys=True)


def _pipeline_simulate(cfg, tracker):
    model = build_model(cfg)
    grid = make_grid(model.T, cfg.N)
    seed = derive_seed(cfg.seed, TEST)
    dW = sample_brownian(grid, model.d, cfg.report_M, seed)
    paths = euler_maruyama(model, dW)
    rows = []
    exact = None
    if model.is_abm or model.has_lambda_paths:
        exact = exact_paths(model, dW)
    with open(tracker.path("simulate.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["n", "t", "mean_x", "var_x"]
        if exact is not None:
            header.append("mse_vs_exact")
        w.writerow(header)
        for n in range(grid.N + 1):
            row = [n, repr(float(grid.nodes[n])),
                   repr(float(np.mean(paths.X[n]))),
                   repr(float(np.var(paths.X[n])))]
            if exact is not None:
                gap = float(np.mean(np.sum((paths.X[n] - exact.X[n]) ** 2, axis=1)))
                row.append(repr(gap))
            w.writerow(row)
            rows.append(row)
    _write_seed_audit(tracker, cfg)
    line = (f"simulate model={model.name} d={model.d} N={grid.N} "
            f"B={cfg.report_M} terminal_mean={rows[-1][2]}")
    print(line)
    return line


def _pipeline_solve(cfg, tracker, runs):
    model = build_model(cfg)
    grid = make_grid(model.T, cfg.N)
    deep = cfg.solver in ("osm-p", "osm-d", "dbdp1")
    reports = []
    for r in range(runs):
        seed_r = derive_seed(cfg.seed, "run", r)
        ckpt = None
        if deep and cfg.checkpoints:
            ckpt = os.path.join(tracker.out_dir, f"checkpoints_run{r}")
        rep, solution = run_solver(cfg, model, grid, seed_r, run=r,
                                   checkpoint_dir=ckpt)
        write_errors_csv(rep, tracker.path(f"errors_run{r}.csv"))
        if deep:
            write_curves_csv(solution, tracker.path(f"curves_run{r}.csv"))
        reports.append(rep)
    write_summary_csv(reports, tracker.path("summary.csv"))
    _write_seed_audit(tracker, cfg)
    for rep in reports:
        print(rep.summary_line())
    if len(reports) > 1:
        print(
            f"aggregate runs={len(reports)} "
            f"mean_max_mse_y={np.mean([r.max_mse_y for r in reports]):.3e} "
            f"mean_max_mse_z={np.mean([r.max_mse_z for r in reports]):.3e} "
            f"mean_rel_y0={np.mean([r.rel_y0 for r in reports]):.3e}"
        )
    return reports


def _pipeline_convergence(cfg, tracker, runs, workers):
    Ns = cfg.Ns or (4, 8, 16, 32, 64)
    table = convergence_study(cfg, Ns, runs=runs, workers=workers)
    write_convergence_csv(table, tracker.path("convergence.csv"))
    _write_seed_audit(tracker, cfg)
    slopes = " ".join(f"slope[{k}]={v:+.3f}" for k, v in table.slopes.items())
    line = f"convergence solver={cfg.solver} model={cfg.model_name} {slopes}"
    print(line)
    return table


def _pipeline_report(out_dir):
    path = os.path.join(out_dir, "summary.csv")
    if not os.path.exists(path):
        print(f"no summary.csv under {out_dir}", file=sys.stderr)
        return 1
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            print(" ".join(f"{k}={v}" for k, v in row.items()))
    return 0


def run_experiment(config_path, pipeline: str = "solve-bcos",
                   seed: int | None = None, out: str = ".",
                   runs: int | None = None, workers: int = 1):
    """Execute one named pipeline from a config file, writing its CSV/JSON
    artifacts under `out` and echoing a summary line.

    Returns the pipeline result (list of ErrorReport for solve pipelines, a
    ConvergenceTable for convergence, the summary line for simulate).
    Partial outputs are removed if the pipeline fails.
    """
    cfg = parse_config(config_path)
    if seed is not None:
        cfg.seed = seed
    if runs is None:
        runs = cfg.runs
    tracker = _OutputTracker(out)
    try:
        if pipeline == "simulate":
            return _pipeline_simulate(cfg, tracker)
        if pipeline == "solve-bcos":
            if cfg.solver != "bcos":
                cfg.solver = "bcos"
            return _pipeline_solve(cfg, tracker, runs)
        if pipeline == "solve-deep":
            if cfg.solver not in ("osm-p", "osm-d", "dbdp1"):
                raise ConfigError(
                    "solver.kind",
                    f"solve-deep needs a deep solver, got {cfg.solver!r}",
                )
            return _pipeline_solve(cfg, tracker, runs)
        if pipeline == "convergence":
            return _pipeline_convergence(cfg, tracker, runs, workers)
        raise ConfigError("pipeline", f"unknown pipeline {pipeline!r}")
    except Exception:
        tracker.cleanup()
        raise


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.pipeline == "report":
        return _pipeline_report(args.out)
    try:
        run_experiment(
            args.config, pipeline=args.pipeline, seed=args.seed,
            out=args.out, runs=args.runs, workers=args.workers,
        )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
