"""Error metrics against reference solutions, convergence studies over the
number of time steps, and deterministic CSV reporting."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from multiprocessing import get_context

import numpy as np

from .grids import TimeGrid, make_grid, sample_brownian
from .models import FbsdeModel
from .seeds import TEST, derive_seed
from .simulate import euler_maruyama, exact_paths


def fit_loglog_slope(ns, errors) -> float:
    """Least-squares slope of log(error) against log(n)."""
    ns = np.asarray(ns, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if ns.shape != errors.shape or ns.size < 2:
        raise ValueError("need matching arrays of length >= 2")
    return float(np.polyfit(np.log(ns), np.log(errors), 1)[0])


# ---------------------------------------------------------------------------
# error reports
# ---------------------------------------------------------------------------

@dataclass
class ErrorReport:
    """Per-level and aggregate mean-squared errors of a solution against the
    model's reference, measured on an independent test batch."""

    solver: str
    model_name: str
    d: int
    N: int
    theta_y: float
    run: int
    seed: int
    M: int
    t: np.ndarray = field(repr=False, default=None)
    mse_y: np.ndarray = field(repr=False, default=None)
    mse_z: np.ndarray = field(repr=False, default=None)
    mse_gamma: np.ndarray = field(repr=False, default=None)
    max_mse_y: float = 0.0
    max_mse_z: float = 0.0
    gamma_sum_dt: float = 0.0
    gamma_sigma_weighted: float = 0.0
    rel_y0: float = 0.0
    rel_z0: float = 0.0
    rel_g0: float = 0.0
    runtime_s: float = 0.0
    seed_audit: dict = field(default_factory=dict)

    def summary_row(self) -> dict:
        return {
            "solver": self.solver, "model": self.model_name, "d": self.d,
            "N": self.N, "theta_y": self.theta_y, "run": self.run,
            "seed": self.seed, "max_mse_y": self.max_mse_y,
            "max_mse_z": self.max_mse_z, "gamma_sum_dt": self.gamma_sum_dt,
            "gamma_sigma_weighted": self.gamma_sigma_weighted,
            "rel_y0": self.rel_y0, "rel_z0": self.rel_z0,
            "rel_g0": self.rel_g0, "runtime_s": self.runtime_s,
        }

    def summary_line(self) -> str:
        r = self.summary_row()
        return (
            f"solver={r['solver']} model={r['model']} d={r['d']} N={r['N']} "
            f"max_mse_y={r['max_mse_y']:.3e} max_mse_z={r['max_mse_z']:.3e} "
            f"gamma_sum_dt={r['gamma_sum_dt']:.3e} rel_y0={r['rel_y0']:.3e} "
            f"rel_z0={r['rel_z0']:.3e} runtime_s={r['runtime_s']:.2f}"
        )


def _rel(num: float, den: float) -> float:
    return num / den if den > 0 else num


def evaluate_errors(solution, model: FbsdeModel, grid: TimeGrid,
                    M: int = 2 ** 10, seed: int = 0, solver_id: str = "",
                    theta_y: float = np.nan, run: int = 0,
                    runtime_s: float = 0.0) -> ErrorReport:
    """Simulate M fresh test paths (seed namespace disjoint from training),
    evaluate reference and solution along them at the grid nodes, and
    aggregate per-level and relative-at-origin error metrics."""
    ref = model.require_reference()
    test_seed = derive_seed(seed, TEST)
    audit = {"test": f"derive({seed}, {TEST!r}) = {test_seed}"}
    dW = sample_brownian(grid, model.d, M, test_seed)
    paths = euler_maruyama(model, dW)
    N = grid.N

    mse_y = np.zeros(N + 1)
    mse_z = np.zeros(N + 1)
    mse_g = np.zeros(N + 1)
    gamma_sigma = np.zeros(N + 1)
    for n in range(N + 1):
        t = grid.nodes[n]
        x = paths.X[n]
        y_fn, z_fn, g_fn = solution.stage_triple(n)
        y_ref, z_ref, g_ref = ref(t, x)
        dy = np.asarray(y_fn(x)) - y_ref
        dz = np.asarray(z_fn(x)) - z_ref
        dg = np.asarray(g_fn(x)) - g_ref
        mse_y[n] = np.mean(dy ** 2)
        mse_z[n] = np.mean(np.sum(dz ** 2, axis=1))
        mse_g[n] = np.mean(np.sum(dg ** 2, axis=(1, 2)))
        dgs = np.einsum("bij,bjk->bik", dg, model.sigma(t, x))
        gamma_sigma[n] = np.mean(np.sum(dgs ** 2, axis=(1, 2)))

    x0 = model.x0[None, :]
    y_fn, z_fn, g_fn = solution.stage_triple(0)
    y_ref, z_ref, g_ref = ref(0.0, x0)
    rel_y0 = _rel(abs(float(y_fn(x0)[0]) - float(y_ref[0])), abs(float(y_ref[0])))
    rel_z0 = _rel(
        float(np.linalg.norm(np.asarray(z_fn(x0))[0] - z_ref[0])),
        float(np.linalg.norm(z_ref[0])),
    )
    rel_g0 = _rel(
        float(np.linalg.norm(np.asarray(g_fn(x0))[0] - g_ref[0])),
        float(np.linalg.norm(g_ref[0])),
    )

    dts = grid.dts
    return ErrorReport(
        solver=solver_id, model_name=model.name, d=model.d, N=N,
        theta_y=float(theta_y), run=run, seed=seed, M=M, t=grid.nodes.copy(),
        mse_y=mse_y, mse_z=mse_z, mse_gamma=mse_g,
        max_mse_y=float(np.max(mse_y)), max_mse_z=float(np.max(mse_z)),
        gamma_sum_dt=float(np.sum(dts * mse_g[:N])),
        gamma_sigma_weighted=float(np.sum(dts * gamma_sigma[:N])),
        rel_y0=rel_y0, rel_z0=rel_z0, rel_g0=rel_g0,
        runtime_s=runtime_s, seed_audit=audit,
    )


# ---------------------------------------------------------------------------
# SDE strong errors and regression-target variances
# ---------------------------------------------------------------------------

def sde_strong_errors(model: FbsdeModel, grid: TimeGrid, B: int,
                      seed: int) -> dict:
    """Max-over-n mean-squared gaps of the Euler state and its one-step
    Malliavin derivative against the exact paths on the same noise."""
    dW = sample_brownian(grid, model.d, B, derive_seed(seed, TEST))
    approx = euler_maruyama(model, dW)
    exact = exact_paths(model, dW)
    err_x = np.max(np.mean(np.sum((approx.X - exact.X) ** 2, axis=2), axis=1))
    err_d = np.max(np.mean(
        np.sum((approx.DnX_next - exact.DnX_next) ** 2, axis=(2, 3)), axis=1
    ))
    return {"mse_x": float(err_x), "mse_dnx": float(err_d)}


def z_target_variances(model: FbsdeModel, grid: TimeGrid, B: int,
                       seed: int) -> dict:
    """Empirical cross-path variances of the two control regression targets,
    computed with the exact reference substituted for the trained networks.

    The Euler target dW * Y_{n+1} / dt carries a 1/dt factor and its variance
    grows with N; the Malliavin target stays bounded.
    """
    ref = model.require_reference()
    dW = sample_brownian(grid, model.d, B, derive_seed(seed, TEST))
    paths = euler_maruyama(model, dW)
    N = grid.N
    var_osm = np.zeros(N)
    var_euler = np.zeros(N)
    for n in range(N):
        t1 = grid.nodes[n + 1]
        dt = grid.dts[n]
        x1 = paths.X[n + 1]
        y1, z1, _ = ref(t1, x1)
        siginv = model.sigma_inv(t1, x1)
        dny = np.einsum("bi,bij,bjk->bk", z1, siginv, paths.DnX_next[n])
        fy = model.grad_y_f(t1, x1, y1, z1)
        fx = model.grad_x_f(t1, x1, y1, z1)
        tgt_osm = (1.0 + dt * fy)[:, None] * dny \
            + dt * np.einsum("bi,bij->bj", fx, paths.DnX_next[n])
        tgt_euler = dW.increments[n] * y1[:, None] / dt
        var_osm[n] = np.mean(np.var(tgt_osm, axis=0))
        var_euler[n] = np.mean(np.var(tgt_euler, axis=0))
    return {
        "osm": var_osm, "euler": var_euler,
        "max_osm": float(np.max(var_osm)), "max_euler": float(np.max(var_euler)),
    }


# ---------------------------------------------------------------------------
# convergence studies
# ---------------------------------------------------------------------------

@dataclass
class ConvergenceTable:
    """Rows of aggregate errors per (N, run) plus per-column statistics and
    fitted log-log slopes."""

    Ns: list
    runs: int
    error_columns: list
    rows: list = field(default_factory=list)  # dicts: N, run, seed, metrics
    means: dict = field(default_factory=dict)  # col -> {N: mean}
    stds: dict = field(default_factory=dict)
    slopes: dict = field(default_factory=dict)  # col -> slope of the means

    def finalize(self):
        for col in self.error_columns:
            self.means[col] = {}
            self.stds[col] = {}
            for N in self.Ns:
                vals = [r[col] for r in self.rows if r["N"] == N]
                self.means[col][N] = float(np.mean(vals))
                self.stds[col][N] = float(np.std(vals))
            self.slopes[col] = fit_loglog_slope(
                self.Ns, [self.means[col][N] for N in self.Ns]
            )
        return self


def _study_cell(args):
    """One (N, run) cell of a convergence study; importable for process pools."""
    from .config import run_single  # local import to avoid a cycle

    cfg, N, run = args
    return run_single(cfg, N=N, run=run)


def convergence_study(cfg, Ns, runs: int = 1, workers: int = 1) -> ConvergenceTable:
    """Solve and evaluate for every (N, run), then fit log-log slopes of the
    aggregate error columns against N."""
    Ns = [int(n) for n in Ns]
    if not Ns:
        raise ValueError("Ns must be nonempty")
    if any(b <= a for a, b in zip(Ns, Ns[1:])):
        raise ValueError("Ns must be strictly increasing")
    if runs < 1:
        raise ValueError("runs must be >= 1")
    cells = [(cfg, N, r) for N in Ns for r in range(runs)]
    if workers > 1 and len(cells) > 1:
        with get_context("fork").Pool(workers) as pool:
            results = pool.map(_study_cell, cells)
    else:
        results = [_study_cell(c) for c in cells]
    error_columns = [
        k for k in results[0]
        if k not in ("N", "run", "seed", "theta_y", "runtime_s", "solver", "model", "d")
    ]
    table = ConvergenceTable(Ns=Ns, runs=runs, error_columns=error_columns,
                             rows=results)
    return table.finalize()


# ---------------------------------------------------------------------------
# CSV output (deterministic float formatting via repr round-trip)
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_errors_csv(report: ErrorReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "t", "mse_y", "mse_z", "mse_gamma"])
        for n in range(report.N + 1):
            w.writerow([
                n, _fmt(report.t[n]), _fmt(report.mse_y[n]),
                _fmt(report.mse_z[n]), _fmt(report.mse_gamma[n]),
            ])


SUMMARY_COLUMNS = [
    "solver", "model", "d", "N", "theta_y", "run", "seed", "max_mse_y",
    "max_mse_z", "gamma_sum_dt", "gamma_sigma_weighted", "rel_y0", "rel_z0",
    "rel_g0", "runtime_s",
]


def write_summary_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for rep in reports:
            row = rep.summary_row()
            w.writerow([_fmt(row[c]) for c in SUMMARY_COLUMNS])


def write_curves_csv(solution, path) -> None:
    """Training curves of a deep solution as (stage, phase, iter, loss)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "phase", "iter", "loss"])
        for stage, phase, i, loss in solution.curves_rows():
            w.writerow([stage, phase, i, _fmt(loss)])


def write_convergence_csv(table: ConvergenceTable, path) -> None:
    cols = ["N", "run", "seed"] + table.error_columns
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in table.rows:
            w.writerow([_fmt(row.get(c, "")) for c in cols])
        for col in table.error_columns:
            w.writerow(["slope", "", col, _fmt(table.slopes[col])]
                       + [""] * (len(cols) - 4))


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0
        return False
