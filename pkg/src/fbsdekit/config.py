"""Experiment configuration: INI parsing with section/key validation, model
and solver construction, and the single-cell runner used by studies."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

import numpy as np

from .bcos import bcos_solve
from .bench import Timer, evaluate_errors, sde_strong_errors
from .deep import TrainConfig, solve as deep_solve
from .exceptions import ConfigError
from .grids import make_grid
from .models import MODEL_FACTORIES
from .seeds import derive_seed

SOLVER_KINDS = ("bcos", "osm-p", "osm-d", "dbdp1", "sde")
BUDGETS = ("desk", "full")
SECTIONS = ("model", "grid", "solver", "train", "report")


@dataclass
class ExperimentConfig:
    model_name: str = "example1"
    d: int = 1
    model_overrides: dict = field(default_factory=dict)
    N: int = 10
    Ns: tuple = ()
    solver: str = "bcos"
    K: int = 512
    M_cos: int | None = None
    P: int = 5
    theta_y: float = 1.0
    L: float = 10.0
    budget: str = "desk"
    B: int | None = None
    I_first: int | None = None
    I_rest: int | None = None
    lr_schedule: str = "decay3"
    width: int | None = None
    checkpoints: bool = False
    report_M: int = 2 ** 10
    sde_B: int = 2 ** 14
    runs: int = 1
    seed: int = 0

    def validate(self):
        if self.model_name not in MODEL_FACTORIES:
            raise ConfigError(
                "model.name",
                f"unknown model {self.model_name!r}; choose from "
                f"{sorted(MODEL_FACTORIES)}",
            )
        if self.d < 1:
            raise ConfigError("model.d", f"dimension must be >= 1, got {self.d}")
        if self.N < 1:
            raise ConfigError("grid.N", f"N must be >= 1, got {self.N}")
        if self.solver not in SOLVER_KINDS:
            raise ConfigError(
                "solver.kind",
                f"unknown solver {self.solver!r}; choose from {SOLVER_KINDS}",
            )
        if not (0.0 <= self.theta_y <= 1.0):
            raise ConfigError(
                "solver.theta_y", f"must lie in [0, 1], got {self.theta_y}"
            )
        if self.solver == "bcos" and self.d != 1:
            raise ConfigError("solver.kind", "bcos requires d = 1")
        if self.K < 1:
            raise ConfigError("solver.K", "K must be >= 1")
        if self.P < 1:
            raise ConfigError("solver.P", "P must be >= 1")
        if self.budget not in BUDGETS:
            raise ConfigError(
                "train.budget", f"must be one of {BUDGETS}, got {self.budget!r}"
            )
        if self.runs < 1:
            raise ConfigError("report.runs", "runs must be >= 1")
        if self.report_M < 1:
            raise ConfigError("report.M", "test sample size must be >= 1")
        return self


_MODEL_KEYS = {"name", "d", "t", "lam", "gamma_bar", "tau", "a", "c", "sigma0"}
_GRID_KEYS = {"n", "ns"}
_SOLVER_KEYS = {"kind", "k", "m", "p", "theta_y", "l"}
_TRAIN_KEYS = {"budget", "b", "i_first", "i_rest", "lr_schedule", "width",
               "checkpoints"}
_REPORT_KEYS = {"m", "runs", "sde_b"}


def _get(section, parser_section, key, conv, default):
    if key not in parser_section:
        return default
    raw = parser_section[key]
    try:
        return conv(raw)
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}", f"cannot parse {raw!r}: {exc}")


def parse_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError("config", f"cannot read config file {path!r}")
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(section, f"unknown section; use one of {SECTIONS}")
    allowed = {
        "model": _MODEL_KEYS, "grid": _GRID_KEYS, "solver": _SOLVER_KEYS,
        "train": _TRAIN_KEYS, "report": _REPORT_KEYS,
    }
    for section, keys in allowed.items():
        if parser.has_section(section):
            for key in parser[section]:
                if key not in keys:
                    raise ConfigError(
                        f"{section}.{key}", f"unknown key; allowed: {sorted(keys)}"
                    )

    cfg = ExperimentConfig()
    if parser.has_section("model"):
        s = parser["model"]
        cfg.model_name = s.get("name", cfg.model_name)
        cfg.d = _get("model", s, "d", int, cfg.d)
        for key, attr in (("t", "T"), ("lam", "lam"), ("gamma_bar", "gamma_bar"),
                          ("tau", "tau"), ("a", "a"), ("c", "c"),
                          ("sigma0", "sigma0")):
            if key in s:
                cfg.model_overrides[attr] = _get("model", s, key, float, None)
    if parser.has_section("grid"):
        s = parser["grid"]
        cfg.N = _get("grid", s, "n", int, cfg.N)
        if "ns" in s:
            try:
                cfg.Ns = tuple(int(v) for v in s["ns"].split(",") if v.strip())
            except ValueError as exc:
                raise ConfigError("grid.ns", f"cannot parse {s['ns']!r}: {exc}")
    if parser.has_section("solver"):
        s = parser["solver"]
        cfg.solver = s.get("kind", cfg.solver)
        cfg.K = _get("solver", s, "k", int, cfg.K)
        cfg.M_cos = _get("solver", s, "m", int, cfg.M_cos)
        cfg.P = _get("solver", s, "p", int, cfg.P)
        cfg.theta_y = _get("solver", s, "theta_y", float, cfg.theta_y)
        cfg.L = _get("solver", s, "l", float, cfg.L)
    if parser.has_section("train"):
        s = parser["train"]
        cfg.budget = s.get("budget", cfg.budget)
        cfg.B = _get("train", s, "b", int, cfg.B)
        cfg.I_first = _get("train", s, "i_first", int, cfg.I_first)
        cfg.I_rest = _get("train", s, "i_rest", int, cfg.I_rest)
        cfg.lr_schedule = s.get("lr_schedule", cfg.lr_schedule)
        cfg.width = _get("train", s, "width", int, cfg.width)
        if "checkpoints" in s:
            cfg.checkpoints = s.getboolean("checkpoints")
    if parser.has_section("report"):
        s = parser["report"]
        cfg.report_M = _get("report", s, "m", int, cfg.report_M)
        cfg.runs = _get("report", s, "runs", int, cfg.runs)
        cfg.sde_B = _get("report", s, "sde_b", int, cfg.sde_B)
    return cfg.validate()


def build_model(cfg: ExperimentConfig):
    factory = MODEL_FACTORIES[cfg.model_name]
    kw = {"d": cfg.d}
    ov = cfg.model_overrides
    if "T" in ov:
        kw["T"] = ov["T"]
    if cfg.model_name == "example1":
        for k in ("lam", "gamma_bar"):
            if k in ov:
                kw[k] = ov[k]
    elif cfg.model_name == "example2":
        if "a" in ov:
            kw["A"] = ov["a"] * np.eye(cfg.d)
        if "c" in ov:
            kw["c"] = ov["c"]
    elif cfg.model_name == "example3":
        for k in ("lam", "tau"):
            if k in ov:
                kw[k] = ov[k]
    elif cfg.model_name == "linear_abm":
        if "a" in ov:
            kw["a"] = ov["a"]
        if "sigma0" in ov:
            kw["sigma0"] = ov["sigma0"]
    return factory(**kw)


def make_train_config(cfg: ExperimentConfig, seed: int,
                      checkpoint_dir=None) -> TrainConfig:
    base = TrainConfig.desk if cfg.budget == "desk" else TrainConfig
    kw = dict(theta_y=cfg.theta_y, variant=cfg.solver, seed=seed,
              lr_schedule=cfg.lr_schedule, checkpoint_dir=checkpoint_dir)
    if cfg.B is not None:
        kw["B"] = cfg.B
    if cfg.I_first is not None:
        kw["I_first"] = cfg.I_first
    if cfg.I_rest is not None:
        kw["I_rest"] = cfg.I_rest
    if cfg.width is not None:
        kw["hidden_widths"] = (cfg.width, cfg.width)
    return base(**kw)


def run_single(cfg: ExperimentConfig, N: int | None = None,
               run: int = 0) -> dict:
    """Solve one configuration cell and return its aggregate error row."""
    N = cfg.N if N is None else int(N)
    seed_r = derive_seed(cfg.seed, "run", run)
    model = build_model(cfg)
    grid = make_grid(model.T, N)
    if cfg.solver == "sde":
        errs = sde_strong_errors(model, grid, cfg.sde_B, seed_r)
        return {"N": N, "run": run, "seed": seed_r, **errs}
    report, _ = run_solver(cfg, model, grid, seed_r, run=run)
    return {
        "N": N, "run": run, "seed": seed_r,
        "max_mse_y": report.max_mse_y, "max_mse_z": report.max_mse_z,
        "gamma_sum_dt": report.gamma_sum_dt,
        "gamma_sigma_weighted": report.gamma_sigma_weighted,
    }


def run_solver(cfg: ExperimentConfig, model, grid, seed: int, run: int = 0,
               checkpoint_dir=None):
    """Solve + evaluate, returning (ErrorReport, solution)."""
    with Timer() as timer:
        if cfg.solver == "bcos":
            solution = bcos_solve(
                model, grid, K=cfg.K, M=cfg.M_cos, P=cfg.P,
                theta_y=cfg.theta_y, L=cfg.L,
            )
        else:
            tc = make_train_config(cfg, seed, checkpoint_dir=checkpoint_dir)
            solution = deep_solve(model, grid, tc)
    report = evaluate_errors(
        solution, model, grid, M=cfg.report_M, seed=seed,
        solver_id=cfg.solver, theta_y=cfg.theta_y, run=run,
        runtime_s=timer.seconds,
    )
    return report, solution
