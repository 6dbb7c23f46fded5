"""Backward neural least-squares Monte Carlo solver.

At each time level two regressions run back to back on fresh simulated
batches: first the control pair (z, gamma) against the Malliavin-derivative
target, then the value regression with a theta-implicit driver term.  Two
control variants exist: 'osm-p' parametrizes gamma with its own matrix
network, 'osm-d' takes gamma as the input Jacobian of the z network (the
loss then differentiates through that Jacobian).  'dbdp1' is the classical
one-step Euler regression used as the comparison baseline.

Stage-n losses read only (X_n, X_{n+1}, dW_n, D_n X_{n+1}) plus the frozen
evaluators of stage n+1; StageBatch carries exactly those arrays.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import FbsdeError, NonFiniteGradient, TrainingDivergence
from .grids import TimeGrid
from .models import FbsdeModel
from .seeds import INIT, TRAIN, derive_seed, generator
from .simulate import _dnx_step
from .nn import autodiff as ad
from .nn.autodiff import Tensor
from .nn.checkpoint import save_network_file
from .nn.network import (
    Network,
    apply_with_jacobian,
    default_architecture,
    init_glorot,
    input_jacobian,
)
from .nn.optim import adam_init, adam_step, make_lr_schedule

VARIANTS = ("osm-p", "osm-d", "dbdp1")
DIVERGENCE_LIMIT = 100


class LinearSolveFailure(FbsdeError):
    def __init__(self, b):
        self.b = int(b)
        super().__init__(f"singular diffusion factor on path b={b}")


# ---------------------------------------------------------------------------
# data carried by one stage regression
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StageBatch:
    """Everything a stage-n loss is allowed to see."""

    n: int
    t0: float
    t1: float
    dt: float
    x_n: np.ndarray      # (B, d)
    x_next: np.ndarray   # (B, d)
    dw: np.ndarray       # (B, d)
    dnx: np.ndarray      # (B, d, d)  D_n X_{n+1}


def simulate_stage_batch(model: FbsdeModel, grid: TimeGrid, n: int, B: int,
                         seed: int) -> StageBatch:
    """Fresh Euler batch from t_0 up to t_{n+1} with the one-step Malliavin
    derivative over [t_n, t_{n+1}].

    For constant-coefficient models the Euler recursion telescopes to
    x0 + mu t_n + sigma W_{t_n}, which is used directly.
    """
    d = model.d
    gen = generator(seed)
    steps = n + 1
    inc = gen.standard_normal((steps, B, d)) \
        * np.sqrt(grid.dts[:steps])[:, None, None]
    t0 = grid.nodes[n]
    dt = grid.dts[n]
    dw = inc[n]
    if model.is_abm:
        mu0 = model.mu(0.0, model.x0[None, :])[0]
        sig0 = model.sigma(0.0, model.x0[None, :])[0]
        x = model.x0 + mu0 * t0 + inc[:n].sum(axis=0) @ sig0.T
    else:
        x = np.broadcast_to(model.x0, (B, d)).copy()
        for m in range(n):
            t = grid.nodes[m]
            x = x + model.mu(t, x) * grid.dts[m] \
                + np.matmul(model.sigma(t, x), inc[m][:, :, None])[:, :, 0]
    dnx = _dnx_step(model, t0, x, dt, dw)
    x_next = x + model.mu(t0, x) * dt \
        + np.matmul(model.sigma(t0, x), dw[:, :, None])[:, :, 0]
    return StageBatch(
        n=n, t0=float(t0), t1=float(grid.nodes[n + 1]), dt=float(dt),
        x_n=x, x_next=x_next, dw=dw, dnx=dnx,
    )


# ---------------------------------------------------------------------------
# stage evaluators
# ---------------------------------------------------------------------------

@dataclass
class StageTriple:
    """Evaluators of one time level: y (B,d)->(B,), z ->(B,d), gamma ->(B,d,d)."""

    n: int
    y: object
    z: object
    gamma: object


def terminal_stage(model: FbsdeModel, X_N: np.ndarray | None = None) -> StageTriple:
    """Exact terminal evaluators (g, grad g sigma, grad(grad g sigma))."""
    return StageTriple(
        n=-1,
        y=lambda x: model.g(np.asarray(x)),
        z=lambda x: model.grad_g_sigma(np.asarray(x)),
        gamma=lambda x: model.grad_grad_g_sigma(np.asarray(x)),
    )


def dy_estimate(z_next, model: FbsdeModel, t_next: float, x_next: np.ndarray,
                dnx: np.ndarray) -> np.ndarray:
    """Malliavin derivative of the value along paths:
    D_n Y_{n+1} = Z_{n+1} sigma^{-1}(t_{n+1}, X_{n+1}) D_n X_{n+1}."""
    z1 = np.asarray(z_next(x_next) if callable(z_next) else z_next)
    siginv = model.sigma_inv(t_next, x_next)
    out = np.matmul(np.matmul(z1[:, None, :], siginv), dnx)[:, 0, :]
    if not np.all(np.isfinite(out)):
        bad = int(np.argwhere(~np.isfinite(out).all(axis=1))[0, 0])
        raise LinearSolveFailure(bad)
    return out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _FrozenZ:
    tgt: np.ndarray    # (B, d) regression target
    fz: np.ndarray     # (B, d) driver z-gradient at (t_{n+1}, X-hat_{n+1})
    sig_n: np.ndarray  # (B, d, d) sigma(t_n, X_n)


def _frozen_z_inputs(batch: StageBatch, model: FbsdeModel,
                     next_stage: StageTriple) -> _FrozenZ:
    y1 = next_stage.y(batch.x_next)
    z1 = next_stage.z(batch.x_next)
    dny = dy_estimate(z1, model, batch.t1, batch.x_next, batch.dnx)
    fy = model.grad_y_f(batch.t1, batch.x_next, y1, z1)
    fx = model.grad_x_f(batch.t1, batch.x_next, y1, z1)
    fz = model.grad_z_f(batch.t1, batch.x_next, y1, z1)
    tgt = (1.0 + batch.dt * fy)[:, None] * dny \
        + batch.dt * np.matmul(fx[:, None, :], batch.dnx)[:, 0, :]
    return _FrozenZ(tgt=tgt, fz=fz, sig_n=model.sigma(batch.t0, batch.x_n))


def _z_residual_loss(frozen: _FrozenZ, batch: StageBatch, psi_out: Tensor,
                     chi_out: Tensor) -> Tensor:
    """Shared quadratic form of the control regressions; chi_out is either a
    gamma network output or the z network's input Jacobian."""
    B, d = batch.dw.shape
    chs = ad.bmm(chi_out, Tensor(frozen.sig_n))
    fz_chs = ad.reshape(ad.bmm(Tensor(frozen.fz[:, None, :]), chs), (B, d))
    chs_dw = ad.reshape(ad.bmm(chs, Tensor(batch.dw[:, :, None])), (B, d))
    r = Tensor(frozen.tgt) - psi_out + batch.dt * fz_chs - chs_dw
    return ad.mean(ad.tsum(r * r, axis=1))


def loss_zgamma(batch: StageBatch, psi: Network, chi: Network,
                model: FbsdeModel, next_stage: StageTriple) -> Tensor:
    """Control loss with a parametrized gamma network."""
    frozen = _frozen_z_inputs(batch, model, next_stage)
    return _z_residual_loss(frozen, batch, psi.apply(batch.x_n),
                            chi.apply(batch.x_n))


def loss_zd(batch: StageBatch, psi: Network, model: FbsdeModel,
            next_stage: StageTriple) -> Tensor:
    """Control loss with gamma taken as the z network's input Jacobian; the
    gradients flow through the Jacobian (double backward)."""
    frozen = _frozen_z_inputs(batch, model, next_stage)
    psi_out, jac = apply_with_jacobian(psi, batch.x_n, create_graph=True)
    return _z_residual_loss(frozen, batch, psi_out, jac)


def _driver_y_node(model: FbsdeModel, t: float, x: np.ndarray, y_t: Tensor,
                   z: np.ndarray) -> Tensor:
    """Driver node differentiable in its y argument; the local gradient is
    the model's analytic grad_y_f at the forward point (first order only,
    which is all the value loss needs)."""
    y0 = y_t.data
    fval = model.f(t, x, y0, z)
    gy = Tensor(model.grad_y_f(t, x, y0, z))
    return ad.make_node(fval, (y_t,), (lambda g: ad.mul(g, gy),))


def _driver_yz_node(model: FbsdeModel, t: float, x: np.ndarray, y_t: Tensor,
                    z_t: Tensor) -> Tensor:
    y0, z0 = y_t.data, z_t.data
    fval = model.f(t, x, y0, z0)
    gy = Tensor(model.grad_y_f(t, x, y0, z0))
    gz = Tensor(model.grad_z_f(t, x, y0, z0))
    B = x.shape[0]
    return ad.make_node(
        fval, (y_t, z_t),
        (lambda g: ad.mul(g, gy),
         lambda g: ad.mul(ad.reshape(g, (B, 1)), gz)),
    )


def loss_y(batch: StageBatch, phi: Network, model: FbsdeModel,
           next_stage: StageTriple, z_n: np.ndarray, theta_y: float) -> Tensor:
    """Value regression with theta-split driver; for theta_y > 0 the network
    output sits inside the driver and the optimizer resolves the
    implicitness."""
    y1 = next_stage.y(batch.x_next)
    z1 = next_stage.z(batch.x_next)
    base = y1 + (1.0 - theta_y) * batch.dt \
        * model.f(batch.t1, batch.x_next, y1, z1) \
        - np.einsum("bi,bi->b", z_n, batch.dw)
    phi_out = phi.apply(batch.x_n)
    r = Tensor(base) - phi_out
    if theta_y > 0.0:
        r = r + (theta_y * batch.dt) \
            * _driver_y_node(model, batch.t0, batch.x_n, phi_out, z_n)
    return ad.mean(r * r)


def loss_dbdp1(batch: StageBatch, phi: Network, psi: Network,
               model: FbsdeModel, next_stage: StageTriple) -> Tensor:
    """Fully implicit one-step Euler regression (the reference scheme)."""
    y1 = next_stage.y(batch.x_next)
    phi_out = phi.apply(batch.x_n)
    psi_out = psi.apply(batch.x_n)
    fnode = _driver_yz_node(model, batch.t0, batch.x_n, phi_out, psi_out)
    r = Tensor(y1) - phi_out + batch.dt * fnode \
        - ad.tsum(psi_out * Tensor(batch.dw), axis=1)
    return ad.mean(r * r)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Training protocol.  Defaults follow the full-scale protocol
    (B=2^10, I=2^15 then 2^11); `TrainConfig.desk()` is the reduced budget
    used by the desk-scale studies."""

    B: int = 2 ** 10
    I_first: int = 2 ** 15
    I_rest: int = 2 ** 11
    theta_y: float = 1.0
    variant: str = "osm-p"
    seed: int = 0
    lr_schedule: str = "decay3"
    hidden_widths: tuple | None = None
    layer_norm: bool = True
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.B < 1:
            raise ValueError(f"batch size B must be >= 1, got {self.B}")
        if not (0.0 <= self.theta_y <= 1.0):
            raise ValueError(f"theta_y must lie in [0, 1], got {self.theta_y}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        kw.setdefault("B", 256)
        kw.setdefault("I_first", 4000)
        kw.setdefault("I_rest", 1000)
        return cls(**kw)


@dataclass
class DeepSolution:
    """Trained stage evaluators plus per-stage training curves."""

    model: FbsdeModel
    grid: TimeGrid
    variant: str
    theta_y: float
    seed: int
    stages: list
    networks: list            # per stage n < N: dict of frozen Networks
    curves: dict = field(repr=False, default_factory=dict)  # (n, phase) -> np.ndarray

    def stage_triple(self, n: int):
        s = self.stages[n]
        return s.y, s.z, s.gamma

    def curves_rows(self):
        """(stage, phase, iter, loss) rows for the training-curve CSV."""
        for (n, phase), arr in sorted(self.curves.items()):
            for i, v in enumerate(arr):
                yield n, phase, i, float(v)


def _build_nets(model: FbsdeModel, cfg: TrainConfig, seed: int):
    widths = cfg.hidden_widths
    arch_kw = dict(widths=widths, layer_norm=cfg.layer_norm)
    d = model.d
    psi = init_glorot(default_architecture(d, "row", **arch_kw),
                      derive_seed(seed, INIT, "z"))
    phi = init_glorot(default_architecture(d, "scalar", **arch_kw),
                      derive_seed(seed, INIT, "y"))
    chi = None
    if cfg.variant == "osm-p":
        chi = init_glorot(default_architecture(d, "matrix", **arch_kw),
                          derive_seed(seed, INIT, "gamma"))
    return psi, chi, phi


def _train_phase(n: int, iters: int, params, make_loss, schedule,
                 curve: list):
    """Run one regression; skips rejected updates and raises
    TrainingDivergence after too many consecutive non-finite iterations."""
    state = adam_init(params)
    bad_streak = 0
    for i in range(iters):
        loss = make_loss(i)
        lv = float(loss.data)
        curve.append(lv)
        ok = np.isfinite(lv)
        if ok:
            grads = ad.grad(loss, params)
            try:
                adam_step(state, params, grads, schedule(i, iters))
            except NonFiniteGradient:
                ok = False
        if ok:
            bad_streak = 0
        else:
            bad_streak += 1
            if bad_streak >= DIVERGENCE_LIMIT:
                raise TrainingDivergence(n)


def _freeze_stage(n: int, cfg: TrainConfig, psi: Network, chi, phi: Network):
    psi_s = psi.copy()
    phi_s = phi.copy()
    nets = {"z": psi_s, "y": phi_s}
    if cfg.variant == "osm-p":
        chi_s = chi.copy()
        nets["gamma"] = chi_s
        gamma_fn = lambda x: chi_s(x)
    else:
        gamma_fn = lambda x: input_jacobian(psi_s, x)
    triple = StageTriple(n=n, y=lambda x: phi_s(x), z=lambda x: psi_s(x),
                         gamma=gamma_fn)
    if cfg.checkpoint_dir:
        os.makedirs(cfg.checkpoint_dir, exist_ok=True)
        for role, net in nets.items():
            save_network_file(
                net, os.path.join(cfg.checkpoint_dir, f"stage{n:03d}_{role}.net")
            )
    return triple, nets


def osm_solve(model: FbsdeModel, grid: TimeGrid, cfg: TrainConfig) -> DeepSolution:
    """Backward training loop of the Malliavin one-step scheme.

    Per stage: train the control networks on the Malliavin regression, freeze
    them, train the value network, then warm-start the next (earlier) stage
    from the trained parameters.
    """
    if cfg.variant not in ("osm-p", "osm-d"):
        raise ValueError("osm_solve expects variant 'osm-p' or 'osm-d'")
    N = grid.N
    psi, chi, phi = _build_nets(model, cfg, cfg.seed)
    z_params = list(psi.params) + (list(chi.params) if chi is not None else [])
    schedule = make_lr_schedule(cfg.lr_schedule)

    stages = [None] * (N + 1)
    stages[N] = terminal_stage(model)
    stages[N].n = N
    networks = [None] * N
    curves = {}

    for n in range(N - 1, -1, -1):
        iters = cfg.I_first if n == N - 1 else cfg.I_rest
        next_stage = stages[n + 1]

        def z_loss(i, _n=n, _next=next_stage):
            batch = simulate_stage_batch(
                model, grid, _n, cfg.B, derive_seed(cfg.seed, TRAIN, _n, "z", i)
            )
            if cfg.variant == "osm-p":
                return loss_zgamma(batch, psi, chi, model, _next)
            return loss_zd(batch, psi, model, _next)

        curve_z = []
        _train_phase(n, iters, z_params, z_loss, schedule, curve_z)
        curves[(n, "z")] = np.asarray(curve_z)

        def y_loss(i, _n=n, _next=next_stage):
            batch = simulate_stage_batch(
                model, grid, _n, cfg.B, derive_seed(cfg.seed, TRAIN, _n, "y", i)
            )
            z_n = psi(batch.x_n)
            return loss_y(batch, phi, model, _next, z_n, cfg.theta_y)

        curve_y = []
        _train_phase(n, iters, phi.params, y_loss, schedule, curve_y)
        curves[(n, "y")] = np.asarray(curve_y)

        stages[n], networks[n] = _freeze_stage(n, cfg, psi, chi, phi)

    return DeepSolution(
        model=model, grid=grid, variant=cfg.variant, theta_y=cfg.theta_y,
        seed=cfg.seed, stages=stages, networks=networks, curves=curves,
    )


def dbdp1_solve(model: FbsdeModel, grid: TimeGrid, cfg: TrainConfig) -> DeepSolution:
    """Backward Euler regression baseline: per stage, (value, control) are
    trained jointly on the one-step Euler residual; gamma estimates come from
    the control network's input Jacobian (for comparison only)."""
    if cfg.variant != "dbdp1":
        cfg = replace(cfg, variant="dbdp1")
    N = grid.N
    psi, _, phi = _build_nets(model, cfg, cfg.seed)
    params = list(phi.params) + list(psi.params)
    schedule = make_lr_schedule(cfg.lr_schedule)

    stages = [None] * (N + 1)
    stages[N] = terminal_stage(model)
    stages[N].n = N
    networks = [None] * N
    curves = {}

    for n in range(N - 1, -1, -1):
        iters = cfg.I_first if n == N - 1 else cfg.I_rest
        next_stage = stages[n + 1]

        def yz_loss(i, _n=n, _next=next_stage):
            batch = simulate_stage_batch(
                model, grid, _n, cfg.B, derive_seed(cfg.seed, TRAIN, _n, "yz", i)
            )
            return loss_dbdp1(batch, phi, psi, model, _next)

        curve = []
        _train_phase(n, iters, params, yz_loss, schedule, curve)
        curves[(n, "yz")] = np.asarray(curve)

        psi_s, phi_s = psi.copy(), phi.copy()
        stages[n] = StageTriple(
            n=n, y=lambda x, _p=phi_s: _p(x), z=lambda x, _p=psi_s: _p(x),
            gamma=lambda x, _p=psi_s: input_jacobian(_p, x),
        )
        networks[n] = {"z": psi_s, "y": phi_s}
        if cfg.checkpoint_dir:
            os.makedirs(cfg.checkpoint_dir, exist_ok=True)
            for role, net in networks[n].items():
                save_network_file(
                    net,
                    os.path.join(cfg.checkpoint_dir, f"stage{n:03d}_{role}.net"),
                )

    return DeepSolution(
        model=model, grid=grid, variant="dbdp1", theta_y=1.0, seed=cfg.seed,
        stages=stages, networks=networks, curves=curves,
    )


def solve(model: FbsdeModel, grid: TimeGrid, cfg: TrainConfig) -> DeepSolution:
    if cfg.variant == "dbdp1":
        return dbdp1_solve(model, grid, cfg)
    return osm_solve(model, grid, cfg)
