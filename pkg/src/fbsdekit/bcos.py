"""One-dimensional Fourier-cosine backward solver.

Conditional expectations under the one-step Euler transition are evaluated
through the transition's characteristic function: for a cosine expansion
v(rho) ~ sum' V_k cos(k pi (rho-a)/(b-a)) on [a, b],

    E[v(X')        | X = x] ~ sum'  V_k Re Phi(k|x)
    E[v(X') dW     | X = x] ~ dt s(x) sum' (-k pi/(b-a)) V_k Im Phi(k|x)
    E[v(X') dW^2   | X = x] ~ dt sum' V_k Re Phi(k|x)
                              - dt^2 s(x)^2 sum (k pi/(b-a))^2 V_k Re Phi(k|x)

with Phi(k|x) = exp(i u mu(x) dt - u^2 s(x)^2 dt / 2) e^{i u (x-a)},
u = k pi / (b-a).  Coefficients are recovered from midpoint samples by the
type-II DCT.  The backward step solves the coupled (gamma, z, y) update of
the one-step Malliavin discretization, with the gamma line implicit through
the driver's z-gradient and the y line resolved by Picard sweeps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dct as _dct

from .exceptions import SingularImplicitStep
from .grids import TimeGrid
from .models import FbsdeModel

SINGULAR_TOL = 1e-10
PICARD_EXIT = 1e-12


@dataclass(frozen=True)
class CosInterval:
    a: float
    b: float

    def __post_init__(self):
        if not self.a < self.b:
            raise ValueError(f"need a < b, got [{self.a}, {self.b}]")

    @property
    def width(self) -> float:
        return self.b - self.a

    def midpoints(self, M: int) -> np.ndarray:
        j = np.arange(M)
        return self.a + (j + 0.5) * self.width / M


def make_interval(model: FbsdeModel, L: float = 10.0) -> CosInterval:
    """Truncation interval centered on the one-step moments of the forward
    process started at x0: [x0 + mu T - L sqrt(sigma T), x0 + mu T + L sqrt(sigma T)]."""
    x0 = model.x0[None, :]
    kmu = float(model.mu(0.0, x0)[0, 0]) * model.T
    ksig = float(model.sigma(0.0, x0)[0, 0, 0]) * model.T
    if ksig <= 0:
        raise ValueError("sigma(0, x0) must be positive")
    c = float(model.x0[0]) + kmu
    half = L * np.sqrt(ksig)
    return CosInterval(c - half, c + half)


@dataclass
class CosExpansion:
    """Truncated cosine series on an interval; coefficient k=0 is halved on
    evaluation (prime-sum convention)."""

    interval: CosInterval
    K: int
    coeffs: np.ndarray = field(repr=False)
    clamp_count: int = 0

    def eval(self, x, clamp: bool = True) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if clamp:
            out_of_range = int(np.sum((x < self.interval.a) | (x > self.interval.b)))
            if out_of_range:
                self.clamp_count += out_of_range
                x = np.clip(x, self.interval.a, self.interval.b)
        k = np.arange(self.K)
        args = np.outer(x - self.interval.a, k * np.pi / self.interval.width)
        w = self.coeffs.copy()
        w[0] *= 0.5
        return np.cos(args) @ w

    def __call__(self, x):
        return self.eval(x)


def dct_coeffs(fvals, interval: CosInterval, K: int, M: int) -> CosExpansion:
    """Cosine coefficients from M midpoint samples via the type-II DCT.

    `fvals` is either the sample array of length M or a callable sampled at
    the midpoints.
    """
    if M < K:
        raise ValueError(f"need M >= K, got M={M} < K={K}")
    if callable(fvals):
        fvals = fvals(interval.midpoints(M))
    fvals = np.asarray(fvals, dtype=float)
    if fvals.shape != (M,):
        raise ValueError(f"expected {M} samples, got shape {fvals.shape}")
    V = _dct(fvals, type=2) / M
    return CosExpansion(interval=interval, K=K, coeffs=V[:K].copy())


def _dct_k(vals: np.ndarray, K: int) -> np.ndarray:
    return (_dct(vals, type=2) / vals.shape[0])[:K]


def _prime(coeffs: np.ndarray) -> np.ndarray:
    w = coeffs.copy()
    w[0] *= 0.5
    return w


def _phi_parts(ks, x, mu_x, sig_x, dt, interval):
    """Re and Im of Phi(k|x) for arrays of modes and states.

    Returns arrays of shape (len(x), len(ks)).
    """
    u = ks * np.pi / interval.width  # (K,)
    damp = np.exp(-0.5 * np.outer(sig_x ** 2 * dt, u ** 2))
    arg = np.outer(np.ones_like(x), u) * (x + mu_x * dt - interval.a)[:, None]
    return damp * np.cos(arg), damp * np.sin(arg)


def char_factor(k: int, x: float, model: FbsdeModel, dt: float,
                interval: CosInterval, t: float = 0.0) -> complex:
    """Characteristic-function factor Phi(k|x) of the Euler transition."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    xb = np.asarray([[float(x)]])
    mu_x = model.mu(t, xb)[:, 0]
    sig_x = model.sigma(t, xb)[:, 0, 0]
    re, im = _phi_parts(np.asarray([float(k)]), np.asarray([float(x)]),
                        mu_x, sig_x, dt, interval)
    return complex(re[0, 0], im[0, 0])


def cos_expectation(expansion: CosExpansion, x, model: FbsdeModel, dt: float,
                    order: int, t: float = 0.0):
    """Moment-weighted conditional expectation of the expansion under the
    Euler transition started at (t, x); order is the power of dW."""
    if order not in (0, 1, 2):
        raise ValueError("order must be 0, 1 or 2")
    x_arr = np.atleast_1d(np.asarray(x, dtype=float))
    xb = x_arr[:, None]
    mu_x = model.mu(t, xb)[:, 0]
    sig_x = model.sigma(t, xb)[:, 0, 0]
    K = expansion.K
    ks = np.arange(K)
    u = ks * np.pi / expansion.interval.width
    re, im = _phi_parts(ks, x_arr, mu_x, sig_x, dt, expansion.interval)
    w = _prime(expansion.coeffs)
    if order == 0:
        out = re @ w
    elif order == 1:
        out = dt * sig_x * (im @ (-u * w))
    else:
        out = dt * (re @ w) - dt ** 2 * sig_x ** 2 * (re @ (u ** 2 * w))
    if np.isscalar(x) or np.asarray(x).ndim == 0:
        return float(out[0])
    return out


# ---------------------------------------------------------------------------
# backward recursion
# ---------------------------------------------------------------------------

@dataclass
class StageFns:
    """Evaluators for one time level (flat 1-d state arrays in, arrays out),
    plus the recovered cosine coefficient vectors of the step."""

    n: int
    y: object
    z: object
    gamma: object
    coeffs: dict = field(default_factory=dict)


@dataclass
class BcosDiagnostics:
    picard_deltas: list = field(default_factory=list)  # per step, list of sups
    min_denominator: float = np.inf
    clamp_count: int = 0

    def count_clamps(self, x, interval: CosInterval) -> None:
        n = int(np.sum((x < interval.a) | (x > interval.b)))
        if n:
            self.clamp_count += n


class _Workspace:
    """Per-solve cache: midpoint grid, local coefficient fields and, for
    time-homogeneous models, the Phi matrices shared by all steps."""

    def __init__(self, model: FbsdeModel, grid: TimeGrid, interval: CosInterval,
                 K: int, M: int):
        self.model = model
        self.grid = grid
        self.interval = interval
        self.K = K
        self.M = M
        self.xg = interval.midpoints(M)
        self.u = np.arange(K) * np.pi / interval.width
        self._phi_cache = None

    def coeff_fields(self, t: float):
        xb = self.xg[:, None]
        m = self.model
        return (
            m.mu(t, xb)[:, 0],
            m.sigma(t, xb)[:, 0, 0],
            m.grad_x_mu(t, xb)[:, 0, 0],
            m.grad_x_sigma(t, xb)[:, 0, 0, 0],
        )

    def phi(self, t: float, dt: float):
        if self._phi_cache is not None and self.model.time_homogeneous:
            return self._phi_cache
        mu_x, sig_x, _, _ = self.coeff_fields(t)
        re, im = _phi_parts(np.arange(self.K), self.xg, mu_x, sig_x, dt,
                            self.interval)
        if self.model.time_homogeneous:
            self._phi_cache = (re, im)
        return re, im


def _terminal_fns(model: FbsdeModel) -> StageFns:
    def y(x):
        return model.g(np.atleast_1d(x)[:, None])

    def z(x):
        return model.grad_g_sigma(np.atleast_1d(x)[:, None])[:, 0]

    def gamma(x):
        return model.grad_grad_g_sigma(np.atleast_1d(x)[:, None])[:, 0, 0]

    return StageFns(n=-1, y=y, z=z, gamma=gamma)


def bcos_osm_step(n: int, y1: np.ndarray, z1: np.ndarray, model: FbsdeModel,
                  grid: TimeGrid, K: int, M: int, P: int, theta_y: float,
                  ws: _Workspace, diag: BcosDiagnostics):
    """One backward step of the cosine-expansion recursion.

    y1, z1 are the next level's values at the workspace midpoints.  Returns
    (StageFns at t_n, y values at midpoints, z values at midpoints).
    """
    t0 = grid.nodes[n]
    t1 = grid.nodes[n + 1]
    dt = grid.dts[n]
    xg = ws.xg
    xb = xg[:, None]
    interval = ws.interval
    u = ws.u

    # explicit parts of the z / y updates, projected by DCT
    fy = model.grad_y_f(t1, xb, y1, z1[:, None])
    fx = model.grad_x_f(t1, xb, y1, z1[:, None])[:, 0]
    fz = model.grad_z_f(t1, xb, y1, z1[:, None])[:, 0]
    fv = model.f(t1, xb, y1, z1[:, None])
    siginv1 = model.sigma_inv(t1, xb)[:, 0, 0]
    w_vals = (1.0 + dt * fy) * z1 * siginv1 + dt * fx
    h_vals = y1 + (1.0 - theta_y) * dt * fv
    Wk = _dct_k(w_vals, K)
    Hk = _dct_k(h_vals, K)
    Fzk = _dct_k(fz, K)
    Wp, Hp, Fzp = _prime(Wk), _prime(Hk), _prime(Fzk)

    mu_n, sig_n, dmu_n, dsig_n = ws.coeff_fields(t0)
    re, im = ws.phi(t0, dt)

    s0w = re @ Wp
    s1w = im @ (u * Wp)
    s2w = re @ (u * u * Wp)
    s0fz = re @ Fzp
    s1fz = im @ (u * Fzp)
    s0h = re @ Hp

    # gamma line: implicit through E[dW df/dz]
    e_dw_fz = dt * sig_n * (-s1fz)
    denom = 1.0 - e_dw_fz
    min_denom = float(np.min(np.abs(denom)))
    diag.min_denominator = min(diag.min_denominator, min_denom)
    if min_denom < SINGULAR_TOL:
        raise SingularImplicitStep(n, min_denom)
    gs_num = (
        -sig_n ** 2 * (1.0 + dmu_n * dt) * s1w
        + sig_n * dsig_n * s0w
        - dt * sig_n ** 3 * dsig_n * s2w
    )
    gs_vals = gs_num / denom  # gamma_n(x) sigma(t_n, x) at midpoints
    DZk = _dct_k(gs_vals, K)

    # z line
    z_vals = (
        sig_n * (1.0 + dmu_n * dt) * s0w
        - sig_n ** 2 * dsig_n * dt * s1w
        + dt * gs_vals * s0fz
    )

    # y line: Picard sweeps on the implicit driver part
    def _picard(xq, s0h_q, z_q, deltas=None):
        y_q = s0h_q.copy()
        if theta_y > 0.0:
            for _ in range(P):
                y_new = theta_y * dt * model.f(t0, xq[:, None], y_q,
                                               z_q[:, None]) + s0h_q
                delta = float(np.max(np.abs(y_new - y_q)))
                if deltas is not None:
                    deltas.append(delta)
                y_q = y_new
                if delta < PICARD_EXIT:
                    break
        return y_q

    deltas = []
    y_vals = _picard(xg, s0h, z_vals, deltas)
    diag.picard_deltas.append(deltas)

    # Query-point evaluators apply the same damped one-step formulas used on
    # the midpoint grid, so their accuracy matches the expectation sums
    # instead of the algebraic tail of a raw truncated series.
    def _eval_all(xq):
        xq_cl = np.clip(xq, interval.a, interval.b)
        xqb = xq_cl[:, None]
        mu_q = model.mu(t0, xqb)[:, 0]
        sig_q = model.sigma(t0, xqb)[:, 0, 0]
        dmu_q = model.grad_x_mu(t0, xqb)[:, 0, 0]
        dsig_q = model.grad_x_sigma(t0, xqb)[:, 0, 0, 0]
        re_q, im_q = _phi_parts(np.arange(K), xq_cl, mu_q, sig_q, dt, interval)
        s0w_q = re_q @ Wp
        s1w_q = im_q @ (u * Wp)
        s2w_q = re_q @ (u * u * Wp)
        s0fz_q = re_q @ Fzp
        s1fz_q = im_q @ (u * Fzp)
        denom_q = 1.0 - dt * sig_q * (-s1fz_q)
        gs_q = (
            -sig_q ** 2 * (1.0 + dmu_q * dt) * s1w_q
            + sig_q * dsig_q * s0w_q
            - dt * sig_q ** 3 * dsig_q * s2w_q
        ) / denom_q
        z_q = (
            sig_q * (1.0 + dmu_q * dt) * s0w_q
            - sig_q ** 2 * dsig_q * dt * s1w_q
            + dt * gs_q * s0fz_q
        )
        y_q = _picard(xq_cl, re_q @ Hp, z_q)
        return y_q, z_q, gs_q / sig_q

    cache = {}

    def _cached(xq):
        key = xq.tobytes()
        if key not in cache:
            cache.clear()
            cache[key] = _eval_all(xq)
        return cache[key]

    def _query(x, which):
        xq = np.atleast_1d(np.asarray(x, dtype=float))
        diag.count_clamps(xq, interval)
        return _cached(xq)[which]

    fns = StageFns(
        n=n,
        y=lambda x: _query(x, 0),
        z=lambda x: _query(x, 1),
        gamma=lambda x: _query(x, 2),
        coeffs={"w": Wk, "h": Hk, "fz": Fzk, "dz": DZk,
                "y": _dct_k(y_vals, K)},
    )
    return fns, y_vals, z_vals


@dataclass
class BcosSolution:
    """Backward cosine-expansion solution: per-level evaluators for
    (y, z, gamma) plus solver diagnostics."""

    model: FbsdeModel
    grid: TimeGrid
    interval: CosInterval
    K: int
    M: int
    P: int
    theta_y: float
    stages: list
    diagnostics: BcosDiagnostics

    def stage_triple(self, n: int):
        """Batched-callable adapter shared with the deep solver: functions of
        (B, 1) states returning (B,), (B, 1), (B, 1, 1)."""
        fns = self.stages[n]

        def y(x):
            return np.asarray(fns.y(np.asarray(x)[:, 0]))

        def z(x):
            return np.asarray(fns.z(np.asarray(x)[:, 0]))[:, None]

        def gamma(x):
            return np.asarray(fns.gamma(np.asarray(x)[:, 0]))[:, None, None]

        return y, z, gamma

    def y0(self) -> float:
        """Value estimate at (t=0, x0)."""
        return float(np.asarray(self.stages[0].y(self.model.x0[0]))[0])

    def z0(self) -> float:
        return float(np.asarray(self.stages[0].z(self.model.x0[0]))[0])


def bcos_solve(model: FbsdeModel, grid: TimeGrid, K: int = 512,
               M: int | None = None, P: int = 5,
               theta_y: float = 1.0, L: float = 10.0) -> BcosSolution:
    """Backward recursion from the terminal maps down to t = 0."""
    if model.d != 1:
        raise ValueError("the cosine backend is one-dimensional")
    if M is None:
        M = 4 * K
    if M < K:
        raise ValueError(f"need M >= K, got M={M} < K={K}")
    if not (0.0 <= theta_y <= 1.0):
        raise ValueError(f"theta_y must lie in [0, 1], got {theta_y}")
    if P < 1:
        raise ValueError("P must be >= 1")
    interval = make_interval(model, L=L)
    ws = _Workspace(model, grid, interval, K, M)
    diag = BcosDiagnostics()

    terminal = _terminal_fns(model)
    terminal.n = grid.N
    stages = [None] * (grid.N + 1)
    stages[grid.N] = terminal
    y_vals = np.asarray(terminal.y(ws.xg))
    z_vals = np.asarray(terminal.z(ws.xg))
    for n in range(grid.N - 1, -1, -1):
        try:
            fns, y_vals, z_vals = bcos_osm_step(
                n, y_vals, z_vals, model, grid, K, M, P, theta_y, ws, diag
            )
        except SingularImplicitStep:
            raise
        except Exception as exc:  # annotate with the failing step
            raise type(exc)(f"backward step n={n} failed: {exc}") from exc
        stages[n] = fns
    return BcosSolution(
        model=model, grid=grid, interval=interval, K=K, M=M, P=P,
        theta_y=theta_y, stages=stages, diagnostics=diag,
    )
