"""FBSDE problem definitions with every coefficient derivative the backward
schemes consume, plus the three benchmark problems with reference solutions.

Shape conventions (B = batch, d = state dimension):
    x                  (B, d)
    mu(t, x)           (B, d)
    sigma(t, x)        (B, d, d)
    f(t, x, y, z)      (B,)        with y (B,), z (B, d)
    grad_x_f           (B, d)      row gradient per path
    grad_y_f           (B,)
    grad_z_f           (B, d)
    g(x)               (B,)
    grad_g_sigma(x)    (B, d)      = grad_x g . sigma at the terminal time
    grad_grad_g_sigma  (B, d, d)   = grad_x(grad_x g . sigma)
    grad_x_mu          (B, d, d)   [i, j] = d mu_i / d x_j
    grad_x_sigma       (B, d, d, d)  [i, j, k] = d sigma_ij / d x_k
    reference(t, x) -> (y (B,), z (B, d), gamma (B, d, d))
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .exceptions import UnsupportedOperationError
from .riccati import RiccatiTable, lambda_root, solve_riccati


@dataclass
class FbsdeModel:
    """A coupled FBSDE problem: forward coefficients, driver, terminal map,
    all partial derivatives the schemes need, and an optional exact
    (y, z, gamma) reference."""

    name: str
    d: int
    T: float
    x0: np.ndarray
    mu: Callable
    sigma: Callable
    sigma_inv: Callable
    f: Callable
    grad_x_f: Callable
    grad_y_f: Callable
    grad_z_f: Callable
    g: Callable
    grad_g_sigma: Callable
    grad_grad_g_sigma: Callable
    grad_x_mu: Callable
    grad_x_sigma: Callable
    reference: Optional[Callable] = None
    # Constant mu/sigma (arithmetic Brownian motion); enables exact paths.
    is_abm: bool = False
    # Lambda-root closed form paths (state-dependent diffusion benchmark).
    has_lambda_paths: bool = False
    # mu and sigma do not depend on t (lets the cosine backend reuse its
    # transition matrices across steps on a uniform grid).
    time_homogeneous: bool = True
    params: dict = field(default_factory=dict)

    def require_reference(self) -> Callable:
        if self.reference is None:
            raise UnsupportedOperationError(
                f"model {self.name!r} carries no reference solution"
            )
        return self.reference


def reference_solution(model: FbsdeModel, t: float, x):
    """Exact or semi-analytic (y, z, gamma) of a model at (t, x).

    Accepts a single point (d,) or a batch (B, d); returns scalars/arrays
    accordingly.
    """
    ref = model.require_reference()
    if not (0.0 <= t <= model.T + 1e-12):
        raise ValueError(f"t={t} outside [0, {model.T}]")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    y, z, gamma = ref(float(t), xb)
    if single:
        return float(y[0]), z[0], gamma[0]
    return y, z, gamma


def _const_mats(x, mat):
    B = x.shape[0]
    return np.broadcast_to(mat, (B,) + mat.shape)


def _zeros_like_batch(x, shape):
    return np.zeros((x.shape[0],) + shape)


# ---------------------------------------------------------------------------
# Example 1: reaction-diffusion driver with diminishing control.
# ---------------------------------------------------------------------------

def make_example1(d: int = 1, T: float = 0.5, lam: float = 1.0,
                  gamma_bar: float = 0.6) -> FbsdeModel:
    """Reaction-diffusion benchmark: mu = 0, sigma = I_d, logistic-type
    terminal map and a y-dependent driver with closed-form solution."""
    if lam == 0.0:
        raise ValueError("lam must be nonzero")
    d = int(d)
    T = float(T)
    lam = float(lam)
    gamma_bar = float(gamma_bar)
    x0 = np.ones(d)
    eye = np.eye(d)
    zeros_dxd = np.zeros((d, d))
    zeros_t = np.zeros((d, d, d))
    coef = lam * lam * d

    def _w(t, x):
        return np.exp(t + lam * np.sum(x, axis=1))

    def f(t, x, y, z):
        w = _w(t, x)
        return w / (1.0 + w) ** 2 * (coef * (y - gamma_bar) - 1.0 - 0.5 * coef)

    def grad_y_f(t, x, y, z):
        w = _w(t, x)
        return w / (1.0 + w) ** 2 * coef

    def grad_x_f(t, x, y, z):
        w = _w(t, x)
        s = lam * w * (1.0 - w) / (1.0 + w) ** 3 * (
            coef * (y - gamma_bar) - 1.0 - 0.5 * coef
        )
        return np.repeat(s[:, None], d, axis=1)

    def grad_z_f(t, x, y, z):
        return np.zeros_like(z)

    def g(x):
        w = _w(T, x)
        return gamma_bar + w / (1.0 + w)

    def grad_g_sigma(x):
        w = _w(T, x)
        s = lam * w / (1.0 + w) ** 2
        return np.repeat(s[:, None], d, axis=1)

    def grad_grad_g_sigma(x):
        w = _w(T, x)
        s = lam * lam * w * (1.0 - w) / (1.0 + w) ** 3
        return s[:, None, None] * np.ones((1, d, d))

    def reference(t, x):
        w = _w(t, x)
        y = gamma_bar + w / (1.0 + w)
        z = np.repeat((lam * w / (1.0 + w) ** 2)[:, None], d, axis=1)
        gam = (lam * lam * w * (1.0 - w) / (1.0 + w) ** 3)[:, None, None] \
            * np.ones((1, d, d))
        return y, z, gam

    return FbsdeModel(
        name="example1", d=d, T=T, x0=x0,
        mu=lambda t, x: np.zeros_like(x),
        sigma=lambda t, x: _const_mats(x, eye),
        sigma_inv=lambda t, x: _const_mats(x, eye),
        f=f, grad_x_f=grad_x_f, grad_y_f=grad_y_f, grad_z_f=grad_z_f,
        g=g, grad_g_sigma=grad_g_sigma, grad_grad_g_sigma=grad_grad_g_sigma,
        grad_x_mu=lambda t, x: _const_mats(x, zeros_dxd),
        grad_x_sigma=lambda t, x: _const_mats(x, zeros_t),
        reference=reference, is_abm=True,
        params=dict(lam=lam, gamma_bar=gamma_bar),
    )


# ---------------------------------------------------------------------------
# Example 2: Hamilton-Jacobi-Bellman value function with quadratic terminal.
# ---------------------------------------------------------------------------

def make_example2(d: int = 1, T: float = 0.5, A=None, v=None, c: float = 0.0,
                  riccati_steps: int = 10_000) -> FbsdeModel:
    """Quadratic-terminal control benchmark: sigma = sqrt(2) I_d, driver
    f = -|z|^2 / 2, semi-analytic reference from the backward Riccati table."""
    d = int(d)
    T = float(T)
    A = np.eye(d) if A is None else np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape != (d, d):
        raise ValueError(f"A must be {d}x{d}, got {A.shape}")
    v = np.zeros(d) if v is None else np.asarray(v, dtype=float).reshape(-1)
    if v.shape != (d,):
        raise ValueError(f"v must have length {d}, got {v.shape}")
    c = float(c)
    x0 = np.ones(d)
    s2 = np.sqrt(2.0)
    sig_mat = s2 * np.eye(d)
    sig_inv_mat = np.eye(d) / s2
    zeros_dxd = np.zeros((d, d))
    zeros_t = np.zeros((d, d, d))
    Asym = A + A.T

    table: RiccatiTable = solve_riccati(A, v, c, T, steps=riccati_steps)

    def f(t, x, y, z):
        return -0.5 * np.sum(z * z, axis=1)

    def grad_z_f(t, x, y, z):
        return -z

    def g(x):
        return np.einsum("bi,ij,bj->b", x, A, x) + x @ v + c

    def grad_g_sigma(x):
        return s2 * (x @ Asym.T + v)

    def grad_grad_g_sigma(x):
        return _const_mats(x, s2 * Asym)

    def reference(t, x):
        P, Q, R = table.interpolate(t)
        S = P + P.T
        y = np.einsum("bi,ij,bj->b", x, P, x) + x @ Q + R
        z = s2 * (x @ S.T + Q)
        gam = _const_mats(x, s2 * S)
        return y, z, gam

    return FbsdeModel(
        name="example2", d=d, T=T, x0=x0,
        mu=lambda t, x: np.zeros_like(x),
        sigma=lambda t, x: _const_mats(x, sig_mat),
        sigma_inv=lambda t, x: _const_mats(x, sig_inv_mat),
        f=f,
        grad_x_f=lambda t, x, y, z: np.zeros_like(z),
        grad_y_f=lambda t, x, y, z: np.zeros_like(y),
        grad_z_f=grad_z_f,
        g=g, grad_g_sigma=grad_g_sigma, grad_grad_g_sigma=grad_grad_g_sigma,
        grad_x_mu=lambda t, x: _const_mats(x, zeros_dxd),
        grad_x_sigma=lambda t, x: _const_mats(x, zeros_t),
        reference=reference, is_abm=True,
        params=dict(A=A, v=v, c=c, riccati=table),
    )


# ---------------------------------------------------------------------------
# Example 3: state-dependent diffusion with closed-form paths.
# ---------------------------------------------------------------------------

def _sig3(s):
    return (1.0 + s * s) / (2.0 + s * s)


def _dsig3(s):
    return 2.0 * s / (2.0 + s * s) ** 2


def _mu3(s):
    return s * (1.0 + s * s) / (2.0 + s * s) ** 3


def _dmu3(s):
    s2 = s * s
    return (2.0 + s2 - 3.0 * s2 * s2) / (2.0 + s2) ** 4


def make_example3(d: int = 1, T: float = 10.0, lam: float = 10.0,
                  tau: float = 1.0) -> FbsdeModel:
    """State-dependent diffusion benchmark: diagonal sigma_i = (1+x_i^2)/(2+x_i^2),
    drift mu_i = x_i (1+x_i^2)/(2+x_i^2)^3 and a Gaussian-bump solution."""
    if not (lam > 0.0 and tau > 0.0):
        raise ValueError("lam and tau must be positive")
    d = int(d)
    T = float(T)
    lam = float(lam)
    tau = float(tau)
    x0 = np.ones(d)

    def mu(t, x):
        return _mu3(x)

    def sigma(t, x):
        B = x.shape[0]
        out = np.zeros((B, d, d))
        idx = np.arange(d)
        out[:, idx, idx] = _sig3(x)
        return out

    def sigma_inv(t, x):
        B = x.shape[0]
        out = np.zeros((B, d, d))
        idx = np.arange(d)
        out[:, idx, idx] = 1.0 / _sig3(x)
        return out

    def grad_x_mu(t, x):
        B = x.shape[0]
        out = np.zeros((B, d, d))
        idx = np.arange(d)
        out[:, idx, idx] = _dmu3(x)
        return out

    def grad_x_sigma(t, x):
        B = x.shape[0]
        out = np.zeros((B, d, d, d))
        idx = np.arange(d)
        out[:, idx, idx, idx] = _dsig3(x)
        return out

    def _pieces(t, x):
        nu = lam * (t + tau)
        u = np.sum(x * x, axis=1)
        E = np.exp(-u / nu)
        return nu, u, E

    def _bsum(x, nu):
        s2 = x * x
        den = 2.0 + s2
        t1 = 4.0 * s2 * (1.0 + s2) / den ** 3
        t2 = ((1.0 + s2) / den) ** 2 * (1.0 - 2.0 * s2 / nu)
        return np.sum(t1 + t2, axis=1)

    def _dbsum(x, nu):
        # derivative of the per-component bracket term of the driver
        s = x
        s2 = s * s
        den = 2.0 + s2
        d1 = 8.0 * s * (2.0 + 2.0 * s2 - s2 * s2) / den ** 4
        d2 = 4.0 * s * (1.0 + s2) / den ** 3 * (1.0 - 2.0 * s2 / nu)
        d3 = -4.0 * s / nu * ((1.0 + s2) / den) ** 2
        return d1 + d2 + d3

    def _S(y, C):
        return np.sqrt((1.0 + y * y + C) / (1.0 + 2.0 * y * y))

    def f(t, x, y, z):
        nu, u, E = _pieces(t, x)
        A = E / nu * (_bsum(x, nu) - u / (t + tau))
        C = E * E
        zx = np.sum(z * x / (2.0 + x * x) ** 2, axis=1)
        return A + _S(y, C) * zx

    def grad_z_f(t, x, y, z):
        nu, u, E = _pieces(t, x)
        C = E * E
        return _S(y, C)[:, None] * x / (2.0 + x * x) ** 2

    def grad_y_f(t, x, y, z):
        nu, u, E = _pieces(t, x)
        C = E * E
        S = _S(y, C)
        zx = np.sum(z * x / (2.0 + x * x) ** 2, axis=1)
        dS = -y * (1.0 + 2.0 * C) / (S * (1.0 + 2.0 * y * y) ** 2)
        return dS * zx

    def grad_x_f(t, x, y, z):
        nu, u, E = _pieces(t, x)
        C = E * E
        S = _S(y, C)
        A = E / nu * (_bsum(x, nu) - u / (t + tau))
        zx = np.sum(z * x / (2.0 + x * x) ** 2, axis=1)
        dA = (-2.0 * x / nu) * A[:, None] + (E / nu)[:, None] * (
            _dbsum(x, nu) - 2.0 * x / (t + tau)
        )
        dS = (-2.0 * x * C[:, None]) / (nu * (S * (1.0 + 2.0 * y * y))[:, None])
        dzb = z * (2.0 - 3.0 * x * x) / (2.0 + x * x) ** 3
        return dA + dS * zx[:, None] + S[:, None] * dzb

    def g(x):
        u = np.sum(x * x, axis=1)
        return np.exp(-u / (lam * (T + tau)))

    def reference(t, x):
        nu, u, E = _pieces(t, x)
        y = E
        z = -_sig3(x) * (2.0 * x / nu) * E[:, None]
        B = x.shape[0]
        gam = 4.0 * _sig3(x)[:, None, :] * x[:, None, :] * x[:, :, None] \
            * (E / nu**2)[:, None, None]
        # rows i = z-component, columns j = derivative direction; the
        # off-diagonal part above is sigma(x_i) x_i x_j * 4 E / nu^2 at [i, j]
        gam = np.swapaxes(gam, 1, 2)
        idx = np.arange(d)
        diag = -(2.0 * E / nu)[:, None] * (
            _dsig3(x) * x + _sig3(x) - 2.0 * _sig3(x) * x * x / nu
        )
        gam[:, idx, idx] = diag
        return y, z, gam

    def grad_g_sigma(x):
        _, z, _ = reference(T, x)
        return z

    def grad_grad_g_sigma(x):
        _, _, gam = reference(T, x)
        return gam

    return FbsdeModel(
        name="example3", d=d, T=T, x0=x0,
        mu=mu, sigma=sigma, sigma_inv=sigma_inv,
        f=f, grad_x_f=grad_x_f, grad_y_f=grad_y_f, grad_z_f=grad_z_f,
        g=g, grad_g_sigma=grad_g_sigma, grad_grad_g_sigma=grad_grad_g_sigma,
        grad_x_mu=grad_x_mu, grad_x_sigma=grad_x_sigma,
        reference=reference, has_lambda_paths=True,
        params=dict(lam=lam, tau=tau),
    )


# ---------------------------------------------------------------------------
# Linear-terminal arithmetic Brownian motion (exact martingale fixture).
# ---------------------------------------------------------------------------

def make_linear_abm(d: int = 1, a=1.0, sigma0: float = 1.0, mu0: float = 0.0,
                    T: float = 0.5, x0=None) -> FbsdeModel:
    """Driverless model with terminal g(x) = a . x over an ABM:
    Y_t = a . (x + mu0 (T - t)), Z = a^T sigma, Gamma = 0 exactly."""
    d = int(d)
    T = float(T)
    a = np.broadcast_to(np.asarray(a, dtype=float), (d,)).copy()
    sigma0 = float(sigma0)
    mu0 = float(mu0)
    x0 = np.ones(d) if x0 is None else np.asarray(x0, dtype=float).reshape(d)
    sig_mat = sigma0 * np.eye(d)
    sig_inv_mat = np.eye(d) / sigma0
    zeros_dxd = np.zeros((d, d))
    zeros_t = np.zeros((d, d, d))

    def reference(t, x):
        B = x.shape[0]
        y = x @ a + mu0 * np.sum(a) * (T - t)
        z = np.broadcast_to(sigma0 * a, (B, d)).copy()
        gam = np.zeros((B, d, d))
        return y, z, gam

    return FbsdeModel(
        name="linear_abm", d=d, T=T, x0=x0,
        mu=lambda t, x: np.full_like(x, mu0),
        sigma=lambda t, x: _const_mats(x, sig_mat),
        sigma_inv=lambda t, x: _const_mats(x, sig_inv_mat),
        f=lambda t, x, y, z: np.zeros_like(y),
        grad_x_f=lambda t, x, y, z: np.zeros_like(z),
        grad_y_f=lambda t, x, y, z: np.zeros_like(y),
        grad_z_f=lambda t, x, y, z: np.zeros_like(z),
        g=lambda x: x @ a,
        grad_g_sigma=lambda x: np.broadcast_to(sigma0 * a, x.shape).copy(),
        grad_grad_g_sigma=lambda x: _const_mats(x, zeros_dxd),
        grad_x_mu=lambda t, x: _const_mats(x, zeros_dxd),
        grad_x_sigma=lambda t, x: _const_mats(x, zeros_t),
        reference=reference, is_abm=True,
        params=dict(a=a, sigma0=sigma0, mu0=mu0),
    )


MODEL_FACTORIES = {
    "example1": make_example1,
    "example2": make_example2,
    "example3": make_example3,
    "linear_abm": make_linear_abm,
}
