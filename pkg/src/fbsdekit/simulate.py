"""Forward simulation: Euler-Maruyama for the state, the one-step
Euler-Maruyama approximation of its Malliavin derivative D_n X_{n+1}, and
exact paths where the model admits them."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import SimulationFailure, UnsupportedOperationError
from .grids import BrownianBatch
from .models import FbsdeModel
from .riccati import lambda_root


@dataclass(frozen=True)
class PathEnsemble:
    """Simulated forward paths and their one-step Malliavin derivatives.

    X has shape (N+1, B, d); DnX_next has shape (N, B, d, d) and holds
    D_n X_{n+1}, the sensitivity of X_{n+1} to the Brownian increment over
    [t_n, t_{n+1}] (computed from time-t_n information only).
    """

    dW: BrownianBatch
    X: np.ndarray = field(repr=False)
    DnX_next: np.ndarray = field(repr=False)

    @property
    def grid(self):
        return self.dW.grid

    @property
    def B(self) -> int:
        return self.dW.B


def _dnx_step(model: FbsdeModel, t: float, x: np.ndarray, dt: float,
              dw: np.ndarray) -> np.ndarray:
    """One Euler step of the Malliavin derivative started at D_n X_n = sigma.

    D_n X_{n+1} = S + grad_mu S dt + (grad_sigma . dW) S, where S = sigma(t, x)
    and [grad_sigma]_{ijk} = d sigma_ij / d x_k contracts its j index with dW
    and its k index with S.
    """
    S = model.sigma(t, x)
    gm = model.grad_x_mu(t, x)
    gs = model.grad_x_sigma(t, x)
    B, d = x.shape
    # contract the dW index of grad_sigma, leaving a (B, d, d) factor
    gs_dw = np.matmul(
        gs.transpose(0, 1, 3, 2).reshape(B, d * d, d), dw[:, :, None]
    ).reshape(B, d, d)
    return S + dt * np.matmul(gm, S) + np.matmul(gs_dw, S)


def euler_maruyama(model: FbsdeModel, dW: BrownianBatch) -> PathEnsemble:
    """Euler-Maruyama paths of the forward SDE plus D_n X_{n+1} per step."""
    if dW.d != model.d:
        raise ValueError(f"Brownian dimension {dW.d} != model dimension {model.d}")
    grid = dW.grid
    N, B, d = grid.N, dW.B, model.d
    X = np.empty((N + 1, B, d))
    DnX = np.empty((N, B, d, d))
    X[0] = model.x0
    for n in range(N):
        t = grid.nodes[n]
        dt = grid.dts[n]
        x = X[n]
        dw = dW.increments[n]
        drift = model.mu(t, x)
        diff = np.matmul(model.sigma(t, x), dw[:, :, None])[:, :, 0]
        X[n + 1] = x + drift * dt + diff
        if not np.all(np.isfinite(X[n + 1])):
            b = int(np.argwhere(~np.isfinite(X[n + 1]).all(axis=1))[0, 0])
            raise SimulationFailure(n + 1, b)
        DnX[n] = _dnx_step(model, t, x, dt, dw)
    return PathEnsemble(dW=dW, X=X, DnX_next=DnX)


def exact_paths(model: FbsdeModel, dW: BrownianBatch) -> PathEnsemble:
    """Exact forward paths at the grid nodes.

    Supported for constant-coefficient models (X_t = x0 + mu t + sigma W_t,
    D_n X_{n+1} = sigma) and for the state-dependent diffusion benchmark,
    where X_t inverts x + arctan(x) componentwise and D_s X_t = sigma(X_t).
    """
    if dW.d != model.d:
        raise ValueError(f"Brownian dimension {dW.d} != model dimension {model.d}")
    grid = dW.grid
    N, B, d = grid.N, dW.B, model.d
    W = dW.cumulative()
    if model.is_abm:
        x_dummy = model.x0[None, :]
        mu0 = model.mu(0.0, x_dummy)[0]
        sig0 = model.sigma(0.0, x_dummy)[0]
        X = model.x0 + mu0 * grid.nodes[:, None, None] \
            + np.einsum("ij,nbj->nbi", sig0, W)
        DnX = np.broadcast_to(sig0, (N, B, d, d)).copy()
        return PathEnsemble(dW=dW, X=X, DnX_next=DnX)
    if model.has_lambda_paths:
        r0 = model.x0 + np.arctan(model.x0)
        X = lambda_root(r0 + W)
        sig_next = (1.0 + X[1:] ** 2) / (2.0 + X[1:] ** 2)
        DnX = np.zeros((N, B, d, d))
        idx = np.arange(d)
        DnX[:, :, idx, idx] = sig_next
        return PathEnsemble(dW=dW, X=X, DnX_next=DnX)
    raise UnsupportedOperationError(
        f"model {model.name!r} has no exact path representation"
    )
