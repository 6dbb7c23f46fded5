"""Shared test oracles: Gauss-Hermite expectations, finite differences, and
gradient checks.  These stay independent of the code paths they verify."""

import numpy as np

_GH_CACHE = {}


def gauss_hermite(n: int = 200):
    if n not in _GH_CACHE:
        _GH_CACHE[n] = np.polynomial.hermite.hermgauss(n)
    return _GH_CACHE[n]


def gh_expectation(fn, x: float, mu: float, sigma: float, dt: float,
                   order: int = 0, n: int = 200) -> float:
    """E[ fn(x + mu dt + sigma dW) * dW^order ] with dW ~ N(0, dt), by
    Gauss-Hermite quadrature."""
    nodes, weights = gauss_hermite(n)
    dw = np.sqrt(2.0 * dt) * nodes
    vals = fn(x + mu * dt + sigma * dw)
    if order:
        vals = vals * dw ** order
    return float(np.sum(weights * vals) / np.sqrt(np.pi))


def central_diff(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of a vector."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for j in range(x.size):
        xp = x.copy(); xp.flat[j] += h
        xm = x.copy(); xm.flat[j] -= h
        g.flat[j] = (fn(xp) - fn(xm)) / (2.0 * h)
    return g


def central_jac(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite-difference Jacobian of a vector function of a vector."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fn(x))
    J = np.zeros(f0.shape + x.shape)
    for j in range(x.size):
        xp = x.copy(); xp.flat[j] += h
        xm = x.copy(); xm.flat[j] -= h
        J[..., j] = (np.asarray(fn(xp)) - np.asarray(fn(xm))) / (2.0 * h)
    return J


def param_gradcheck(loss_fn, params, h: float = 1e-5) -> float:
    """Worst normwise relative error between autodiff and finite-difference
    parameter gradients.  loss_fn() rebuilds the loss from current params."""
    from fbsdekit.nn import autodiff as ad

    loss = loss_fn()
    grads = ad.grad(loss, params)
    worst = 0.0
    for ip, p in enumerate(params):
        g = grads[ip].data
        gfd = np.zeros_like(p.data)
        it = np.nditer(p.data, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p.data[idx]
            p.data[idx] = orig + h
            lp = float(loss_fn().data)
            p.data[idx] = orig - h
            lm = float(loss_fn().data)
            p.data[idx] = orig
            gfd[idx] = (lp - lm) / (2.0 * h)
        scale = max(float(np.max(np.abs(gfd))), 1e-10)
        worst = max(worst, float(np.max(np.abs(g - gfd))) / scale)
    return worst
