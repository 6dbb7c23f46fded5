"""Backward Riccati ODE system for the quadratic-terminal control benchmark,
plus the scalar root solve used by the state-dependent diffusion benchmark."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import IntegrationFailure


@dataclass(frozen=True)
class RiccatiTable:
    """Dense table of (P, Q, R) on a uniform grid over [0, T].

    P has shape (steps+1, d, d), Q (steps+1, d), R (steps+1,).  Node k holds
    the value at t_k = k * T / steps; the last node matches the terminal data
    (A, v, c) exactly.
    """

    T: float
    steps: int
    times: np.ndarray = field(repr=False)
    P: np.ndarray = field(repr=False)
    Q: np.ndarray = field(repr=False)
    R: np.ndarray = field(repr=False)

    def interpolate(self, t: float):
        """(P, Q, R) at time t, linear in t between table nodes."""
        t = float(np.clip(t, 0.0, self.T))
        s = t / self.T * self.steps
        k = min(int(np.floor(s)), self.steps - 1)
        w = s - k
        P = (1.0 - w) * self.P[k] + w * self.P[k + 1]
        Q = (1.0 - w) * self.Q[k] + w * self.Q[k + 1]
        R = (1.0 - w) * self.R[k] + w * self.R[k + 1]
        return P, Q, R


def _rhs(P, Q, R):
    S = P + P.T
    dP = S @ S
    dQ = 2.0 * S @ Q
    dR = float(Q @ Q) - np.trace(S)
    return dP, dQ, dR


def solve_riccati(A, v, c, T: float, steps: int = 10_000) -> RiccatiTable:
    """Integrate dP/dt = (P+P^T)^2, dQ/dt = 2(P+P^T)Q, dR/dt = |Q|^2 - tr(P+P^T)
    backward from the terminal data (A, v, c) at t = T down to t = 0.

    Classical fixed-step RK4 with step T/steps.  Raises IntegrationFailure
    naming the time at which any entry turns non-finite.
    """
    if int(steps) < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    steps = int(steps)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    d = A.shape[0]
    if A.shape != (d, d):
        raise ValueError(f"A must be square, got shape {A.shape}")
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.shape != (d,):
        raise ValueError(f"v must have length {d}, got shape {v.shape}")
    c = float(c)
    T = float(T)

    h = T / steps
    times = np.linspace(0.0, T, steps + 1)
    P = np.empty((steps + 1, d, d))
    Q = np.empty((steps + 1, d))
    R = np.empty(steps + 1)
    P[steps], Q[steps], R[steps] = A, v, c

    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(steps, 0, -1):
            p, q, r = P[k], Q[k], R[k]
            k1 = _rhs(p, q, r)
            k2 = _rhs(p - 0.5 * h * k1[0], q - 0.5 * h * k1[1], r - 0.5 * h * k1[2])
            k3 = _rhs(p - 0.5 * h * k2[0], q - 0.5 * h * k2[1], r - 0.5 * h * k2[2])
            k4 = _rhs(p - h * k3[0], q - h * k3[1], r - h * k3[2])
            P[k - 1] = p - h / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
            Q[k - 1] = q - h / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
            R[k - 1] = r - h / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
            if not (
                np.all(np.isfinite(P[k - 1]))
                and np.all(np.isfinite(Q[k - 1]))
                and np.isfinite(R[k - 1])
            ):
                raise IntegrationFailure(times[k - 1])

    for arr in (times, P, Q, R):
        arr.flags.writeable = False
    return RiccatiTable(T=T, steps=steps, times=times, P=P, Q=Q, R=R)


def lambda_root(r, tol: float = 1e-12):
    """Invert s + arctan(s) = r for s, elementwise.

    The map s -> s + arctan(s) is a strictly increasing bijection of R with
    derivative in (1, 2], so a Newton iteration safeguarded by bisection on
    the bracket [r - pi/2, r + pi/2] always converges.  The result satisfies
    |s + arctan(s) - r| <= tol.
    """
    if not (tol > 0.0):
        raise ValueError(f"tol must be positive, got {tol}")
    r_arr = np.asarray(r, dtype=float)
    scalar = r_arr.ndim == 0
    r_flat = np.atleast_1d(r_arr).copy()

    lo = r_flat - np.pi / 2
    hi = r_flat + np.pi / 2
    s = r_flat / 2.0
    for _ in range(100):
        f = s + np.arctan(s) - r_flat
        if np.all(np.abs(f) <= tol):
            break
        lo = np.where(f < 0, s, lo)
        hi = np.where(f > 0, s, hi)
        step = f / (1.0 + 1.0 / (1.0 + s * s))
        cand = s - step
        outside = (cand <= lo) | (cand >= hi)
        s = np.where(outside, 0.5 * (lo + hi), cand)
    if scalar:
        return float(s[0])
    return s.reshape(r_arr.shape)
