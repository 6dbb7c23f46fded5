"""Adam optimizer and the piecewise learning-rate schedules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import NonFiniteGradient
from .autodiff import Tensor


@dataclass
class AdamState:
    m: list = field(repr=False)
    v: list = field(repr=False)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p.data) for p in params],
        v=[np.zeros_like(p.data) for p in params],
        step=0, beta1=beta1, beta2=beta2, eps=eps,
    )


def adam_step(state: AdamState, params, grads, lr: float):
    """One bias-corrected Adam update, in place.

    Rejects the whole update (raising NonFiniteGradient) if any gradient
    entry is non-finite; the step counter is not advanced in that case.
    """
    gs = []
    for i, g in enumerate(grads):
        gd = g.data if isinstance(g, Tensor) else np.asarray(g)
        if not np.all(np.isfinite(gd)):
            raise NonFiniteGradient(i)
        gs.append(gd)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, m, v, g in zip(params, state.m, state.v, gs):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def make_lr_schedule(name: str):
    """Named learning-rate schedules eta(i, I) for an I-iteration budget.

    'decay3' is the default stand-in for the adaptive strategy: piecewise
    constant 1e-2 -> 1e-3 -> 1e-4 switching at 40% and 80% of the budget.
    """
    if name == "decay3":
        def schedule(i: int, total: int) -> float:
            frac = i / max(total, 1)
            if frac < 0.4:
                return 1e-2
            if frac < 0.8:
                return 1e-3
            return 1e-4
        return schedule
    if name == "constant":
        return lambda i, total: 1e-3
    raise ValueError(f"unknown learning-rate schedule {name!r}")
