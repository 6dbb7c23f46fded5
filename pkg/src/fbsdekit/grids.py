"""Uniform time grids and seeded Brownian increment batches."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .seeds import generator


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of [0, T] into N intervals."""

    T: float
    N: int
    nodes: np.ndarray = field(repr=False)

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def dts(self) -> np.ndarray:
        return np.diff(self.nodes)

    def __post_init__(self):
        if self.nodes.shape != (self.N + 1,):
            raise ValueError("nodes must have N+1 entries")


def make_grid(T: float, N: int) -> TimeGrid:
    """Uniform grid with N+1 nodes on [0, T]."""
    if not (T > 0.0):
        raise ValueError(f"horizon T must be positive, got {T}")
    if int(N) < 1 or int(N) != N:
        raise ValueError(f"N must be a positive integer, got {N}")
    N = int(N)
    nodes = np.linspace(0.0, float(T), N + 1)
    nodes.flags.writeable = False
    return TimeGrid(T=float(T), N=N, nodes=nodes)


@dataclass(frozen=True)
class BrownianBatch:
    """Batch of Brownian increments dW_n(b) over a time grid.

    increments has shape (N, B, d); entry (n, b, :) is distributed
    N(0, dt_n * I_d).  Identical (grid, d, B, seed) always reproduces the
    same array: generation is one deterministic pass of a counter-based
    Philox stream keyed by the seed, independent of thread count or call
    order.
    """

    grid: TimeGrid
    d: int
    B: int
    increments: np.ndarray = field(repr=False)
    seed: int = 0

    def __post_init__(self):
        if self.increments.shape != (self.grid.N, self.B, self.d):
            raise ValueError(
                f"increments shape {self.increments.shape} != "
                f"{(self.grid.N, self.B, self.d)}"
            )

    def cumulative(self) -> np.ndarray:
        """Brownian path values W_{t_n}, shape (N+1, B, d); W_0 = 0."""
        W = np.zeros((self.grid.N + 1, self.B, self.d))
        np.cumsum(self.increments, axis=0, out=W[1:])
        return W


def sample_brownian(grid: TimeGrid, d: int, B: int, seed: int) -> BrownianBatch:
    """Sample B paths of d-dimensional Brownian increments on the grid."""
    if int(d) < 1:
        raise ValueError(f"dimension d must be >= 1, got {d}")
    if int(B) < 1:
        raise ValueError(f"batch size B must be >= 1, got {B}")
    d, B = int(d), int(B)
    gen = generator(seed)
    z = gen.standard_normal((grid.N, B, d))
    inc = z * np.sqrt(grid.dts)[:, None, None]
    inc.flags.writeable = False
    return BrownianBatch(grid=grid, d=d, B=B, increments=inc, seed=int(seed))
