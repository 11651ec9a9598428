"""Fixed-step numerical kernels: grids, sampled paths, RK4, trapezoid
quadrature and symmetric positive definite solves.

Everything here is deterministic. Paths are immutable after construction
(their arrays are flagged read-only) so they can be shared freely.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, NamedTuple

import math

import numpy as np
import scipy.linalg

from .errors import GramianSingular, IntegrationDiverged, ObsvError

__all__ = [
    "TimeGrid",
    "Trajectory",
    "MatrixPath",
    "rk4",
    "integrate_ode",
    "cumulative_trapezoid",
    "quadrature",
    "SPDSolution",
    "solve_spd",
]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid with nodes ``t_start + i*h``, ``i = 0..n_steps``."""

    t_start: float
    t_end: float
    n_steps: int

    def __post_init__(self):
        if not (np.isfinite(self.t_start) and np.isfinite(self.t_end)):
            raise ValueError("grid bounds must be finite")
        if not self.t_end > self.t_start:
            raise ValueError(f"t_end ({self.t_end}) must exceed t_start ({self.t_start})")
        if int(self.n_steps) != self.n_steps or self.n_steps < 2:
            raise ValueError(f"n_steps must be an integer >= 2, got {self.n_steps}")
        object.__setattr__(self, "t_start", float(self.t_start))
        object.__setattr__(self, "t_end", float(self.t_end))
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def h(self) -> float:
        return (self.t_end - self.t_start) / self.n_steps

    @property
    def n_nodes(self) -> int:
        return self.n_steps + 1

    @cached_property
    def times(self) -> np.ndarray:
        # multiplication, not accumulation: no drift
        t = self.t_start + np.arange(self.n_nodes) * self.h
        t.flags.writeable = False
        return t

    def node(self, i: int) -> float:
        return self.t_start + i * self.h

    def midpoints(self) -> np.ndarray:
        return self.t_start + (np.arange(self.n_steps) + 0.5) * self.h

    def refine(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.t_start, self.t_end, self.n_steps * factor)

    def nearest_node(self, t: float) -> int:
        i = int(round((t - self.t_start) / self.h))
        return min(max(i, 0), self.n_steps)

    def prefix(self, k: int) -> "TimeGrid":
        """Grid made of nodes ``0..k`` of this one."""
        if not 2 <= k <= self.n_steps:
            raise ValueError(f"prefix needs 2 <= k <= {self.n_steps}, got {k}")
        if k == self.n_steps:
            return self
        return TimeGrid(self.t_start, self.node(k), k)


def _freeze(a):
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


def _nodes_in(grid: TimeGrid, a, b):
    t = grid.times
    lo = grid.t_start if a is None else a
    hi = grid.t_end if b is None else b
    tol = 1e-12 * grid.h
    return (t >= lo - tol) & (t <= hi + tol)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Vector path sampled on a uniform grid.

    Off-node evaluation is piecewise linear, exact at nodes. Sup-norms are
    taken over the nodes only (Euclidean norm at each node).
    """

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] != self.grid.n_nodes:
            raise ValueError(
                f"values must have shape ({self.grid.n_nodes}, d), got {np.shape(self.values)}"
            )
        object.__setattr__(self, "values", _freeze(v))

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    def __call__(self, t):
        """Linear interpolation; ``t`` scalar gives a vector, array gives rows."""
        g = self.grid
        if isinstance(t, (float, int)):
            s = (t - g.t_start) / g.h
            r = round(s)
            if abs(s - r) <= 1e-12:
                return self.values[min(max(r, 0), g.n_steps)]
            i = min(max(math.floor(s), 0), g.n_steps - 1)
            w = s - i
            return (1.0 - w) * self.values[i] + w * self.values[i + 1]
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        s = (t_arr - g.t_start) / g.h
        i = np.clip(np.floor(s).astype(int), 0, g.n_steps - 1)
        w = (s - i)[:, None]
        out = (1.0 - w) * self.values[i] + w * self.values[i + 1]
        # exact at nodes
        on_node = np.isclose(s, np.round(s), rtol=0.0, atol=1e-12)
        if on_node.any():
            j = np.clip(np.round(s[on_node]).astype(int), 0, g.n_steps)
            out[on_node] = self.values[j]
        if np.ndim(t) == 0:
            return out[0]
        return out

    def sup_norm(self, a=None, b=None) -> float:
        mask = _nodes_in(self.grid, a, b)
        if not mask.any():
            return 0.0
        return float(np.max(np.linalg.norm(self.values[mask], axis=1)))

    def resample(self, grid: TimeGrid) -> "Trajectory":
        return Trajectory(grid, self(grid.times))

    def __sub__(self, other: "Trajectory") -> "Trajectory":
        if other.grid != self.grid:
            other = other.resample(self.grid)
        return Trajectory(self.grid, self.values - other.values)


@dataclass(frozen=True, eq=False)
class MatrixPath:
    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 3 or v.shape[0] != self.grid.n_nodes:
            raise ValueError(
                f"values must have shape ({self.grid.n_nodes}, r, c), got {np.shape(self.values)}"
            )
        object.__setattr__(self, "values", _freeze(v))

    @property
    def shape(self):
        return self.values.shape[1:]

    def __getitem__(self, i):
        return self.values[i]


def rk4(rhs: Callable, x_init, grid: TimeGrid) -> np.ndarray:
    """Classical RK4 on ``grid``; returns an array of shape ``(n_nodes, *x.shape)``.

    ``rhs(t, x)`` must return an array shaped like ``x``.
    """
    x = np.array(x_init, dtype=float)
    out = np.empty((grid.n_nodes,) + x.shape)
    out[0] = x
    if not np.all(np.isfinite(x)):
        raise IntegrationDiverged(0)
    h = grid.h
    t = grid.times
    # blow-up is reported through IntegrationDiverged, not overflow warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(grid.n_steps):
            ti = t[i]
            k1 = rhs(ti, x)
            k2 = rhs(ti + 0.5 * h, x + 0.5 * h * k1)
            k3 = rhs(ti + 0.5 * h, x + 0.5 * h * k2)
            k4 = rhs(ti + h, x + h * k3)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.all(np.isfinite(x)):
                raise IntegrationDiverged(i + 1)
            out[i + 1] = x
    return out


def integrate_ode(rhs: Callable, x_init, grid: TimeGrid) -> Trajectory:
    x0 = np.atleast_1d(np.asarray(x_init, dtype=float))

    def vec_rhs(t, x):
        return np.atleast_1d(np.asarray(rhs(t, x), dtype=float))

    return Trajectory(grid, rk4(vec_rhs, x0, grid))


def cumulative_trapezoid(values, h: float) -> np.ndarray:
    """Cumulative composite trapezoid along axis 0; row 0 is zero."""
    v = np.asarray(values, dtype=float)
    out = np.zeros_like(v)
    np.cumsum(0.5 * h * (v[:-1] + v[1:]), axis=0, out=out[1:])
    return out


def quadrature(path):
    """Cumulative integral of a Trajectory or MatrixPath, same type back."""
    if not np.all(np.isfinite(path.values)):
        raise ObsvError("non-finite integrand")
    return type(path)(path.grid, cumulative_trapezoid(path.values, path.grid.h))


class SPDSolution(NamedTuple):
    x: np.ndarray
    cond: float
    jitter: float


def solve_spd(M, b) -> SPDSolution:
    """Solve ``M s = b`` for symmetric positive definite ``M`` by Cholesky.

    The matrix is Jacobi-scaled first; Cholesky's accuracy is governed by the
    scaled condition number, which stays moderate for Gramians of short
    windows even when the raw one is ~1e20. One retry with diagonal jitter
    ``1e-12 * trace(M) / n`` is made before giving up.
    """
    M = np.asarray(M, dtype=float)
    b = np.asarray(b, dtype=float)
    n = M.shape[0]
    if M.shape != (n, n):
        raise ValueError(f"M must be square, got {M.shape}")
    if not np.all(np.isfinite(M)) or not np.all(np.isfinite(b)):
        raise GramianSingular("non-finite entries")
    M = 0.5 * (M + M.T)
    jitter = 0.0
    for attempt in range(2):
        Mj = M + jitter * np.eye(n) if jitter else M
        d = np.diag(Mj)
        if np.all(d > 0):
            s = 1.0 / np.sqrt(d)
            S = Mj * np.outer(s, s)
            try:
                c = scipy.linalg.cho_factor(S, lower=True, check_finite=False)
            except np.linalg.LinAlgError:
                c = None
            if c is not None and np.all(np.diag(c[0]) > 0):
                sb = (s * b.T).T
                x = (s * scipy.linalg.cho_solve(c, sb, check_finite=False).T).T
                ev = np.linalg.eigvalsh(Mj)
                cond = float(ev[-1] / ev[0]) if ev[0] > 0 else float("inf")
                return SPDSolution(x, cond, jitter)
        jitter = 1e-12 * np.trace(M) / n
        if not jitter > 0:
            break
    raise GramianSingular("Cholesky factorization failed after jitter")
