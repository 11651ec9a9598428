"""Hybrid reset observer.

A copy of the plant runs between reset instants ``t0 + nu*sigma`` and is
re-initialised at each one to ``m_nu``: the estimate ``xi_nu`` of the
initial state pushed forward through the ``nu`` windows already elapsed.
The estimates come from one Case I chain whose contraction targets
``ell_nu`` shrink fast enough to beat the Gronwall growth ``C_nu``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import ObsvError
from .estimator import EstimationRun, estimate_known_bound
from .numerics import TimeGrid, Trajectory, rk4
from .reconstruction import ContractionSearcher, check_pe, compute_bundle
from .system import InputSignal, SimulatedOutput, estimate_lipschitz

log = logging.getLogger(__name__)

__all__ = [
    "ResetSchedule",
    "ObserverTrace",
    "build_reset_values",
    "run_hybrid_observer",
    "lipschitz_globally",
]


@dataclass
class ResetSchedule:
    """Reset instants and the tightened contraction targets.

    ``C_seq[nu] = exp(sigma*C)^(nu+1)`` bounds the error growth over
    ``nu + 1`` windows; ``ell_seq[nu] = min(1/2, q^nu / C_seq[nu+2])`` makes
    ``ell_seq[nu-1] * C_seq[nu] = q^(nu-1) / exp(sigma*C)`` for all but the
    first few ``nu``, a geometric sequence tending to zero.
    """

    t0: float
    sigma: float
    n_resets: int
    C_global: float
    q: float = 0.5

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.n_resets < 1:
            raise ValueError("n_resets must be >= 1")
        if self.C_global < 0:
            raise ValueError("Lipschitz constant must be >= 0")
        if not 0 < self.q < 1:
            raise ValueError("q must lie in (0, 1)")
        # ell_seq needs C up to n_resets + 2; past exp(700) doubles overflow
        if self.sigma * self.C_global * (self.n_resets + 3) > 700:
            raise ValueError("Gronwall factor exp(sigma*C)^(nu+1) overflows; "
                             "shorten sigma or use fewer resets")

    def C(self, nu: int) -> float:
        return math.exp(self.sigma * self.C_global) ** (nu + 1)

    @property
    def C_seq(self) -> List[float]:
        return [self.C(nu) for nu in range(self.n_resets + 1)]

    def ell(self, nu: int) -> float:
        return min(0.5, self.q ** nu / self.C(nu + 2))

    @property
    def ell_seq(self) -> List[float]:
        return [self.ell(nu) for nu in range(self.n_resets + 1)]

    def trend(self) -> List[Optional[float]]:
        """``ell_{nu-1} C_nu`` for ``nu = 1..n_resets`` (``None`` at 0)."""
        return [None] + [self.ell(nu - 1) * self.C(nu) for nu in range(1, self.n_resets + 1)]

    @property
    def instants(self) -> List[float]:
        return [self.t0 + nu * self.sigma for nu in range(self.n_resets + 1)]


@dataclass
class ObserverTrace:
    grid: TimeGrid
    xhat: Trajectory
    x: Trajectory
    resets: List[tuple]
    errors_at_resets: List[float]
    window_max_errors: List[float]
    left_limits: List[Optional[np.ndarray]] = field(default_factory=list)
    estimates: List[np.ndarray] = field(default_factory=list)
    estimation: Optional[EstimationRun] = None
    window_pe: List[bool] = field(default_factory=list)
    lipschitz_verified: bool = True
    warnings: List[str] = field(default_factory=list)
    schedule: Optional[ResetSchedule] = None

    @property
    def errors(self) -> np.ndarray:
        return np.linalg.norm(self.xhat.values - self.x.values, axis=1)


def lipschitz_globally(model, radius: float, y_range, u_range=(0.0, 0.0), t_span=(0.0, 1.0),
                       seed: int = 0, growth_tol: float = 0.05):
    """Sampled Lipschitz constant on a big ball plus a verdict on whether it
    looks global: the estimate must not grow when the ball is doubled."""
    c1 = estimate_lipschitz(model, t_span, y_range, radius, u_range, seed=seed)
    c2 = estimate_lipschitz(model, t_span, y_range, 2 * radius, u_range, seed=seed)
    return max(c1, c2), c2 <= c1 * (1 + growth_tol) + 1e-12


def _window_nodes(grid: TimeGrid, schedule: ResetSchedule) -> List[int]:
    per = schedule.sigma / grid.h
    steps = int(round(per))
    if steps < 2 or abs(per - steps) > 1e-6 * per:
        raise ObsvError("sigma must be a whole number (>= 2) of grid steps")
    if abs(grid.t_start - schedule.t0) > 1e-12 * max(1.0, abs(schedule.t0)):
        raise ObsvError("observer grid must start at the schedule's t0")
    nodes = [nu * steps for nu in range(schedule.n_resets + 1)]
    if nodes[-1] > grid.n_steps:
        raise ObsvError("grid is shorter than the reset schedule")
    return nodes


def build_reset_values(model, y, u: InputSignal, schedule: ResetSchedule, xi_seq,
                       grid: TimeGrid) -> List[np.ndarray]:
    """``m_0 = xi_0`` and ``m_nu``: ``xi_nu`` carried across windows
    ``0..nu-1`` by the injected dynamics, one window at a time."""
    nodes = _window_nodes(grid, schedule)
    if len(xi_seq) < schedule.n_resets + 1:
        raise ValueError("need one estimate per reset instant")
    y_fine = y.sample(grid.refine(2)) if hasattr(y, "sample") else y.resample(grid.refine(2))
    rhs = model.injected_rhs(y_fine, u)
    windows = [TimeGrid(grid.node(a), grid.node(b), b - a) for a, b in zip(nodes[:-1], nodes[1:])]
    # carry every pending estimate across each window together
    states = np.array([np.asarray(v, dtype=float).reshape(model.n)
                       for v in xi_seq[: schedule.n_resets + 1]])
    for k, g in enumerate(windows):
        states[k + 1:] = rk4(rhs, states[k + 1:], g)[-1]
    return list(states)


def run_hybrid_observer(model, x0_true, u: InputSignal, schedule: ResetSchedule,
                        grid: TimeGrid, *, R: float = 3.0, z_init=None, t_hi: float = 1e-2,
                        gamma: float = 0.25, n_steps: int = 256, n_pairs: int = 64,
                        seed: int = 0, substeps: int = 4, lipschitz_verified: bool = True,
                        readout: str = "t_nu", xi_override=None) -> ObserverTrace:
    """Simulate the plant, estimate, and run the reset observer over
    ``n_resets`` windows.

    The observer copy and the reset chaining integrate with ``substeps``
    RK4 steps per grid step; results are reported on ``grid``.
    ``xi_override`` replaces the estimate sequence (test hook: pass the
    true initial state to get the perfect-estimate observer).
    """
    output = SimulatedOutput(model, x0_true, u, schedule.t0)
    fine_grid = grid.refine(substeps)
    nodes = [a * substeps for a in _window_nodes(grid, schedule)]
    # truth and sensor come from the same refined simulation
    truth_fine = output.truth(fine_grid.refine(2))
    x_traj = Trajectory(grid, truth_fine.values[:: 2 * substeps])
    warnings = []
    if not lipschitz_verified:
        warnings.append("global Lipschitz bound not verified; convergence is not guaranteed")

    estimation = None
    count = schedule.n_resets + 1
    if xi_override is not None:
        xi = [np.asarray(xi_override, dtype=float).reshape(model.n)] * count
    else:
        searcher = ContractionSearcher(model, output, u, t_hi, gamma=gamma, n_steps=n_steps,
                                       n_pairs=n_pairs, seed=seed)
        radii = [float(R) * 2.0 ** nu for nu in range(count)]
        estimation = estimate_known_bound(
            model, output, u, R, 0.5, n_iters=count, z_init=z_init, tol_abs=0.0,
            ells=schedule.ell_seq, radii=radii, searcher=searcher, case="hybrid",
            readout=readout)
        if estimation.failed or len(estimation.estimates) < count:
            raise ObsvError("estimation for the reset values failed: "
                            + "; ".join(estimation.diagnostics))
        xi = estimation.estimates

    m = build_reset_values(model, output, u, schedule, xi, fine_grid)

    rhs = model.injected_rhs(output.sample(fine_grid.refine(2)), u)
    xhat = np.empty((fine_grid.n_nodes, model.n))
    left = [None]
    ends = nodes[1:] + [fine_grid.n_steps]
    for nu, (a, b) in enumerate(zip(nodes, ends)):
        if nu > 0:
            left.append(xhat[a].copy())
        if b - a >= 2:
            g = TimeGrid(fine_grid.node(a), fine_grid.node(b), b - a)
            xhat[a: b + 1] = rk4(rhs, m[nu], g)
        elif b > a:
            g = TimeGrid(fine_grid.node(a), fine_grid.node(a) + 2 * fine_grid.h, 2)
            xhat[a: b + 1] = rk4(rhs, m[nu], g)[: b - a + 1]
        # right-continuous: the reset value wins at the instant itself
        xhat[a] = m[nu]
    err = np.linalg.norm(xhat - truth_fine.values[::2], axis=1)
    errors_at = [float(err[a]) for a in nodes]
    win_max = [float(err[a: max(b, a + 1)].max()) for a, b in zip(nodes, ends)]

    window_pe = []
    for a in nodes:
        t_a = fine_grid.node(a)
        g = TimeGrid(t_a, t_a + min(schedule.sigma, t_hi), 64)
        sensor = SimulatedOutput(model, truth_fine.values[2 * a], u, t_a)
        try:
            window_pe.append(bool(check_pe(compute_bundle(model, sensor, u, g)).passed))
        except ObsvError:
            window_pe.append(False)
    for nu, ok in enumerate(window_pe):
        if not ok:
            warnings.append(f"persistence of excitation fails on window {nu}")

    resets = [(fine_grid.node(a), m[nu]) for nu, a in enumerate(nodes)]
    return ObserverTrace(
        grid=grid, xhat=Trajectory(grid, xhat[::substeps]), x=x_traj, resets=resets,
        errors_at_resets=errors_at, window_max_errors=win_max, left_limits=left,
        estimates=[np.asarray(v) for v in xi], estimation=estimation, window_pe=window_pe,
        lipschitz_verified=lipschitz_verified, warnings=warnings, schedule=schedule,
    )
