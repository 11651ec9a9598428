"""Fundamental matrix, observability Gramian, nonlinear correction and the
contraction operator whose fixed point is the true state trajectory.

On a window grid ``t_0 .. t_N`` everything reduces to node arrays:

* ``Phi[i]``  fundamental matrix ``Phi(t_i, t0)`` (RK4 of ``Phi' = A Phi``)
* ``G[i]``    ``Phi' C' C Phi`` at ``t_i``; ``Psi`` is its cumulative trapezoid
* ``b[i]``    cumulative trapezoid of ``Phi' C' y``
* ``w[i]``    cumulative trapezoid of ``Phi^{-1} f(t, y, z, u)``
* ``Xi[i]``   cumulative trapezoid of ``G w``

and the operator is ``F_T(z)(t_i) = Phi[i] (Psi[k]^{-1} (b[k] - Xi[k]) + w[i])``
with ``k`` the node of ``T``. Because ``Phi(t, rho) = Phi(t) Phi(rho)^{-1}``
the convolution term costs one cumulative sum instead of a double loop.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import GramianSingular, GridTooCoarse, IntegrationDiverged
from .numerics import MatrixPath, TimeGrid, Trajectory, cumulative_trapezoid, solve_spd
from .system import InputSignal, as_output

log = logging.getLogger(__name__)

__all__ = [
    "GramianBundle",
    "ContractionReport",
    "PEResult",
    "fundamental_matrix",
    "gramian_psi",
    "compute_bundle",
    "check_pe",
    "xi_map",
    "one_shot_initial_state",
    "fixed_point_map",
    "contraction_modulus",
    "random_pairs",
    "ContractionSearch",
    "ContractionSearcher",
    "find_contraction_time",
]


def _rk4_linear_propagators(A_fine, h):
    """One-step RK4 propagators for ``X' = A(t) X``.

    ``A_fine`` holds ``A`` at nodes and midpoints (``2N+1`` entries). The
    product form is algebraically identical to the four RK4 stages.
    """
    n = A_fine.shape[-1]
    eye = np.eye(n)
    A0 = A_fine[0:-1:2]
    A1 = A_fine[1::2]
    A2 = A_fine[2::2]
    B1 = eye + 0.5 * h * A0
    A1B1 = A1 @ B1
    B2 = eye + 0.5 * h * A1B1
    A1B2 = A1 @ B2
    B3 = eye + h * A1B2
    return eye + (h / 6.0) * (A0 + 2.0 * A1B1 + 2.0 * A1B2 + A2 @ B3)


def _fine_samples(model, y_fine: Trajectory, u: InputSignal):
    g = y_fine.grid
    return model.A_many(g.times, y_fine.values, u.sample(g.times))


def fundamental_matrix(model, y, u: InputSignal, grid: TimeGrid) -> MatrixPath:
    """``Phi(t, t0)`` on ``grid`` with ``A`` frozen along the measured output.

    ``y`` may be a Trajectory (interpolated at RK4 midpoints) or an output
    source with a ``sample(grid)`` method.
    """
    y_fine = as_output(y).sample(grid.refine(2))
    M = _rk4_linear_propagators(_fine_samples(model, y_fine, u), grid.h)
    n = model.n
    phi = np.empty((grid.n_nodes, n, n))
    phi[0] = np.eye(n)
    for i in range(grid.n_steps):
        phi[i + 1] = M[i] @ phi[i]
        if not np.all(np.isfinite(phi[i + 1])):
            raise IntegrationDiverged(i + 1)
    return MatrixPath(grid, phi)


def _output_rows(model, grid, u):
    us = u.sample(grid.times)
    return us, model.C_many(grid.times, us)


def gramian_psi(phi: MatrixPath, model, u: InputSignal) -> MatrixPath:
    _, C = _output_rows(model, phi.grid, u)
    CPhi = C @ phi.values
    G = np.einsum("ikn,ikm->inm", CPhi, CPhi)
    psi = cumulative_trapezoid(G, phi.grid.h)
    psi = 0.5 * (psi + np.swapaxes(psi, 1, 2))
    return MatrixPath(phi.grid, psi)


@dataclass(eq=False)
class GramianBundle:
    """Everything about one window ``[t0, T]`` that does not depend on the
    trajectory guess: ``Phi``, ``Psi`` and friends, plus the sampled
    output and input they were built from."""

    model: object
    grid: TimeGrid
    phi: MatrixPath
    psi: MatrixPath
    min_eig: Trajectory
    y: Trajectory
    us: np.ndarray
    phi_inv: np.ndarray
    G: np.ndarray
    b: np.ndarray

    @property
    def t0(self):
        return self.grid.t_start

    @property
    def T(self):
        return self.grid.t_end

    @property
    def n(self):
        return self.model.n

    def node(self, T) -> int:
        """Node index for ``T``: ``None`` is the last node, ints pass through,
        floats snap to the nearest node."""
        if T is None:
            return self.grid.n_steps
        if isinstance(T, (int, np.integer)):
            k = int(T)
        else:
            k = self.grid.nearest_node(float(T))
        if not 1 <= k <= self.grid.n_steps:
            raise ValueError(f"node {k} outside (t0, T]")
        return k

    def psi_solve(self, k: int, rhs):
        """``Psi(t_k)^{-1} rhs``; also returns the condition estimate."""
        sol = solve_spd(self.psi.values[k], np.moveaxis(np.asarray(rhs), -1, 0))
        if sol.jitter:
            log.warning("Psi at t=%.6g needed diagonal jitter %.3g (condition %.3g)",
                        self.grid.node(k), sol.jitter, sol.cond)
        return np.moveaxis(sol.x, 0, -1), sol.cond

    def drift(self, Z) -> np.ndarray:
        """``f(t_i, y_i, Z_i, u_i)`` for ``Z`` of shape ``(..., N+1, n)``."""
        return self.model.f_many(self.grid.times, self.y.values, Z, self.us)

    def inner(self, F) -> np.ndarray:
        """``w``: cumulative integral of ``Phi(t0, s) F(s)``."""
        return _cum(np.einsum("inm,...im->...in", self.phi_inv, F), self.grid.h)

    def xi_from_inner(self, w) -> np.ndarray:
        return _cum(np.einsum("inm,...im->...in", self.G, w), self.grid.h)


def _cum(v, h):
    """Cumulative trapezoid along the node axis (second to last)."""
    if v.ndim == 2:
        return cumulative_trapezoid(v, h)
    return np.moveaxis(cumulative_trapezoid(np.moveaxis(v, -2, 0), h), 0, -2)


def compute_bundle(model, y, u: InputSignal, grid: TimeGrid) -> GramianBundle:
    """Build the window data for ``[grid.t_start, grid.t_end]``.

    ``y`` is the measured output: a Trajectory or an output source. It is
    sampled at nodes and RK4 midpoints.
    """
    out = as_output(y)
    y_fine = out.sample(grid.refine(2))
    phi = fundamental_matrix(model, out, u, grid)
    us, C = _output_rows(model, grid, u)
    y_nodes = Trajectory(grid, y_fine.values[::2])
    CPhi = C @ phi.values
    G = np.einsum("ikn,ikm->inm", CPhi, CPhi)
    psi = cumulative_trapezoid(G, grid.h)
    psi = 0.5 * (psi + np.swapaxes(psi, 1, 2))
    eye = np.broadcast_to(np.eye(model.n), phi.values.shape)
    try:
        phi_inv = np.linalg.solve(phi.values, eye)
    except np.linalg.LinAlgError:
        raise GramianSingular("fundamental matrix numerically singular") from None
    if not np.all(np.isfinite(phi_inv)):
        raise GramianSingular("fundamental matrix numerically singular")
    b = cumulative_trapezoid(np.einsum("ikn,ik->in", CPhi, y_nodes.values), grid.h)
    min_eig = np.linalg.eigvalsh(psi)[:, 0]
    return GramianBundle(
        model=model, grid=grid, phi=phi, psi=MatrixPath(grid, psi),
        min_eig=Trajectory(grid, min_eig), y=y_nodes, us=us,
        phi_inv=phi_inv, G=G, b=b,
    )


class PEResult(NamedTuple):
    passed: bool
    node_pass: np.ndarray
    first_fail: Optional[int]
    scaled_min_eig: np.ndarray


def check_pe(bundle: GramianBundle, eps_rel: float = 1e-10) -> PEResult:
    """Positive definiteness of ``Psi(t)`` at every node of ``(t0, T]``.

    The test is made on the unit-diagonal scaling ``D^-1/2 Psi D^-1/2``:
    a congruence, so it is positive definite exactly when ``Psi`` is, but
    its eigenvalue ratio does not collapse like ``dt^(2n-2)`` on short
    windows. A node passes when that ratio exceeds ``eps_rel``. Node 0
    (where ``Psi = 0``) is exempt.
    """
    psi = bundle.psi.values
    n_nodes = psi.shape[0]
    d = np.einsum("ijj->ij", psi)
    scaled = np.zeros(n_nodes)
    ok = np.all(d > 0, axis=1)
    if ok.any():
        s = 1.0 / np.sqrt(d[ok])
        S = psi[ok] * s[:, :, None] * s[:, None, :]
        ev = np.linalg.eigvalsh(S)
        scaled[ok] = ev[:, 0] / ev[:, -1]
    node_pass = ok & (scaled > eps_rel)
    node_pass[0] = True
    fails = np.flatnonzero(~node_pass)
    first = int(fails[0]) if len(fails) else None
    return PEResult(first is None, node_pass, first, scaled)


def _as_nodes(bundle, z) -> np.ndarray:
    if isinstance(z, Trajectory):
        if z.grid != bundle.grid:
            z = z.resample(bundle.grid)
        return z.values
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        return np.broadcast_to(z, (bundle.grid.n_nodes, bundle.n))
    return z


def xi_map(bundle: GramianBundle, d) -> Trajectory:
    """Nonlinear correction ``Xi(t; d)`` at every node."""
    D = _as_nodes(bundle, d)
    return Trajectory(bundle.grid, bundle.xi_from_inner(bundle.inner(bundle.drift(D))))


def one_shot_initial_state(bundle: GramianBundle, d, t_eval=None) -> np.ndarray:
    """Initial state from the output record, with ``d`` standing in for the
    unknown trajectory inside the correction term. Exact (up to quadrature)
    when ``f`` vanishes or ``d`` is the true trajectory."""
    k = bundle.node(t_eval)
    D = _as_nodes(bundle, d)
    xi = bundle.xi_from_inner(bundle.inner(bundle.drift(D)))
    x0, _ = bundle.psi_solve(k, bundle.b[k] - xi[k])
    return x0


def _apply(bundle, Z, k):
    """``F_T`` for a batch ``Z`` (``(..., N+1, n)``) with ``T = t_k``."""
    w = bundle.inner(bundle.drift(Z))
    xi = bundle.xi_from_inner(w)
    x0, _ = bundle.psi_solve(k, bundle.b[k] - xi[..., k, :])
    arg = x0[..., None, :] + w[..., : k + 1, :]
    return np.einsum("inm,...im->...in", bundle.phi.values[: k + 1], arg)


def _apply_difference(bundle, Z1, Z2, k):
    """``F_T(Z1) - F_T(Z2)`` without the data term, which cancels exactly."""
    dF = bundle.drift(Z1) - bundle.drift(Z2)
    w = bundle.inner(dF)
    xi = bundle.xi_from_inner(w)
    x0, _ = bundle.psi_solve(k, -xi[..., k, :])
    arg = x0[..., None, :] + w[..., : k + 1, :]
    return np.einsum("inm,...im->...in", bundle.phi.values[: k + 1], arg)


def fixed_point_map(bundle: GramianBundle, z, T=None) -> Trajectory:
    """Apply the contraction operator to the guess ``z`` on ``[t0, T]``.

    ``z`` is resampled onto the bundle grid if needed; the result lives on
    the nodes ``0..k`` of that grid, ``k`` being the node of ``T``.
    """
    k = bundle.node(T)
    if k < 2:
        raise ValueError("T must lie at least two grid steps after t0")
    values = _apply(bundle, _as_nodes(bundle, z), k)
    return Trajectory(bundle.grid.prefix(k), values)


@dataclass
class ContractionReport:
    T: float
    R: float
    ell_target: float
    ell_measured: float
    n_pairs: int

    @property
    def passed(self) -> bool:
        return self.ell_measured <= self.ell_target

    def to_dict(self):
        return {
            "T": self.T, "R": self.R, "ell_target": self.ell_target,
            "ell_measured": self.ell_measured, "n_pairs": self.n_pairs,
            "pass": self.passed,
        }


def _ball_points(rng, shape, n, R):
    d = rng.standard_normal(shape + (n,))
    nrm = np.linalg.norm(d, axis=-1, keepdims=True)
    nrm[nrm == 0] = 1.0
    r = R * rng.random(shape + (1,)) ** (1.0 / n)
    return d / nrm * r


def random_pairs(grid: TimeGrid, n: int, R: float, n_pairs: int, seed: int = 0, knots: int = 8):
    """Deterministic pairs of piecewise-linear trajectories inside the ball
    of radius ``R`` (sup-norm over nodes).

    Pairs cycle through three shapes: independent, near-duplicate (probes
    the local slope, with the base point pushed to the sphere where
    polynomial drifts are steepest) and constant. Each pair has its own
    seed so pairs can be generated independently.
    """
    children = np.random.SeedSequence(seed).spawn(n_pairs)
    s = np.linspace(0.0, 1.0, knots)
    tau = (grid.times - grid.t_start) / (grid.t_end - grid.t_start)
    D1 = np.empty((n_pairs, grid.n_nodes, n))
    D2 = np.empty_like(D1)
    for p, child in enumerate(children):
        rng = np.random.default_rng(child)
        kind = p % 3
        k1 = _ball_points(rng, (knots,), n, R)
        if kind == 0:
            k2 = _ball_points(rng, (knots,), n, R)
        elif kind == 1:
            k1 *= (R * rng.uniform(0.9, 1.0)) / np.maximum(np.linalg.norm(k1, axis=-1, keepdims=True), 1e-300)
            step = rng.standard_normal((knots, n))
            step *= 1e-3 * R / np.maximum(np.linalg.norm(step, axis=-1, keepdims=True), 1e-300)
            k2 = k1 * (1.0 - 1e-3) + step
            nrm = np.linalg.norm(k2, axis=-1, keepdims=True)
            k2 = np.where(nrm > R, k2 * (R / nrm), k2)
        else:
            c1 = _ball_points(rng, (), n, R)
            c2 = _ball_points(rng, (), n, R)
            k1 = np.broadcast_to(c1, (knots, n))
            k2 = np.broadcast_to(c2, (knots, n))
        for j in range(n):
            D1[p, :, j] = np.interp(tau, s, k1[:, j])
            D2[p, :, j] = np.interp(tau, s, k2[:, j])
    return D1, D2


def contraction_modulus(bundle: GramianBundle, R: float, n_pairs: int = 64, seed: int = 0,
                        ell: float = 0.5, T=None) -> ContractionReport:
    """Largest observed ratio ``|F(d1) - F(d2)|_(t0,T] / |d1 - d2|_[t0,T]``
    over random pairs with ``|d_i| <= R``."""
    if n_pairs < 32:
        raise ValueError("n_pairs must be >= 32")
    k = bundle.node(T)
    D1, D2 = random_pairs(bundle.grid, bundle.n, R, n_pairs, seed)
    num = np.linalg.norm(_apply_difference(bundle, D1, D2, k)[:, 1:, :], axis=-1).max(axis=1)
    den = np.linalg.norm((D1 - D2)[:, : k + 1, :], axis=-1).max(axis=1)
    ok = den > 0
    ratio = float(np.max(num[ok] / den[ok])) if ok.any() else 0.0
    return ContractionReport(float(bundle.grid.node(k)), float(R), float(ell), ratio, n_pairs)


class ContractionSearch(NamedTuple):
    T: float
    index: int
    bundle: GramianBundle
    report: ContractionReport
    pe: PEResult


class ContractionSearcher:
    """Geometric search ``T_j = t0 + gamma^j (t_hi - t0)`` for a window on
    which the operator contracts with modulus ``ell`` on the ball of radius
    ``R``.

    Bundles are cached by ``j`` and reports by ``(R, ell, j)`` so repeated
    searches (growing radii, Case II branches) share work.
    """

    def __init__(self, model, y, u: InputSignal, t_hi: float, t0: Optional[float] = None,
                 gamma: float = 0.25, n_steps: int = 256, n_pairs: int = 64, seed: int = 0,
                 eps_rel: float = 1e-10, max_candidates: int = 60):
        if not 0.0 < gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        self.model = model
        self.output = as_output(y)
        self.u = u
        self.t0 = float(self.output.t0 if t0 is None else t0)
        if not t_hi > self.t0:
            raise ValueError("t_hi must exceed t0")
        self.t_hi = float(t_hi)
        self.gamma = float(gamma)
        self.n_steps = int(n_steps)
        self.n_pairs = int(n_pairs)
        self.seed = int(seed)
        self.eps_rel = float(eps_rel)
        self.max_candidates = int(max_candidates)
        self._bundles = {}
        self._pe = {}
        self._reports = {}
        self.min_window = max(getattr(self.output, "min_window", 0.0),
                              1e3 * np.finfo(float).eps * max(1.0, abs(self.t0)))

    def candidate(self, j: int) -> float:
        return self.t0 + self.gamma ** j * (self.t_hi - self.t0)

    def bundle(self, j: int) -> GramianBundle:
        b = self._bundles.get(j)
        if b is None:
            grid = TimeGrid(self.t0, self.candidate(j), self.n_steps)
            b = compute_bundle(self.model, self.output, self.u, grid)
            self._bundles[j] = b
            self._pe[j] = check_pe(b, self.eps_rel)
        return b

    def pe(self, j: int) -> PEResult:
        self.bundle(j)
        return self._pe[j]

    def report(self, j: int, R: float, ell: float) -> ContractionReport:
        key = (float(R), float(ell), j)
        rep = self._reports.get(key)
        if rep is None:
            rep = contraction_modulus(self.bundle(j), R, self.n_pairs, self.seed, ell)
            self._reports[key] = rep
        return rep

    def find(self, R: float, ell: float, start: int = 0) -> ContractionSearch:
        j = start
        while j < self.max_candidates:
            T = self.candidate(j)
            if T - self.t0 < self.min_window:
                break
            pe = self.pe(j)
            if pe.passed:
                rep = self.report(j, R, ell)
                if rep.passed:
                    return ContractionSearch(T, j, self._bundles[j], rep, pe)
            j += 1
        raise GridTooCoarse(
            f"no window in [{self.t0}, {self.t_hi}] contracts with ell={ell} at R={R}; "
            "densify the output record or raise n_steps"
        )


def find_contraction_time(model, y, u: InputSignal, R: float, ell: float, t_hi: float,
                          gamma: float = 0.25, **kwargs) -> ContractionSearch:
    """First candidate window end (largest first) that passes both the
    contraction measurement and the persistence-of-excitation check."""
    if not 0.0 < ell <= 0.5:
        raise ValueError("ell must lie in (0, 1/2]")
    return ContractionSearcher(model, y, u, t_hi, gamma=gamma, **kwargs).find(R, ell)
