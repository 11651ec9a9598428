"""Iterative initial-state estimation from a recorded output.

Case I assumes the initial state lies in a known ball of radius ``R``.
Radii double every step, each step gets a shorter window on which the
operator contracts for the current radius, and the estimate is
``xi_nu = z_nu(t_nu)``. Case II needs no bound: branch ``i`` runs Case I
pretending the bound is ``i`` from a zero guess, and the answer is the
diagonal ``xi_nu^nu``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import GramianSingular, GridTooCoarse
from .numerics import TimeGrid, Trajectory, rk4
from .reconstruction import ContractionSearcher, fixed_point_map
from .system import InputSignal, as_output

log = logging.getLogger(__name__)

__all__ = [
    "EstimationRun",
    "EstimateSequence",
    "StepResult",
    "iterate_step",
    "estimate_known_bound",
    "estimate_general",
    "forward_propagate",
]


@dataclass
class EstimateSequence:
    values: List[np.ndarray]

    @property
    def deltas(self) -> List[float]:
        v = self.values
        return [float(np.linalg.norm(v[i + 1] - v[i])) for i in range(len(v) - 1)]

    def __len__(self):
        return len(self.values)

    def __getitem__(self, i):
        return self.values[i]


@dataclass
class EstimationRun:
    case: str
    ell: float
    radii: List[float] = field(default_factory=list)
    times: List[float] = field(default_factory=list)
    iterates: List[Trajectory] = field(default_factory=list)
    estimates: List[np.ndarray] = field(default_factory=list)
    certificates: List[Optional[float]] = field(default_factory=list)
    converged: bool = False
    failed: bool = False
    diagnostics: List[str] = field(default_factory=list)
    branches: list = field(default_factory=list)

    @property
    def final_estimate(self) -> Optional[np.ndarray]:
        for e in reversed(self.estimates):
            if e is not None:
                return e
        return None

    @property
    def sequence(self) -> EstimateSequence:
        return EstimateSequence([e for e in self.estimates if e is not None])

    def table(self):
        """Per-iteration rows: nu, R, t, xi, |delta xi|, contraction ratio."""
        rows = []
        prev = None
        for i, (R, t, xi) in enumerate(zip(self.radii, self.times, self.estimates)):
            delta = None
            if xi is not None and prev is not None:
                delta = float(np.linalg.norm(xi - prev))
            rows.append({
                "nu": i + 1,
                "R": R,
                "t": t,
                "xi": None if xi is None else [float(v) for v in xi],
                "delta": delta,
                "ratio": self.certificates[i] if i < len(self.certificates) else None,
            })
            if xi is not None:
                prev = xi
        return rows


@dataclass
class StepResult:
    z: Trajectory
    ratio: Optional[float]


def _noise_floor(z: Trajectory) -> float:
    return 1e-9 * (1.0 + z.sup_norm())


def iterate_step(bundle, z_prev: Trajectory) -> StepResult:
    """One Picard step on the bundle's window: restrict ``z_prev`` to
    ``[t0, T]`` and apply the operator.

    The realized ratio ``|F(z_next) - z_next| / |z_next - z_prev|`` is the
    operator's Lipschitz quotient on the pair actually visited; it is
    ``None`` when the step is below the rounding noise floor.
    """
    if z_prev.grid.t_end < bundle.T * (1 - 1e-12) - 1e-300:
        raise ValueError("z_prev must cover the new window")
    z_in = z_prev.resample(bundle.grid)
    z_next = fixed_point_map(bundle, z_in)
    step = (z_next - z_in).sup_norm()
    if step <= _noise_floor(z_next):
        return StepResult(z_next, None)
    again = fixed_point_map(bundle, z_next)
    return StepResult(z_next, float((again - z_next).sup_norm() / step))


def _constant(grid: TimeGrid, value, n) -> Trajectory:
    return Trajectory(grid, np.broadcast_to(np.asarray(value, dtype=float).reshape(n), (grid.n_nodes, n)))


def _initial_guess(z_init, grid, n):
    if z_init is None:
        return _constant(grid, np.zeros(n), n)
    if isinstance(z_init, Trajectory):
        return z_init
    return _constant(grid, z_init, n)


def estimate_known_bound(model, y, u: InputSignal, R: float, ell: float = 0.5,
                         n_iters: int = 12, z_init=None, *, t_hi: float = 1e-2,
                         gamma: float = 0.25, n_steps: int = 256, n_pairs: int = 64,
                         seed: int = 0, tol_abs: float = 1e-6, max_retries: int = 3,
                         ells=None, radii=None, searcher: Optional[ContractionSearcher] = None,
                         case: str = "I", readout: str = "t_nu") -> EstimationRun:
    """Case I: initial state known to lie in the open ball of radius ``R``.

    ``ells``/``radii`` override the per-step contraction targets and radii
    (the hybrid observer tightens the targets step by step). With
    ``tol_abs > 0`` the run stops once two consecutive estimate changes
    fall below it; ``tol_abs = 0`` always runs ``n_iters`` estimates.

    ``readout`` picks where each iterate is read: ``"t_nu"`` gives
    ``xi_nu = z_nu(t_nu)``; ``"t0"`` gives ``z_nu(t0)``, the Gramian
    one-shot reconstruction with the previous iterate inside the
    correction term (exact after one step when ``f`` vanishes).
    """
    if readout not in ("t_nu", "t0"):
        raise ValueError("readout must be 't_nu' or 't0'")
    read = (lambda z, T: z(T)) if readout == "t_nu" else (lambda z, T: z.values[0].copy())
    if not R > 0:
        raise ValueError("R must be positive")
    if not 0.0 < ell <= 0.5:
        raise ValueError("ell must lie in (0, 1/2]")
    out = as_output(y)
    if searcher is None:
        searcher = ContractionSearcher(model, out, u, t_hi, gamma=gamma, n_steps=n_steps,
                                       n_pairs=n_pairs, seed=seed)
    if radii is None:
        radii = [R * 2.0 ** i for i in range(n_iters)]
    if ells is None:
        ells = [ell] * n_iters
    run = EstimationRun(case=case, ell=ell)

    try:
        found = searcher.find(radii[0], ells[0], 0)
    except (GridTooCoarse, GramianSingular) as exc:
        run.failed = True
        run.diagnostics.append(f"nu=1: {exc}")
        return run
    z = _initial_guess(z_init, found.bundle.grid, model.n)
    if z.sup_norm() >= radii[0]:
        run.diagnostics.append("initial guess is not inside the ball of radius R_1")
    run.radii.append(float(radii[0]))
    run.times.append(found.T)
    run.iterates.append(z)
    run.estimates.append(read(z, found.T))
    calm = 0

    for nu in range(1, n_iters):
        # z_{nu+1} = F_{t_nu}(z_nu); the window for t_nu may shrink on a
        # failed a-posteriori check, which also moves xi_nu
        ratio = None
        for attempt in range(max_retries + 1):
            try:
                res = iterate_step(found.bundle, z)
            except GramianSingular as exc:
                run.failed = True
                run.diagnostics.append(f"nu={nu}: {exc}")
                return run
            ratio = res.ratio
            if ratio is None or ratio <= ells[nu - 1]:
                break
            if attempt == max_retries:
                run.failed = True
                run.certificates.append(ratio)
                run.diagnostics.append(
                    f"nu={nu}: realized ratio {ratio:.3g} exceeds ell={ells[nu - 1]} "
                    f"after {max_retries} window reductions")
                return run
            log.info("nu=%d: ratio %.3g > ell, shrinking window", nu, ratio)
            try:
                found = searcher.find(radii[nu - 1], ells[nu - 1], found.index + 1)
            except GridTooCoarse as exc:
                run.failed = True
                run.diagnostics.append(f"nu={nu}: {exc}")
                return run
            run.times[-1] = found.T
            run.estimates[-1] = read(z, found.T)
        run.certificates.append(ratio)
        z = res.z
        try:
            found = searcher.find(radii[nu], ells[nu], found.index + 1)
        except (GridTooCoarse, GramianSingular) as exc:
            run.failed = True
            run.diagnostics.append(f"nu={nu + 1}: {exc}")
            return run
        xi = read(z, found.T)
        if z.sup_norm(b=found.T) > radii[nu - 1] * (1 + 1e-12):
            run.diagnostics.append(f"nu={nu}: iterate left the ball of radius {radii[nu - 1]}")
        run.radii.append(float(radii[nu]))
        run.times.append(found.T)
        run.iterates.append(z)
        delta = float(np.linalg.norm(xi - run.estimates[-1]))
        run.estimates.append(xi)
        calm = calm + 1 if delta < tol_abs else 0
        if tol_abs > 0 and calm >= 2:
            run.converged = True
            break
    return run


def estimate_general(model, y, u: InputSignal, ell: float = 0.5, n_iters: int = 10, *,
                     t_hi: float = 1e-2, gamma: float = 0.25, n_steps: int = 256,
                     n_pairs: int = 64, seed: int = 0, max_retries: int = 3,
                     readout: str = "t_nu") -> EstimationRun:
    """Case II: branch ``i`` assumes the bound ``i`` and runs ``i`` estimates
    from the zero guess; the result is the diagonal ``xi_nu^nu``.

    Branches share one searcher, so windows found for a radius are reused.
    """
    if not 0.0 < ell <= 0.5:
        raise ValueError("ell must lie in (0, 1/2]")
    out = as_output(y)
    searcher = ContractionSearcher(model, out, u, t_hi, gamma=gamma, n_steps=n_steps,
                                   n_pairs=n_pairs, seed=seed)
    run = EstimationRun(case="II", ell=ell)
    for i in range(1, n_iters + 1):
        branch = estimate_known_bound(model, out, u, float(i), ell, n_iters=i, z_init=None,
                                      tol_abs=0.0, max_retries=max_retries,
                                      searcher=searcher, case=f"II/{i}", readout=readout)
        run.branches.append(branch)
        if branch.failed or len(branch.estimates) < i:
            run.radii.append(float(i) * 2.0 ** (i - 1))
            run.times.append(None)
            run.estimates.append(None)
            run.certificates.append(None)
            run.diagnostics.append(f"branch {i}: " + "; ".join(branch.diagnostics))
            continue
        run.radii.append(branch.radii[i - 1])
        run.times.append(branch.times[i - 1])
        run.estimates.append(branch.estimates[i - 1])
        certs = [c for c in branch.certificates if c is not None]
        run.certificates.append(max(certs) if certs else None)
    seq = [e for e in run.estimates if e is not None]
    if len(seq) >= 3:
        d = [float(np.linalg.norm(seq[j + 1] - seq[j])) for j in range(len(seq) - 1)]
        run.converged = d[-1] <= d[-2]
    return run


def forward_propagate(model, xi, y, u: InputSignal, grid: TimeGrid) -> Trajectory:
    """Integrate the dynamics from ``xi`` at ``grid.t_start`` with the
    measured output injected into ``A`` and ``f``."""
    out = as_output(y)
    y_fine = out.sample(grid.refine(2))
    rhs = model.injected_rhs(y_fine, u)
    return Trajectory(grid, rk4(rhs, np.asarray(xi, dtype=float).reshape(model.n), grid))
