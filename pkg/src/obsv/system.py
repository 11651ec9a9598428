"""Systems ``x' = A(t,y,u) x + f(t,y,x,u)``, ``y = C(t,u) x``.

The triangular builder turns per-state expression strings into a model with
a superdiagonal ``A`` and output injection: the measured ``y`` replaces
``x1`` everywhere the triangular structure allows it.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import EvaluationError, ModelError, UnsupportedCheck
from .expression import Expr, compile_expr, parse, variables
from .numerics import TimeGrid, Trajectory, rk4

__all__ = [
    "InputSignal",
    "SystemModel",
    "TriangularSpec",
    "TriangularModel",
    "build_triangular",
    "H2Result",
    "check_h2",
    "estimate_lipschitz",
    "simulate_truth",
    "SimulatedOutput",
    "RecordedOutput",
    "as_output",
]


class InputSignal:
    """Input ``u(t)``: either one expression in ``t`` per channel or a
    piecewise-constant table. Zero channels is allowed."""

    def __init__(self, exprs: Sequence = (), breakpoints=None, values=None):
        if breakpoints is not None:
            bp = np.asarray(breakpoints, dtype=float)
            vals = np.asarray(values, dtype=float)
            if vals.ndim == 1:
                vals = vals[:, None]
            if bp.ndim != 1 or len(bp) == 0 or len(bp) != len(vals):
                raise ModelError("table needs one value row per breakpoint")
            if np.any(np.diff(bp) <= 0):
                raise ModelError("table breakpoints must be strictly increasing")
            self._table = (bp, vals)
            self._exprs = ()
            self.m = vals.shape[1]
        else:
            self._table = None
            self._exprs = tuple(parse(e) if isinstance(e, str) else e for e in exprs)
            for e in self._exprs:
                extra = variables(e) - {"t"}
                if extra:
                    raise ModelError(f"input expressions may only use t, found {sorted(extra)}")
            self.m = len(self._exprs)
        self._fns = tuple(compile_expr(e) for e in self._exprs)
        self._const = None
        if self._table is None and not any(variables(e) for e in self._exprs):
            self._const = np.array([fn({}) for fn in self._fns], dtype=float)
            self._const.flags.writeable = False

    @classmethod
    def constant(cls, *values):
        return cls([repr(float(v)) for v in values])

    @classmethod
    def table(cls, breakpoints, values):
        return cls(breakpoints=breakpoints, values=values)

    @property
    def is_table(self):
        return self._table is not None

    def sample(self, times) -> np.ndarray:
        """Input values at ``times`` as an array ``(len(times), m)``."""
        ts = np.atleast_1d(np.asarray(times, dtype=float))
        if self._table is not None:
            bp, vals = self._table
            j = np.clip(np.searchsorted(bp, ts, side="right") - 1, 0, len(bp) - 1)
            return vals[j]
        out = np.empty((len(ts), self.m))
        for c, fn in enumerate(self._fns):
            out[:, c] = np.broadcast_to(fn({"t": ts}), ts.shape)
        return out

    def __call__(self, t) -> np.ndarray:
        if self._const is not None:
            return self._const
        return self.sample([t])[0]


class SystemModel:
    """Evaluatable triple ``(A, f, C)`` with dimensions ``n, m, k``.

    ``A(t, y, u)``, ``f(t, y, x, u)`` and ``C(t, u)`` are pointwise
    callables. The ``*_many`` methods evaluate along a whole grid; ``x`` in
    :meth:`f_many` may carry extra leading batch axes. Subclasses override
    them with vectorised versions.
    """

    def __init__(self, n, m, k, A: Callable, f: Callable, C: Callable):
        self.n, self.m, self.k = int(n), int(m), int(k)
        self._A, self._f, self._C = A, f, C

    def A(self, t, y, u) -> np.ndarray:
        return np.asarray(self._A(t, y, u), dtype=float).reshape(self.n, self.n)

    def f(self, t, y, x, u) -> np.ndarray:
        return np.asarray(self._f(t, y, x, u), dtype=float).reshape(self.n)

    def C(self, t, u) -> np.ndarray:
        return np.asarray(self._C(t, u), dtype=float).reshape(self.k, self.n)

    def A_many(self, ts, ys, us) -> np.ndarray:
        return np.stack([self.A(t, y, u) for t, y, u in zip(ts, ys, us)])

    def C_many(self, ts, us) -> np.ndarray:
        return np.stack([self.C(t, u) for t, u in zip(ts, us)])

    def f_many(self, ts, ys, xs, us) -> np.ndarray:
        xs = np.asarray(xs, dtype=float)
        flat = xs.reshape((-1,) + xs.shape[-2:])
        out = np.empty_like(flat)
        for b in range(flat.shape[0]):
            for i, (t, y, u) in enumerate(zip(ts, ys, us)):
                out[b, i] = self.f(t, y, flat[b, i], u)
        return out.reshape(xs.shape)

    def output(self, t, x, u) -> np.ndarray:
        return self.C(t, u) @ x

    def closed_rhs(self, u: InputSignal):
        """Right-hand side of the plant itself, with ``y = C x`` fed back."""
        def rhs(t, x):
            uv = u(t)
            y = self.C(t, uv) @ x
            return self.A(t, y, uv) @ x + self.f(t, y, x, uv)
        return rhs

    def injected_rhs(self, y_of_t: Callable, u: InputSignal):
        """Right-hand side with the measured output injected into ``A`` and ``f``."""
        def rhs(t, x):
            uv = u(t)
            y = y_of_t(t)
            return self.A(t, y, uv) @ x + self.f(t, y, x, uv)
        return rhs


@dataclass(frozen=True)
class TriangularSpec:
    """Triangular system given by expressions.

    ``a`` holds ``a_2..a_n`` in ``(t, y, u)`` (``x1`` is accepted as a
    synonym of ``y``); ``f`` holds ``f_1..f_n`` where ``f_i`` for ``i < n``
    may use only ``t, x1, u`` and ``f_n`` any state.
    """

    n: int
    m: int
    a: tuple = ()
    f: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "a", tuple(self.a))
        object.__setattr__(self, "f", tuple(self.f))


_INDEXED = re.compile(r"^([xu])([0-9]+)$")


def _check_vars(expr: Expr, allowed_x: int, m: int, n: int, what: str):
    for name in variables(expr):
        mt = _INDEXED.match(name)
        if not mt:
            continue
        kind, idx = mt.group(1), int(mt.group(2))
        if kind == "u" and idx > m:
            raise ModelError(f"{what} references {name} but the system has m={m} inputs")
        if kind == "x":
            if idx > n:
                raise ModelError(f"{what} references {name} but the system has n={n} states")
            if idx > allowed_x:
                raise ModelError(
                    f"{what} references {name}; only x1..x{allowed_x} are allowed here "
                    "by the triangular structure"
                )


def _parse_all(items):
    return tuple(parse(s) if isinstance(s, str) else s for s in items)


class TriangularModel(SystemModel):
    def __init__(self, spec: TriangularSpec):
        n, m = spec.n, spec.m
        if n < 1:
            raise ModelError("n must be >= 1")
        if m < 0:
            raise ModelError("m must be >= 0")
        a = _parse_all(spec.a)
        f = _parse_all(spec.f)
        if len(a) != n - 1:
            raise ModelError(f"expected {n - 1} coefficients a_2..a_n, got {len(a)}")
        if len(f) != n:
            raise ModelError(f"expected {n} drift terms f_1..f_n, got {len(f)}")
        for i, e in enumerate(a):
            _check_vars(e, 1, m, n, f"a_{i + 2}")
        for i, e in enumerate(f):
            _check_vars(e, n if i == n - 1 else 1, m, n, f"f_{i + 1}")
        self.spec = spec
        self.a_exprs = a
        self.f_exprs = f
        self._a_fns = tuple(compile_expr(e) for e in a)
        self._f_fns = tuple(compile_expr(e) for e in f)
        super().__init__(n, m, 1, None, None, None)

    def _env(self, t, y, x, u, x1):
        env = {"t": t, "y": y, "x1": x1}
        for j in range(self.m):
            env[f"u{j + 1}"] = u[..., j]
        if x is not None:
            for j in range(1, self.n):
                env[f"x{j + 1}"] = x[..., j]
        return env

    def coefficients(self, t, y, u):
        """Values ``a_2..a_n`` (pointwise or along a grid)."""
        env = self._env(t, y, None, np.asarray(u, dtype=float), y)
        shape = np.shape(t)
        return [np.broadcast_to(fn(env), shape) for fn in self._a_fns]

    def A_many(self, ts, ys, us):
        ts = np.asarray(ts, dtype=float)
        y = np.asarray(ys, dtype=float)[..., 0]
        out = np.zeros(ts.shape + (self.n, self.n))
        for i, c in enumerate(self.coefficients(ts, y, np.asarray(us, dtype=float))):
            out[..., i, i + 1] = c
        return out

    def A(self, t, y, u):
        return self.A_many(np.array(t, dtype=float), np.atleast_1d(y), np.atleast_1d(u))

    def C_many(self, ts, us):
        out = np.zeros((len(ts), 1, self.n))
        out[:, 0, 0] = 1.0
        return out

    def C(self, t, u):
        c = np.zeros((1, self.n))
        c[0, 0] = 1.0
        return c

    def _f_eval(self, ts, x1, xs, us, shape):
        env = self._env(ts, x1, xs, us, x1)
        out = np.empty(shape + (self.n,))
        for i, fn in enumerate(self._f_fns):
            out[..., i] = np.broadcast_to(fn(env), shape)
        return out

    def f_many(self, ts, ys, xs, us):
        xs = np.asarray(xs, dtype=float)
        y = np.asarray(ys, dtype=float)[..., 0]
        return self._f_eval(np.asarray(ts, dtype=float), y, xs, np.asarray(us, dtype=float),
                            xs.shape[:-1])

    def f(self, t, y, x, u):
        x = np.asarray(x, dtype=float)
        return self.f_many(np.array(t, dtype=float), np.atleast_1d(y), x,
                           np.atleast_1d(np.asarray(u, dtype=float)))

    def raw_rhs_many(self, ts, xs, us):
        """Right-hand side as written, with the true ``x1`` (no injection)."""
        xs = np.asarray(xs, dtype=float)
        ts = np.asarray(ts, dtype=float)
        us = np.asarray(us, dtype=float)
        x1 = xs[..., 0]
        out = self._f_eval(ts, x1, xs, us, xs.shape[:-1])
        env = self._env(ts, x1, None, us, x1)
        for i, fn in enumerate(self._a_fns):
            out[..., i] += np.broadcast_to(fn(env), xs.shape[:-1]) * xs[..., i + 1]
        return out

    def _point_rhs(self, t, x1, x, uv):
        # scalar bindings keep the expression evaluator on its fast path;
        # x may also be a batch (B, n) of states sharing t and x1
        batch = x.ndim > 1
        env = {"t": float(t), "y": x1, "x1": x1}
        for j in range(self.m):
            env[f"u{j + 1}"] = float(uv[j])
        for j in range(1, self.n):
            env[f"x{j + 1}"] = x[:, j] if batch else float(x[j])
        out = np.empty(x.shape)
        for i, fn in enumerate(self._f_fns):
            out[..., i] = fn(env)
        for i, fn in enumerate(self._a_fns):
            out[..., i] += fn(env) * x[..., i + 1]
        return out

    def closed_rhs(self, u: InputSignal):
        def rhs(t, x):
            return self._point_rhs(t, x[..., 0] if x.ndim > 1 else float(x[0]), x, u(t))
        return rhs

    def injected_rhs(self, y_of_t, u):
        """Right-hand side with the measured ``y`` in place of ``x1``."""
        def rhs(t, x):
            return self._point_rhs(t, float(np.ravel(y_of_t(t))[0]), x, u(t))
        return rhs


def build_triangular(spec: TriangularSpec) -> TriangularModel:
    return TriangularModel(spec)


class H2Result(NamedTuple):
    passed: bool
    product: float


def check_h2(model, t0: float, y0: float, u0=(), threshold: float = 1e-12) -> H2Result:
    """Product of the superdiagonal coefficients at ``(t0, y0, u0)``; passes
    when it is farther than ``threshold`` from zero."""
    if not isinstance(model, TriangularModel):
        raise UnsupportedCheck("the H2 product condition is defined for triangular models only")
    u0 = np.atleast_1d(np.asarray(u0, dtype=float)).reshape(model.m)
    coeffs = model.coefficients(np.float64(t0), np.float64(y0), u0)
    product = float(np.prod([float(c) for c in coeffs])) if coeffs else 1.0
    return H2Result(abs(product) > threshold, product)


def _ball(rng, count, dim, radius):
    d = rng.standard_normal((count, dim))
    norms = np.linalg.norm(d, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    r = radius * rng.random((count, 1)) ** (1.0 / dim)
    # a quarter of the points on the sphere itself, where polynomial
    # nonlinearities are steepest
    r[: count // 4] = radius
    return d / norms * r


def estimate_lipschitz(model, t_span, y_range, radius, u_range=(0.0, 0.0),
                       samples: int = 4000, seed: int = 0, safety: float = 1.5) -> float:
    """Sampled Lipschitz constant of ``f`` in ``x`` over a box, times ``safety``.

    Half the pairs are independent points of the ball, half are a point and
    a tiny perturbation of it (which probes the Jacobian). Deterministic
    given ``seed``.
    """
    if samples < 100:
        raise ValueError("samples must be >= 100")
    rng = np.random.default_rng(seed)
    n, k, m = model.n, model.k, model.m
    ts = rng.uniform(t_span[0], t_span[1], samples)
    ys = rng.uniform(y_range[0], y_range[1], (samples, k))
    us = rng.uniform(u_range[0], u_range[1], (samples, m))
    z1 = _ball(rng, samples, n, radius)
    z2 = _ball(rng, samples, n, radius)
    half = samples // 2
    step = rng.standard_normal((samples - half, n))
    step *= (1e-4 * max(radius, 1e-300)) / np.maximum(np.linalg.norm(step, axis=1, keepdims=True), 1e-300)
    local = z1[half:] + step
    over = np.linalg.norm(local, axis=1) > radius
    local[over] = z1[half:][over] - step[over]
    z2[half:] = local
    try:
        f1 = model.f_many(ts, ys, z1, us)
        f2 = model.f_many(ts, ys, z2, us)
    except EvaluationError as exc:
        raise EvaluationError(f"f not evaluatable in the sampling box: {exc}", exc.point) from None
    bad = ~(np.all(np.isfinite(f1), axis=1) & np.all(np.isfinite(f2), axis=1))
    if bad.any():
        i = int(np.argmax(bad))
        raise EvaluationError("non-finite f", point={"t": ts[i], "y": ys[i].tolist(), "x": z1[i].tolist()})
    dz = np.linalg.norm(z1 - z2, axis=1)
    ok = dz > 0
    if not ok.any():
        return 0.0
    q = np.linalg.norm(f1 - f2, axis=1)[ok] / dz[ok]
    return float(safety * q.max())


def simulate_truth(model, x0, u: InputSignal, grid: TimeGrid):
    """Integrate the plant from ``x0`` and record its output."""
    x0 = np.asarray(x0, dtype=float).reshape(model.n)
    xs = rk4(model.closed_rhs(u), x0, grid)
    us = u.sample(grid.times)
    C = model.C_many(grid.times, us)
    ys = np.einsum("ikn,in->ik", C, xs)
    return Trajectory(grid, xs), Trajectory(grid, ys)


class SimulatedOutput:
    """Output of a simulated plant, sampled on demand on any grid.

    This plays the role of the sensor: estimation windows shrink by orders
    of magnitude and each one is sampled on its own uniform grid.
    """

    min_window = 0.0

    def __init__(self, model, x0, u: InputSignal, t0: float = 0.0):
        self.model = model
        self.x0 = np.asarray(x0, dtype=float).reshape(model.n)
        self.u = u
        self.t0 = float(t0)
        self._cache = {}

    def _run(self, grid: TimeGrid):
        hit = self._cache.get(grid)
        if hit is not None:
            return hit
        start = self.x0
        if grid.t_start != self.t0:
            if grid.t_start < self.t0:
                raise ValueError("cannot sample before the initial time")
            steps = max(2, int(np.ceil((grid.t_start - self.t0) / grid.h)))
            lead = TimeGrid(self.t0, grid.t_start, steps)
            start = rk4(self.model.closed_rhs(self.u), self.x0, lead)[-1]
        res = simulate_truth(self.model, start, self.u, grid)
        if len(self._cache) > 64:
            self._cache.clear()
        self._cache[grid] = res
        return res

    def sample(self, grid: TimeGrid) -> Trajectory:
        return self._run(grid)[1]

    def truth(self, grid: TimeGrid) -> Trajectory:
        return self._run(grid)[0]


class RecordedOutput:
    """Output known only as a sampled record; other grids interpolate it."""

    def __init__(self, y: Trajectory):
        self.y = y
        self.t0 = y.grid.t_start
        self.min_window = 4 * y.grid.h

    def sample(self, grid: TimeGrid) -> Trajectory:
        g = self.y.grid
        if grid.t_start < g.t_start - 1e-12 * g.h or grid.t_end > g.t_end + 1e-12 * g.h:
            raise ValueError("requested grid exceeds the recorded output span")
        if grid == g:
            return self.y
        return self.y.resample(grid)


def as_output(y):
    if isinstance(y, Trajectory):
        return RecordedOutput(y)
    return y
