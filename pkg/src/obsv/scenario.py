"""Scenario files: one TOML document describing a system, its input, the
true initial state and the settings of each command.

Validation errors carry the dotted field name and, when it can be found,
the line of the offending key.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import List, Optional

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError, ModelError
from .expression import ParseError, parse
from .numerics import TimeGrid
from .system import InputSignal, TriangularSpec, build_triangular

__all__ = [
    "EstimatorConfig",
    "ObserverConfig",
    "ScenarioConfig",
    "load_scenario",
    "parse_scenario",
    "bundled_scenarios",
    "resolve_scenario",
]

MIN_WINDOW_NODES = 64


@dataclass
class EstimatorConfig:
    case: str = "I"
    R: float = 3.0
    ell: float = 0.5
    n_iters: int = 12
    z_init: Optional[List[float]] = None
    seed: int = 0
    gamma: float = 0.25
    t_hi: float = 1e-2
    n_steps: int = 256
    n_pairs: int = 64
    tol_abs: float = 1e-6
    readout: str = "t_nu"


@dataclass
class ObserverConfig:
    sigma: float
    n_resets: int
    steps_per_window: int = 256
    substeps: int = 4
    lipschitz: Optional[float] = None
    lipschitz_radius: float = 10.0


@dataclass
class ScenarioConfig:
    name: str
    spec: TriangularSpec
    input: InputSignal
    x0: List[float]
    t_span: tuple
    n_steps: int
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    observer: Optional[ObserverConfig] = None
    outputs: str = "out"
    h2_threshold: float = 1e-12
    source: Optional[str] = None

    @property
    def model(self):
        return build_triangular(self.spec)

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.t_span[0], self.t_span[1], self.n_steps)

    @property
    def t0(self) -> float:
        return self.t_span[0]


def _locate(text: str, section: Optional[str], key: str) -> Optional[int]:
    """Line number of ``key = ...`` inside ``[section]`` (1-based)."""
    current = None
    header = re.compile(r"^\s*\[\s*([A-Za-z0-9_.-]+)\s*\]\s*(#.*)?$")
    assign = re.compile(r"^\s*" + re.escape(key) + r"\s*=")
    for no, line in enumerate(text.splitlines(), 1):
        m = header.match(line)
        if m:
            current = m.group(1)
            if section is not None and key == "" and current == section:
                return no
            continue
        if current == section and assign.match(line):
            return no
    return None


class _Reader:
    def __init__(self, doc: dict, text: str):
        self.doc = doc
        self.text = text

    def error(self, message, section, key):
        name = f"{section}.{key}" if section else key
        return ConfigError(message, field=name, line=_locate(self.text, section, key))

    def table(self, section, required=True):
        t = self.doc.get(section)
        if t is None:
            if required:
                raise ConfigError(f"missing table [{section}]", field=section)
            return None
        if not isinstance(t, dict):
            raise ConfigError(f"{section} must be a table", field=section)
        return t

    def get(self, tbl, section, key, kind, default=None, required=False):
        if key not in tbl:
            if required:
                raise ConfigError(f"missing key {key!r}", field=f"{section}.{key}",
                                  line=_locate(self.text, section, ""))
            return default
        v = tbl[key]
        if kind is float:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise self.error(f"expected a number, got {v!r}", section, key)
            v = float(v)
            if not math.isfinite(v):
                raise self.error("value must be finite", section, key)
            return v
        if kind is int:
            if isinstance(v, bool) or not isinstance(v, int):
                raise self.error(f"expected an integer, got {v!r}", section, key)
            return v
        if kind is str:
            if not isinstance(v, str):
                raise self.error(f"expected a string, got {v!r}", section, key)
            return v
        if kind == "floats":
            if not isinstance(v, list) or not all(
                    isinstance(e, (int, float)) and not isinstance(e, bool) for e in v):
                raise self.error("expected a list of numbers", section, key)
            return [float(e) for e in v]
        if kind == "strings":
            if not isinstance(v, list) or not all(isinstance(e, str) for e in v):
                raise self.error("expected a list of expression strings", section, key)
            return list(v)
        raise AssertionError(kind)


def _check_exprs(rd: _Reader, section, key, exprs):
    for i, src in enumerate(exprs):
        try:
            parse(src)
        except ParseError as exc:
            raise rd.error(f"{key}[{i}]: {exc}", section, key) from None


def parse_scenario(text: str, source: Optional[str] = None) -> ScenarioConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"TOML syntax error: {exc}", line=int(m.group(1)) if m else None) from None
    rd = _Reader(doc, text)

    name = doc.get("name", Path(source).stem if source else "scenario")
    if not isinstance(name, str):
        raise rd.error("name must be a string", None, "name")
    outputs = doc.get("outputs", "out")
    if not isinstance(outputs, str):
        raise rd.error("outputs must be a directory path", None, "outputs")

    sy = rd.table("system")
    n = rd.get(sy, "system", "n", int, required=True)
    m = rd.get(sy, "system", "m", int, default=0)
    if n < 1:
        raise rd.error("n must be >= 1", "system", "n")
    if m < 0:
        raise rd.error("m must be >= 0", "system", "m")
    a = rd.get(sy, "system", "a", "strings", default=[])
    f = rd.get(sy, "system", "f", "strings", required=True)
    if len(a) != n - 1:
        raise rd.error(f"need {n - 1} coefficients a_2..a_n, got {len(a)}", "system", "a")
    if len(f) != n:
        raise rd.error(f"need {n} drift terms, got {len(f)}", "system", "f")
    _check_exprs(rd, "system", "a", a)
    _check_exprs(rd, "system", "f", f)
    h2_threshold = rd.get(sy, "system", "h2_threshold", float, default=1e-12)
    spec = TriangularSpec(n, m, tuple(a), tuple(f))
    try:
        build_triangular(spec)
    except ModelError as exc:
        key = "a" if str(exc).startswith("a_") else "f"
        raise rd.error(str(exc), "system", key) from None

    inp = rd.table("input", required=m > 0) or {}
    if "u" in inp:
        exprs = rd.get(inp, "input", "u", "strings")
        _check_exprs(rd, "input", "u", exprs)
        try:
            signal = InputSignal(exprs)
        except ModelError as exc:
            raise rd.error(str(exc), "input", "u") from None
    elif "breakpoints" in inp:
        bp = rd.get(inp, "input", "breakpoints", "floats")
        vals = inp.get("values")
        try:
            signal = InputSignal.table(bp, vals)
        except (ModelError, TypeError, ValueError) as exc:
            raise rd.error(f"bad input table: {exc}", "input", "breakpoints") from None
    else:
        signal = InputSignal(())
    if signal.m != m:
        raise ConfigError(f"input has {signal.m} channels but system.m = {m}", field="input")

    tr = rd.table("truth")
    x0 = rd.get(tr, "truth", "x0", "floats", required=True)
    if len(x0) != n:
        raise rd.error(f"x0 needs {n} components", "truth", "x0")
    t_span = rd.get(tr, "truth", "t_span", "floats", required=True)
    if len(t_span) != 2 or not t_span[1] > t_span[0]:
        raise rd.error("t_span must be [t_start, t_end] with t_end > t_start", "truth", "t_span")
    n_steps = rd.get(tr, "truth", "n_steps", int, default=1000)
    if n_steps < 2:
        raise rd.error("n_steps must be >= 2", "truth", "n_steps")

    es = rd.table("estimator", required=False) or {}
    est = EstimatorConfig()
    est.case = rd.get(es, "estimator", "case", str, default="I")
    if est.case not in ("I", "II"):
        raise rd.error("case must be 'I' or 'II'", "estimator", "case")
    est.R = rd.get(es, "estimator", "R", float, default=est.R)
    if not est.R > 0:
        raise rd.error("R must be positive", "estimator", "R")
    est.ell = rd.get(es, "estimator", "ell", float, default=est.ell)
    if not 0.0 < est.ell <= 0.5:
        raise rd.error("ell must lie in (0, 0.5]", "estimator", "ell")
    est.n_iters = rd.get(es, "estimator", "n_iters", int, default=est.n_iters)
    if est.n_iters < 1:
        raise rd.error("n_iters must be >= 1", "estimator", "n_iters")
    est.z_init = rd.get(es, "estimator", "z_init", "floats", default=None)
    if est.z_init is not None and len(est.z_init) != n:
        raise rd.error(f"z_init needs {n} components", "estimator", "z_init")
    est.seed = rd.get(es, "estimator", "seed", int, default=0)
    if not 0 <= est.seed < 2 ** 64:
        raise rd.error("seed must be an unsigned 64-bit integer", "estimator", "seed")
    est.gamma = rd.get(es, "estimator", "gamma", float, default=est.gamma)
    if not 0.0 < est.gamma < 1.0:
        raise rd.error("gamma must lie in (0, 1)", "estimator", "gamma")
    est.t_hi = rd.get(es, "estimator", "t_hi", float, default=est.t_hi)
    if not t_span[0] < est.t_hi:
        raise rd.error("t_hi must exceed the start time", "estimator", "t_hi")
    est.n_steps = rd.get(es, "estimator", "n_steps", int, default=est.n_steps)
    if est.n_steps < MIN_WINDOW_NODES:
        raise rd.error(f"need at least {MIN_WINDOW_NODES} nodes per window", "estimator", "n_steps")
    est.n_pairs = rd.get(es, "estimator", "n_pairs", int, default=est.n_pairs)
    if est.n_pairs < 32:
        raise rd.error("n_pairs must be >= 32", "estimator", "n_pairs")
    est.tol_abs = rd.get(es, "estimator", "tol_abs", float, default=est.tol_abs)
    if est.tol_abs < 0:
        raise rd.error("tol_abs must be >= 0", "estimator", "tol_abs")

    est.readout = rd.get(es, "estimator", "readout", str, default="t_nu")
    if est.readout not in ("t_nu", "t0"):
        raise rd.error("readout must be 't_nu' or 't0'", "estimator", "readout")

    ob = rd.table("observer", required=False)
    obs = None
    if ob is not None:
        sigma = rd.get(ob, "observer", "sigma", float, required=True)
        if not sigma > 0:
            raise rd.error("sigma must be positive", "observer", "sigma")
        n_resets = rd.get(ob, "observer", "n_resets", int, required=True)
        if n_resets < 1:
            raise rd.error("n_resets must be >= 1", "observer", "n_resets")
        obs = ObserverConfig(sigma, n_resets)
        obs.steps_per_window = rd.get(ob, "observer", "steps_per_window", int, default=256)
        if obs.steps_per_window < MIN_WINDOW_NODES:
            raise rd.error(f"need at least {MIN_WINDOW_NODES} nodes per window",
                           "observer", "steps_per_window")
        obs.substeps = rd.get(ob, "observer", "substeps", int, default=4)
        if obs.substeps < 1:
            raise rd.error("substeps must be >= 1", "observer", "substeps")
        obs.lipschitz = rd.get(ob, "observer", "lipschitz", float, default=None)
        if obs.lipschitz is not None and obs.lipschitz < 0:
            raise rd.error("lipschitz must be >= 0", "observer", "lipschitz")
        obs.lipschitz_radius = rd.get(ob, "observer", "lipschitz_radius", float, default=10.0)

    return ScenarioConfig(
        name=name, spec=spec, input=signal, x0=x0, t_span=(t_span[0], t_span[1]),
        n_steps=n_steps, estimator=est, observer=obs, outputs=outputs,
        h2_threshold=h2_threshold, source=source,
    )


def load_scenario(path) -> ScenarioConfig:
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario: {exc}") from None
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        raise ConfigError("scenario is not valid UTF-8") from None
    return parse_scenario(text, str(p))


def bundled_scenarios() -> List[str]:
    root = resources.files("obsv") / "scenarios"
    return sorted(e.name[:-5] for e in root.iterdir() if e.name.endswith(".toml"))


def resolve_scenario(name_or_path) -> ScenarioConfig:
    """Load a scenario file, or a bundled scenario by name."""
    p = Path(name_or_path)
    if p.exists():
        return load_scenario(p)
    bundled = resources.files("obsv") / "scenarios" / f"{name_or_path}.toml"
    if bundled.is_file():
        return parse_scenario(bundled.read_text(encoding="utf-8"), f"{name_or_path}.toml")
    raise ConfigError(f"no such scenario file or bundled scenario: {name_or_path}")
