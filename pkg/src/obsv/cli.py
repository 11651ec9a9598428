"""Command-line front end.

    obsv simulate|check|estimate|observe --scenario <path|name> [--out DIR] [--seed N] [--strict]

Exit codes: 0 ok, 2 configuration error, 3 numerical failure, 4 a check
or verdict failed. ``OBSV_LOG`` sets the log level (default WARNING).
Every file is written to a temporary name and renamed into place.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, ObsvError
from .estimator import EstimationRun, estimate_general, estimate_known_bound
from .expression import Num
from .hybrid import ResetSchedule, lipschitz_globally, run_hybrid_observer
from .numerics import TimeGrid
from .reconstruction import (
    check_pe,
    compute_bundle,
    contraction_modulus,
)
from .scenario import ScenarioConfig, resolve_scenario
from .system import SimulatedOutput, check_h2, estimate_lipschitz, simulate_truth

log = logging.getLogger("obsv")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERDICT = 0, 2, 3, 4


class VerdictFailed(Exception):
    def __init__(self, name, message):
        self.name = name
        super().__init__(message)


@dataclass
class RunSummary:
    scenario: str
    command: str
    table: list = field(default_factory=list)
    verdicts: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return _dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "RunSummary":
        return cls(**json.loads(text))


# -- output helpers -----------------------------------------------------------

def _num(v):
    if v is None:
        return None
    v = float(v)
    return v if np.isfinite(v) else None


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _fmt(v) -> str:
    if v is None:
        return ""
    return format(float(v), ".17g")


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv(header, rows) -> str:
    lines = [",".join(header)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    return "\n".join(lines) + "\n"


# -- commands -------------------------------------------------------------------

def cmd_simulate(cfg: ScenarioConfig, out: Path, args) -> int:
    model = cfg.model
    grid = cfg.grid
    x, y = simulate_truth(model, cfg.x0, cfg.input, grid)
    us = cfg.input.sample(grid.times)
    header = ["t"] + [f"x{i + 1}" for i in range(model.n)] + ["y"] + [f"u{j + 1}" for j in range(model.m)]
    rows = (
        [t, *xv, yv[0], *uv]
        for t, xv, yv, uv in zip(grid.times, x.values, y.values, us)
    )
    _atomic_write(out / "truth.csv", _csv(header, rows))
    return EXIT_OK


def _check_report(cfg: ScenarioConfig, seed: int):
    model = cfg.model
    est = cfg.estimator
    t0 = cfg.t0
    u0 = cfg.input(t0)
    y0 = cfg.x0[0]
    out = SimulatedOutput(model, cfg.x0, cfg.input, t0)

    h2 = check_h2(model, t0, y0, u0, threshold=cfg.h2_threshold)
    grid = TimeGrid(t0, est.t_hi, est.n_steps)
    bundle = compute_bundle(model, out, cfg.input, grid)
    pe = check_pe(bundle)
    y_nodes = out.sample(grid).values[:, 0]
    C = estimate_lipschitz(model, (t0, est.t_hi), (float(y_nodes.min()), float(y_nodes.max())),
                           est.R, (float(np.min(u0)) if model.m else 0.0,
                                   float(np.max(u0)) if model.m else 0.0), seed=seed)
    rep = contraction_modulus(bundle, est.R, est.n_pairs, seed, est.ell)
    verdicts = {
        "H2": {"pass": bool(h2.passed), "product": _num(h2.product)},
        "PE": {"pass": bool(pe.passed),
               "first_fail": None if pe.first_fail is None else float(grid.node(pe.first_fail)),
               "min_scaled_eig": _num(np.min(pe.scaled_min_eig[1:])),
               "psi_cond": _psi_cond(bundle)},
        "lipschitz": {"pass": bool(np.isfinite(C)), "C": _num(C), "radius": est.R},
        "contraction": {**rep.to_dict(), "pass": bool(rep.passed)},
    }
    return verdicts


def _psi_cond(bundle):
    # raw condition of Psi at the window end; the solver works on the
    # Jacobi-scaled matrix, whose conditioning is 1 / min_scaled_eig
    ev = np.linalg.eigvalsh(bundle.psi.values[-1])
    return _num(ev[-1] / ev[0]) if ev[0] > 0 else None


def cmd_check(cfg: ScenarioConfig, out: Path, args) -> int:
    verdicts = _check_report(cfg, args.seed)
    summary = RunSummary(cfg.name, "check", verdicts={k: v["pass"] for k, v in verdicts.items()},
                         details=verdicts)
    text = summary.to_json()
    _atomic_write(out / "check.json", text)
    sys.stdout.write(text)
    for name in ("H2", "PE", "lipschitz", "contraction"):
        if not verdicts[name]["pass"]:
            raise VerdictFailed(name, f"check failed: {name}")
    return EXIT_OK


def _drift_is_zero(spec) -> bool:
    from .expression import parse
    return all(isinstance(e, Num) and e.value == 0 for e in map(parse, spec.f))


def _run_estimator(cfg: ScenarioConfig, seed: int) -> EstimationRun:
    model = cfg.model
    est = cfg.estimator
    out = SimulatedOutput(model, cfg.x0, cfg.input, cfg.t0)
    common = dict(t_hi=est.t_hi, gamma=est.gamma, n_steps=est.n_steps,
                  n_pairs=est.n_pairs, seed=seed, readout=est.readout)
    if est.case == "I":
        return estimate_known_bound(model, out, cfg.input, est.R, est.ell, n_iters=est.n_iters,
                                    z_init=est.z_init, tol_abs=est.tol_abs, **common)
    return estimate_general(model, out, cfg.input, est.ell, n_iters=est.n_iters, **common)


def cmd_estimate(cfg: ScenarioConfig, out: Path, args) -> int:
    model = cfg.model
    est = cfg.estimator
    x0 = np.asarray(cfg.x0)
    start = time.perf_counter()
    run = _run_estimator(cfg, args.seed)
    elapsed = time.perf_counter() - start
    k = int(np.floor(np.linalg.norm(x0))) + 1

    header = (["nu", "R", "t"] + [f"xi{i + 1}" for i in range(model.n)]
              + [f"e{i + 1}" for i in range(model.n)] + ["err"])
    if est.case == "II":
        header.append("bound")
    rows = []
    table = run.table()
    for row in table:
        xi = row["xi"]
        e = None if xi is None else np.asarray(xi) - x0
        vals = [row["nu"], row["R"], row["t"]]
        vals += [None] * model.n if xi is None else xi
        vals += [None] * model.n if e is None else list(e)
        vals.append(None if e is None else np.linalg.norm(e))
        if est.case == "II":
            nu = row["nu"]
            vals.append(est.ell ** (nu - 1) * (nu + k) if nu > k else None)
        rows.append(vals)
        row["err"] = None if e is None else _num(np.linalg.norm(e))
    _atomic_write(out / "estimates.csv", _csv(header, rows))

    pe_ok = None
    if run.times and run.times[0] is not None:
        grid = TimeGrid(cfg.t0, run.times[0], est.n_steps)
        bundle = compute_bundle(model, SimulatedOutput(model, cfg.x0, cfg.input, cfg.t0),
                                cfg.input, grid)
        pe_ok = bool(check_pe(bundle).passed)
    h2 = check_h2(model, cfg.t0, cfg.x0[0], cfg.input(cfg.t0), threshold=cfg.h2_threshold)
    final = run.final_estimate
    verdicts = {
        "PE": pe_ok,
        "H2": bool(h2.passed),
        "converged": bool(run.converged),
        "failed": bool(run.failed),
        "dead_beat": bool(_drift_is_zero(cfg.spec) and len(run.estimates) >= 2
                          and np.linalg.norm(run.estimates[1] - x0) < 1e-6),
    }
    details = {
        "case": est.case, "ell": est.ell, "seed": args.seed, "readout": est.readout,
        "final_estimate": None if final is None else [float(v) for v in final],
        "final_error": None if final is None else _num(np.linalg.norm(final - x0)),
        "diagnostics": list(run.diagnostics),
    }
    if est.case == "II":
        details["bound_k"] = k
    summary = RunSummary(cfg.name, "estimate", table=table, verdicts=verdicts, details=details)
    _atomic_write(out / "summary.json", summary.to_json())
    log.info("estimate finished in %.2f s", elapsed)
    if run.failed:
        sys.stderr.write("estimation failed: " + "; ".join(run.diagnostics) + "\n")
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_observe(cfg: ScenarioConfig, out: Path, args) -> int:
    if cfg.observer is None:
        raise ConfigError("scenario has no [observer] table", field="observer")
    model = cfg.model
    ob = cfg.observer
    est = cfg.estimator
    t0 = cfg.t0
    u_range = (0.0, 0.0)
    if model.m:
        us = cfg.input.sample(np.linspace(t0, t0 + ob.n_resets * ob.sigma, 257))
        u_range = (float(us.min()), float(us.max()))
    y_range = (-ob.lipschitz_radius, ob.lipschitz_radius)
    sampled, looks_global = lipschitz_globally(model, ob.lipschitz_radius, y_range, u_range,
                                               (t0, t0 + ob.n_resets * ob.sigma), seed=args.seed)
    if ob.lipschitz is not None:
        C, source, verified = ob.lipschitz, "override", True
    else:
        C, source, verified = sampled, "sampled", looks_global
    if not verified:
        msg = "global Lipschitz bound not verified (sampled constant grows with the ball)"
        if args.strict:
            raise VerdictFailed("lipschitz", msg)
        log.warning(msg)

    schedule = ResetSchedule(t0, ob.sigma, ob.n_resets, C)
    grid = TimeGrid(t0, t0 + ob.n_resets * ob.sigma, ob.n_resets * ob.steps_per_window)
    trace = run_hybrid_observer(
        model, cfg.x0, cfg.input, schedule, grid, R=est.R, z_init=est.z_init,
        t_hi=est.t_hi, gamma=est.gamma, n_steps=est.n_steps, n_pairs=est.n_pairs,
        seed=args.seed, substeps=ob.substeps, lipschitz_verified=verified,
        readout=est.readout)

    n = model.n
    header = (["t"] + [f"xhat{i + 1}" for i in range(n)] + [f"x{i + 1}" for i in range(n)]
              + ["err", "reset"])
    reset_nodes = {int(round((t - t0) / grid.h)) for t, _ in trace.resets}
    errs = trace.errors
    rows = (
        [t, *xh, *xv, e, 1 if i in reset_nodes else 0]
        for i, (t, xh, xv, e) in enumerate(zip(grid.times, trace.xhat.values, trace.x.values, errs))
    )
    _atomic_write(out / "observer.csv", _csv(header, rows))

    e0 = float(np.linalg.norm(np.asarray(trace.estimates[0]) - np.asarray(cfg.x0)))
    trend = [None if v is None else v * e0 for v in schedule.trend()]
    resets = {
        "scenario": cfg.name,
        "sigma": ob.sigma,
        "n_resets": ob.n_resets,
        "instants": [float(t) for t, _ in trace.resets],
        "m": [[float(v) for v in mv] for _, mv in trace.resets],
        "left_limits": [None if v is None else [float(c) for c in v] for v in trace.left_limits],
        "errors_at_resets": [float(v) for v in trace.errors_at_resets],
        "window_max_errors": [float(v) for v in trace.window_max_errors],
        "trend_bound": trend,
        "ell_seq": schedule.ell_seq,
        "C_seq": schedule.C_seq,
        "lipschitz": {"C": float(C), "source": source, "verified": bool(verified),
                      "sampled": _num(sampled)},
        "window_pe": list(trace.window_pe),
        "warnings": list(trace.warnings),
        "estimates": [[float(v) for v in xi] for xi in trace.estimates],
    }
    _atomic_write(out / "resets.json", _dumps(resets))
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "check": cmd_check,
    "estimate": cmd_estimate,
    "observe": cmd_observe,
}


def _u64(text):
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="obsv", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"obsv {__version__}")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--scenario", required=True, help="scenario file or bundled scenario name")
    p.add_argument("--out", help="output directory (default: the scenario's 'outputs')")
    p.add_argument("--seed", type=_u64, help="override the scenario seed")
    p.add_argument("--strict", action="store_true",
                   help="treat an unverified Lipschitz bound as a failure")
    return p


def main(argv=None) -> int:
    level = os.environ.get("OBSV_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_scenario(args.scenario)
        if args.seed is None:
            args.seed = cfg.estimator.seed
        out = Path(args.out if args.out else cfg.outputs)
        return COMMANDS[args.command](cfg, out, args)
    except ConfigError as exc:
        sys.stderr.write(f"obsv: configuration error: {exc}\n")
        return EXIT_CONFIG
    except VerdictFailed as exc:
        sys.stderr.write(f"obsv: {exc} [{exc.name}]\n")
        return EXIT_VERDICT
    except ObsvError as exc:
        sys.stderr.write(f"obsv: numerical failure: {exc}\n")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
