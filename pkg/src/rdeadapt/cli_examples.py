"""Example registry, reference solutions and run reports."""

from __future__ import annotations

import hashlib
import math
import os
import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import __version__
from .adaptive import VARIANTS, Problem, run_adaptive
from .log_ode import OdeSolverConfig, sweep
from .report import partition_csv, solution_csv, svg_plot, thin, to_json, write_text
from .rough_path import EXAMPLE_NAMES, SampledPath, build_example_path
from .tensor_algebra import TruncatedTensor, exp_n
from .vector_field import (
    FIELD_REGISTRY,
    coordinate_payoff,
    first_level_payoff,
    full_field,
    get_field,
    identity_payoff,
)

FULL_SOLUTION_DEGREE = 2


@dataclass(frozen=True)
class ExampleSettings:
    tol_abs: float
    tol_rel: float
    p: float
    payoff: str = "identity"


EXAMPLES = {
    "spike-path": ExampleSettings(1e-4, 1e-4, 1.0),
    "spike-field": ExampleSettings(1e-4, 1e-4, 1.0),
    "changing-roughness": ExampleSettings(5e-4, 5e-4, 2.0),
    "langevin": ExampleSettings(1e-6, 0.0, 2.0, payoff="q"),
}

DEFAULT_Y0 = {"scalar-linear": (1.0,)}


def initial_degree_for(p):
    """Lowest degree N with N + 1 > p."""
    return max(1, int(math.floor(p)))


_FULL_FIELDS = {}


def _full(field, degree):
    key = (id(field), degree)
    if key not in _FULL_FIELDS:
        _FULL_FIELDS[key] = full_field(field, degree)
    return _FULL_FIELDS[key]


def _promote(field, y0, payoff, degree=FULL_SOLUTION_DEGREE):
    """Problem data for the full solution on T_1^N(R^e)."""
    e = field.dim_state
    big = _full(field, degree)
    z0 = exp_n(TruncatedTensor.from_level1(y0, degree)).to_flat()[1:]
    if payoff is None or payoff.name == "identity":
        g = identity_payoff(big.dim_state)
    else:
        g = first_level_payoff(payoff, e, degree)
    return big, z0, g


def make_problem(name, path, field, y0=None, payoff=None, tol_abs=1e-4, tol_rel=1e-4, p=1.0,
                 full_error=False, initial_intervals=4):
    y0 = np.zeros(field.dim_state) if y0 is None else np.asarray(y0, dtype=np.float64).reshape(-1)
    if y0.shape[0] != field.dim_state:
        raise ValueError(f"initial value needs {field.dim_state} components, got {y0.shape[0]}")
    if path.dim != field.dim_in:
        raise ValueError(f"path dimension {path.dim} does not match field input dimension {field.dim_in}")
    if full_error:
        field, y0, payoff = _promote(field, y0, payoff)
    return Problem(name, path, field, y0, payoff=payoff, tol_abs=tol_abs, tol_rel=tol_rel, p=p,
                   initial_degree=initial_degree_for(p), initial_intervals=initial_intervals)


def build_problem(name, seed=0, horizon=None, full_scale=False, tol_abs=None, tol_rel=None, p=None,
                  n_samples=None, full_error=False, initial_intervals=4):
    """One of the registered examples with its default tolerances and roughness."""
    if name not in EXAMPLES:
        raise ValueError(f"unknown example {name!r}; choose from {', '.join(EXAMPLE_NAMES)}")
    cfg = EXAMPLES[name]
    path = build_example_path(name, seed=seed, n_samples=n_samples, horizon=horizon, full_scale=full_scale)
    field = get_field(name)
    payoff = coordinate_payoff(field.dim_state, 0) if cfg.payoff == "q" else None
    return make_problem(name, path, field, None, payoff,
                        cfg.tol_abs if tol_abs is None else tol_abs,
                        cfg.tol_rel if tol_rel is None else tol_rel,
                        cfg.p if p is None else p, full_error, initial_intervals)


# ---------------------------------------------------------------------------
# reference solutions


@dataclass
class Reference:
    state: np.ndarray
    value: np.ndarray
    mode: str
    key: str
    cached: bool
    seconds: float


def problem_hash(problem, mode, extra=()):
    h = hashlib.sha256()
    for part in (__version__, problem.name, problem.field.name, problem.payoff.name, mode, repr(extra)):
        h.update(str(part).encode())
        h.update(b"\0")
    for arr in (problem.path.times, problem.path.values, problem.y0):
        h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return h.hexdigest()[:24]


def default_cache_dir():
    base = os.environ.get("RDEADAPT_CACHE") or os.path.join(os.path.expanduser("~"), ".cache", "rdeadapt")
    return base


def make_reference(problem, mode="chord", n_intervals=None, degree=None, ode_tol=None, cache_dir=None):
    """Reference terminal state of ``problem``.

    ``chord`` solves the ODE along every linear segment of the sampled path
    with a tight inner tolerance; for a piecewise linear driver this is the
    exact solution up to the inner tolerance.  ``grid`` uses a uniform grid
    of ``n_intervals`` log-ODE steps of ``degree`` with tolerance ``ode_tol``.
    Results are cached on disk keyed by a hash of the problem data.
    """
    if mode == "chord":
        extra = ()
    elif mode == "grid":
        if not n_intervals or not degree:
            raise ValueError("grid reference needs n_intervals and degree")
        ode_tol = ode_tol or 1e-12
        extra = (int(n_intervals), int(degree), float(ode_tol))
    else:
        raise ValueError(f"unknown reference mode {mode!r}")
    key = problem_hash(problem, mode, extra)
    cache_dir = cache_dir if cache_dir is not None else default_cache_dir()
    fname = os.path.join(cache_dir, f"reference-{key}.npy") if cache_dir else None
    start = time.perf_counter()
    if fname and os.path.exists(fname):
        state = np.load(fname)
        return Reference(state, np.asarray(problem.payoff(state)), mode, key, True, time.perf_counter() - start)
    path = problem.path
    if mode == "chord":
        times = path.times
        degrees = np.ones(len(times) - 1, dtype=int)
        cfg = OdeSolverConfig(rtol=1e-13, atol=1e-15, max_steps=100000)
    else:
        times = np.linspace(path.t0, path.t1, int(n_intervals) + 1)
        degrees = np.full(int(n_intervals), int(degree))
        cfg = OdeSolverConfig(rtol=ode_tol, atol=ode_tol, max_steps=100000)
    res = sweep(problem.field, problem.y0, path, times, degrees, cfg)
    state = np.asarray(res.states[-1], dtype=np.float64)
    if fname:
        os.makedirs(cache_dir, exist_ok=True)
        tmp = fname + f".{os.getpid()}.tmp"
        with open(tmp, "wb") as fh:
            np.save(fh, state)
        os.replace(tmp, fname)
    return Reference(state, np.asarray(problem.payoff(state)), mode, key, False, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# reports


@dataclass
class RunReport:
    example: str
    algorithm: str
    tol_abs: float
    tol_rel: float
    tolerance: float
    p: float
    seed: int | None
    converged: bool
    rounds: int
    n_intervals: int
    intervals_by_degree: dict
    terminal_value: np.ndarray
    estimate: np.ndarray | None
    corrected_value: np.ndarray | None
    reference_value: np.ndarray | None
    true_error: float | None
    estimated_error: float | None
    corrected_error: float | None
    min_interval: tuple
    runtime_seconds: float
    reference_mode: str | None = None
    settings: dict = dc_field(default_factory=dict)

    def summary(self):
        """The summary.json content; ``runtime`` holds every clock-dependent field."""
        return {
            "example": self.example,
            "algorithm": self.algorithm,
            "seed": self.seed,
            "tol_abs": self.tol_abs,
            "tol_rel": self.tol_rel,
            "tolerance": self.tolerance,
            "p": self.p,
            "settings": self.settings,
            "converged": self.converged,
            "rounds": self.rounds,
            "n_intervals": self.n_intervals,
            "intervals_by_degree": {str(k): v for k, v in self.intervals_by_degree.items()},
            "min_interval": {"t_start": self.min_interval[0], "length": self.min_interval[1]},
            "terminal_value": _list(self.terminal_value),
            "estimate": _list(self.estimate),
            "corrected_value": _list(self.corrected_value),
            "reference": {"mode": self.reference_mode, "value": _list(self.reference_value)},
            "true_error": self.true_error,
            "estimated_error": self.estimated_error,
            "corrected_error": self.corrected_error,
            "runtime": {"seconds": self.runtime_seconds},
        }


def _list(x):
    return None if x is None else [float(v) for v in np.asarray(x).reshape(-1)]


def _norm(x):
    return float(np.linalg.norm(np.asarray(x).reshape(-1)))


def build_report(problem, result, reference=None, seed=None, settings=None):
    value = np.asarray(result.value)
    ref_val = None if reference is None else np.asarray(reference.value)
    est = None if result.estimate is None else np.asarray(result.estimate)
    corr = None if est is None else value + est
    true_err = None if ref_val is None else _norm(ref_val - value)
    corr_err = None if (ref_val is None or corr is None) else _norm(ref_val - corr)
    lengths = np.array([iv.length for iv in result.partition.intervals])
    k = int(np.argmin(lengths))
    return RunReport(
        example=problem.name, algorithm=result.variant, tol_abs=problem.tol_abs, tol_rel=problem.tol_rel,
        tolerance=result.tolerance, p=problem.p, seed=seed, converged=result.converged,
        rounds=len(result.rounds), n_intervals=result.n_intervals,
        intervals_by_degree=result.partition.counts_by_degree(), terminal_value=value, estimate=est,
        corrected_value=corr, reference_value=ref_val, true_error=true_err,
        estimated_error=None if est is None else (result.rounds[-1].estimate if result.rounds else _norm(est)),
        corrected_error=corr_err, min_interval=(result.partition.intervals[k].t_start, float(lengths[k])),
        runtime_seconds=result.seconds, reference_mode=None if reference is None else reference.mode,
        settings=dict(settings or {}))


def write_artifacts(out_dir, problem, result, report, plots=True):
    """summary.json, partition.csv, solution.csv, rounds.csv and SVG plots."""
    os.makedirs(out_dir, exist_ok=True)
    write_text(os.path.join(out_dir, "summary.json"), to_json(report.summary()) + "\n")
    write_text(os.path.join(out_dir, "partition.csv"), partition_csv(result.partition))
    times = result.partition.times
    states = np.asarray(result.trajectory)
    write_text(os.path.join(out_dir, "solution.csv"), solution_csv(times, states))
    write_text(os.path.join(out_dir, "rounds.csv"), result.rounds_csv())
    files = ["summary.json", "partition.csv", "solution.csv", "rounds.csv"]
    if plots:
        e = problem.field.dim_state
        show = min(e, 6)
        t_thin, s_thin = thin(times, states)
        series = [(f"y{i + 1}", t_thin, s_thin[:, i]) for i in range(show)]
        write_text(os.path.join(out_dir, "solution.svg"),
                   svg_plot(series, title=f"{problem.name}: solution", ylabel="y"))
        lengths = np.diff(times)
        degs = result.partition.degrees
        part_series = [("length", times, lengths), ("degree", times, degs.astype(float) * lengths.max() / max(degs.max(), 1))]
        write_text(os.path.join(out_dir, "partition.svg"),
                   svg_plot(part_series[:1], title=f"{problem.name}: interval lengths", ylabel="log10 length",
                            log_y=True, steps=True))
        write_text(os.path.join(out_dir, "degrees.svg"),
                   svg_plot([("degree", times, degs.astype(float))], title=f"{problem.name}: interval degrees",
                            ylabel="degree", steps=True))
        files += ["solution.svg", "partition.svg", "degrees.svg"]
    return files


# ---------------------------------------------------------------------------
# commands


def _run(problem, algorithm, out, seed, max_degree, ode_tol, subdivisions, reference, cache_dir, plots,
         max_rounds, settings):
    if algorithm not in VARIANTS:
        raise ValueError(f"unknown algorithm {algorithm!r}; choose from {', '.join(VARIANTS)}")
    result = run_adaptive(problem, algorithm, max_degree=max_degree, subdivisions=subdivisions,
                          ode_tol=ode_tol, max_rounds=max_rounds)
    ref = None
    if reference != "none":
        if reference == "grid":
            top = int(result.partition.degrees.max())
            tol = (ode_tol if ode_tol is not None else 0.01 * result.tolerance / result.n_intervals) / 100
            ref = make_reference(problem, "grid", 8 * result.n_intervals, top, max(tol, 1e-14), cache_dir)
        else:
            ref = make_reference(problem, "chord", cache_dir=cache_dir)
    report = build_report(problem, result, ref, seed, settings)
    if out:
        write_artifacts(out, problem, result, report, plots)
    return report, result


def cmd_example(name, algorithm="er-predicting", out=None, seed=0, tol_abs=None, tol_rel=None, p=None,
                max_degree=5, ode_tol=None, subdivisions=8, horizon=None, full_error=False, full_scale=False,
                reference="chord", cache_dir=None, plots=True, max_rounds=30, initial_intervals=4):
    """Build a registered example, solve it and write the artifacts to ``out``."""
    problem = build_problem(name, seed=seed, horizon=horizon, full_scale=full_scale, tol_abs=tol_abs,
                            tol_rel=tol_rel, p=p, full_error=full_error, initial_intervals=initial_intervals)
    settings = {"max_degree": max_degree, "ode_tol": ode_tol, "subdivisions": subdivisions,
                "horizon": horizon, "full_error": full_error, "full_scale": full_scale,
                "initial_intervals": initial_intervals, "samples": int(problem.path.n_segments)}
    return _run(problem, algorithm, out, seed, max_degree, ode_tol, subdivisions, reference, cache_dir, plots,
                max_rounds, settings)


def cmd_solve(path_file, field_name, algorithm="er-predicting", out=None, y0=None, tol_abs=1e-4, tol_rel=1e-4,
              p=1.0, max_degree=5, ode_tol=None, subdivisions=8, full_error=False, reference="chord",
              cache_dir=None, plots=True, max_rounds=30, initial_intervals=4, seed=None):
    """Solve with a user-supplied sampled path (CSV ``t,x1,...,xd``) and a registered field."""
    if field_name not in FIELD_REGISTRY:
        raise ValueError(f"unknown field {field_name!r}; choose from {', '.join(FIELD_REGISTRY)}")
    with open(path_file, newline="") as fh:
        path = SampledPath.from_csv(fh, name=os.path.basename(path_file))
    field = get_field(field_name)
    if y0 is None:
        y0 = DEFAULT_Y0.get(field_name, (0.0,) * field.dim_state)
    problem = make_problem(f"{os.path.basename(path_file)}:{field_name}", path, field, y0, None,
                           tol_abs, tol_rel, p, full_error, initial_intervals)
    settings = {"max_degree": max_degree, "ode_tol": ode_tol, "subdivisions": subdivisions,
                "full_error": full_error, "initial_intervals": initial_intervals, "y0": _list(problem.y0),
                "samples": int(path.n_segments)}
    return _run(problem, algorithm, out, seed, max_degree, ode_tol, subdivisions, reference, cache_dir, plots,
                max_rounds, settings)
