"""Adaptive choice of partition and per-interval degrees.

Error model on an interval of degree N: e ~ a_N omega^{(N+1)/p}.  Refining
into m pieces multiplies the cost by m and the error by m^{1-(N+1)/p};
raising the degree multiplies the cost by d c_{N+1}/c_N and the error by
(a_{N+1}/a_N) omega^{1/p}.  Equating the error gains gives the refinement
rule implemented in :func:`decide`.

Costs are measured with a deterministic proxy (right-hand side evaluations
times the operation count of one evaluation) so that adaptive decisions, and
therefore all artifacts, are reproducible.
"""

from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from .error_rep import error_representation, forward_augmented
from .log_ode import (
    OdeSolverConfig,
    batched_log_flat,
    inner_config_for,
    pad_lie,
    path_log_signatures,
    solve_chains,
    solve_sweep,
)
from .vector_field import identity_payoff

log = logging.getLogger(__name__)

REFINE = "refine"
INCREASE_DEGREE = "increase-degree"

VARIANTS = ("er-predicting", "er-testing", "simple-first", "simple-full")
MAX_DEGREE = 5
MAX_ROUNDS = 30


# ---------------------------------------------------------------------------
# partition


@dataclass
class Interval:
    t_start: float
    t_end: float
    degree: int
    depth: int = 0
    contribution: float = float("nan")
    local_error: float = float("nan")
    weight: float = float("nan")
    cost: float = float("nan")

    @property
    def length(self):
        return self.t_end - self.t_start

    def halves(self):
        mid = 0.5 * (self.t_start + self.t_end)
        return (Interval(self.t_start, mid, self.degree, self.depth + 1),
                Interval(mid, self.t_end, self.degree, self.depth + 1))


class AdaptivePartition:
    """Ordered binary-dyadic intervals tiling [t0, t1]."""

    def __init__(self, t0, t1, n_initial, degree):
        if n_initial < 1:
            raise ValueError("need at least one initial interval")
        grid = np.linspace(t0, t1, n_initial + 1)
        self.t0 = float(t0)
        self.t1 = float(t1)
        self.initial = grid
        self.intervals = [Interval(float(a), float(b), int(degree)) for a, b in zip(grid[:-1], grid[1:])]

    def __len__(self):
        return len(self.intervals)

    @property
    def times(self):
        return np.array([iv.t_start for iv in self.intervals] + [self.intervals[-1].t_end])

    @property
    def degrees(self):
        return np.array([iv.degree for iv in self.intervals], dtype=int)

    def copy(self):
        new = AdaptivePartition.__new__(AdaptivePartition)
        new.t0, new.t1, new.initial = self.t0, self.t1, self.initial
        new.intervals = [Interval(**vars(iv)) for iv in self.intervals]
        return new

    def apply(self, actions, max_degree=MAX_DEGREE):
        """Apply {index: action}; returns the old indices that were raised in degree."""
        out, raised = [], []
        for k, iv in enumerate(self.intervals):
            act = actions.get(k)
            if act == REFINE:
                out.extend(iv.halves())
            elif act == INCREASE_DEGREE and iv.degree < max_degree:
                new = Interval(iv.t_start, iv.t_end, iv.degree + 1, iv.depth)
                raised.append((len(out), k))
                out.append(new)
            else:
                out.append(Interval(iv.t_start, iv.t_end, iv.degree, iv.depth))
        self.intervals = out
        return raised

    def refine_all(self):
        self.apply({k: REFINE for k in range(len(self))})

    def check(self):
        """Tiling and dyadic-descent invariants."""
        t = self.times
        if t[0] != self.t0 or t[-1] != self.t1 or not np.all(np.diff(t) > 0):
            return False
        for iv in self.intervals:
            base = np.searchsorted(self.initial, iv.t_start, side="right") - 1
            a, b = self.initial[base], self.initial[base + 1]
            frac = (iv.t_start - a) / (b - a) * 2 ** iv.depth
            if abs(frac - round(frac)) > 1e-9 or abs(iv.length * 2 ** iv.depth - (b - a)) > 1e-12 * (b - a) * 2 ** iv.depth:
                return False
        return True

    def counts_by_degree(self):
        out = {}
        for iv in self.intervals:
            out[iv.degree] = out.get(iv.degree, 0) + 1
        return dict(sorted(out.items()))


# ---------------------------------------------------------------------------
# cost model


@dataclass
class CostModelState:
    """Estimates of a_i and c_i with their sample history.

    a and c are normalised to 1 at ``base`` (degree 1 by default).  Only ratios
    enter :func:`decide`, so a run starting at a higher degree anchors there.
    """

    p: float = 1.0
    a_samples: dict = dc_field(default_factory=dict)
    c_samples: dict = dc_field(default_factory=dict)
    base: int = 1

    def a(self, i):
        if i == self.base:
            return 1.0
        s = self.a_samples.get(i)
        return statistics.median(s) if s else None

    def c(self, i):
        if i == self.base:
            return 1.0
        s = self.c_samples.get(i)
        return statistics.median(s) if s else None

    def known(self, i):
        return self.a(i) is not None and self.c(i) is not None

    def as_dict(self):
        return {"p": self.p,
                "a": {i: self.a(i) for i in sorted(set(self.a_samples) | {self.base})},
                "c": {i: self.c(i) for i in sorted(set(self.c_samples) | {self.base})}}


def infer_local_control(contribution, degree, a_n):
    """omega^{1/p} from e = a_N omega^{(N+1)/p}."""
    if contribution < 0:
        raise ValueError("contribution must be non-negative")
    if contribution == 0:
        return 0.0
    return (contribution / a_n) ** (1.0 / (degree + 1))


def decide(omega, degree, state, d):
    """Refine or raise the degree for an interval with control value ``omega``.

    Refine iff (a_N/a_{N+1})^{p/(N+1-p)} omega^{-1/(N+1-p)} <= (c_{N+1}/c_N) d.
    """
    p = state.p
    N = int(degree)
    if N + 1 <= p:
        return REFINE
    a_n, a_next = state.a(N), state.a(N + 1)
    c_n, c_next = state.c(N), state.c(N + 1)
    if None in (a_n, a_next, c_n, c_next):
        raise ValueError(f"no cost-model estimates for degree {N + 1}")
    expo = N + 1 - p
    if omega <= 0:
        return INCREASE_DEGREE
    lhs = (a_n / a_next) ** (p / expo) * omega ** (-1.0 / expo)
    rhs = (c_next / c_n) * d
    return REFINE if lhs <= rhs else INCREASE_DEGREE


def a_sample(i, a_i, e_i, e_next, rule="literal"):
    """Sample of a_{i+1} from the errors e_i, e_{i+1} of one interval.

    ``literal`` evaluates a_{i+1} = e_{i+1} (e_i/a_i)^{(i+2)/(i+1)}.
    ``consistent`` uses omega^{1/p} = (e_i/a_i)^{1/(i+1)} as in
    :func:`infer_local_control`, i.e. a_{i+1} = e_{i+1} (a_i/e_i)^{(i+2)/(i+1)},
    the only choice that keeps e_j = a_j omega^{(j+1)/p} for both degrees.
    """
    if rule == "literal":
        return e_next * (e_i / a_i) ** ((i + 2) / (i + 1))
    if rule == "consistent":
        return e_next * (a_i / e_i) ** ((i + 2) / (i + 1))
    raise ValueError(f"unknown rule {rule!r}")


def update_cost_estimates(state, i, t_i, t_next, e_i, e_next, d, rule="literal"):
    """Append samples c_{i+1} = c_i T_{i+1}/(T_i d) and a_{i+1}; returns the state."""
    if min(t_i, t_next, e_i, e_next) <= 0:
        raise ValueError("cost-model samples need positive inputs")
    c_i = state.c(i)
    a_i = state.a(i)
    if c_i is None or a_i is None:
        raise ValueError(f"no estimates for degree {i}")
    state.c_samples.setdefault(i + 1, []).append(c_i * t_next / (t_i * d))
    state.a_samples.setdefault(i + 1, []).append(a_sample(i, a_i, e_i, e_next, rule))
    return state


# ---------------------------------------------------------------------------
# problems and results


@dataclass
class Problem:
    """Everything defining one RDE solve."""

    name: str
    path: object
    field: object
    y0: np.ndarray
    payoff: object = None
    tol_abs: float = 1e-4
    tol_rel: float = 0.0
    p: float = 1.0
    initial_degree: int = 1
    initial_intervals: int = 4

    def __post_init__(self):
        self.y0 = np.asarray(self.y0, dtype=np.float64).reshape(-1)
        if self.payoff is None:
            self.payoff = identity_payoff(self.field.dim_state)


@dataclass
class RoundInfo:
    round: int
    n_intervals: int
    estimate: float
    by_degree: dict
    seconds: float


@dataclass
class AdaptiveResult:
    variant: str
    converged: bool
    partition: AdaptivePartition
    final_state: np.ndarray
    value: np.ndarray
    estimate: np.ndarray | None
    corrected: np.ndarray | None
    tolerance: float
    rounds: list
    breakdown: object = None
    cost_model: CostModelState | None = None
    trajectory: np.ndarray | None = None
    full_final: np.ndarray | None = None
    seconds: float = 0.0
    decisions: list = dc_field(default_factory=list)

    @property
    def n_intervals(self):
        return len(self.partition)

    def rounds_csv(self):
        lines = ["round,n_intervals,estimate,intervals_by_degree,seconds"]
        for r in self.rounds:
            deg = ";".join(f"{k}:{v}" for k, v in r.by_degree.items())
            lines.append(f"{r.round},{r.n_intervals},{format(r.estimate, '.17g')},{deg},{format(r.seconds, '.6g')}")
        return "\n".join(lines) + "\n"


def tolerance(problem, value):
    return max(problem.tol_abs, problem.tol_rel * float(np.linalg.norm(value)))


# ---------------------------------------------------------------------------
# trial computations (shared by bootstrap and er-testing)


def _logsigs(path, s, t, degree, top):
    d = path.dim
    sig = path.cache.signatures(np.asarray(s), np.asarray(t), degree)
    return pad_lie(batched_log_flat(sig, d, degree), d, degree, top)


def _sub_grid(t0, t1, m):
    g = t0 + (t1 - t0) * np.arange(m + 1) / m
    g[0], g[-1] = t0, t1
    return g


def trial_local(problem, intervals, starts, weights, degree, cfg, pieces=1, subdivisions=8):
    """Propagated local errors and cost when solving intervals at ``degree``.

    Each interval is solved with ``pieces`` equal steps (2 = refinement), and
    compared with ``subdivisions`` substeps per piece.  Returns
    (magnitudes, costs, coarse end states).
    """
    field, path = problem.field, problem.path
    n = len(intervals)
    coarse_w, fine_w = [], []
    for iv in intervals:
        g = _sub_grid(iv.t_start, iv.t_end, pieces)
        coarse_w.append(_logsigs(path, g[:-1], g[1:], degree, degree))
        fg = np.concatenate([_sub_grid(a, b, subdivisions)[:-1] for a, b in zip(g[:-1], g[1:])] + [[iv.t_end]])
        fine_w.append(_logsigs(path, fg[:-1], fg[1:], degree, degree))
    coarse, nfev = solve_chains(field, starts, np.stack(coarse_w), degree, cfg)
    fine, _ = solve_chains(field, starts, np.stack(fine_w), degree, cfg)
    errs = fine - coarse
    mags = np.linalg.norm(np.einsum("kce,ke->kc", weights, errs), axis=1)
    costs = nfev * field.eval_cost(degree)
    return mags, costs.astype(np.float64), coarse


# ---------------------------------------------------------------------------
# variants


def _record(result_rounds, rnd, part, est, t_start):
    info = RoundInfo(rnd, len(part), float(est), part.counts_by_degree(), time.perf_counter() - t_start)
    result_rounds.append(info)
    log.info("round %d: %d intervals %s, estimate %.3e, %.1fs", rnd, info.n_intervals, info.by_degree,
             info.estimate, info.seconds)


def run_adaptive(problem, variant="er-predicting", max_degree=MAX_DEGREE, max_rounds=MAX_ROUNDS,
                 subdivisions=8, ode_tol=None, cost_rule="consistent", full_error=False,
                 solution_degree=2):
    """Run one of the adaptive variants until the error target is met.

    :param problem: :class:`Problem`
    :param variant: one of ``er-predicting``, ``er-testing``, ``simple-first``, ``simple-full``
    :param ode_tol: fixed inner tolerance; by default 0.01 * TOL / n per round
    :param cost_rule: formula for a_{i+1} samples, see :func:`a_sample`
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    if not 1 <= max_degree <= MAX_DEGREE:
        raise ValueError(f"max degree must be in 1..{MAX_DEGREE}")
    if variant.startswith("simple"):
        return _run_simple(problem, variant, max_rounds, ode_tol)
    return _run_er(problem, variant, max_degree, max_rounds, subdivisions, ode_tol, cost_rule,
                   full_error, solution_degree)


def _cfg_for(tol, n, ode_tol):
    if ode_tol is not None:
        return OdeSolverConfig(rtol=ode_tol, atol=ode_tol)
    return inner_config_for(tol, n)


def _run_simple(problem, variant, max_rounds, ode_tol):
    start = time.perf_counter()
    path, field = problem.path, problem.field
    part = AdaptivePartition(path.t0, path.t1, problem.initial_intervals, problem.initial_degree)
    rounds = []
    prev = None
    tol = problem.tol_abs
    converged = False
    traj = None
    full_final = None
    value = None
    est = float("nan")
    for rnd in range(max_rounds):
        cfg = _cfg_for(tol, len(part), ode_tol)
        times, degrees = part.times, part.degrees
        top = int(degrees.max())
        if variant == "simple-full":
            fwd = forward_augmented(field, problem.y0, path, times, degrees, cfg, per_degree=False)
            traj, nfev = fwd.states, fwd.nfev
            full_final = _compose_increments(fwd.increments, field.dim_in + field.dim_state, top,
                                             problem.y0, field.dim_in)
        else:
            ws = path_log_signatures(path, times, degrees, top)
            out, nfev = solve_sweep(field, problem.y0, ws, top, cfg)
            traj = np.concatenate([problem.y0[None, :], out])
        costs = nfev * np.array([field.eval_cost(int(N)) for N in degrees], dtype=np.float64)
        for iv, c in zip(part.intervals, costs):
            iv.cost = float(c)
        value = problem.payoff(traj[-1])
        tol = tolerance(problem, value)
        if prev is not None:
            est = float(np.linalg.norm(value - prev))
        _record(rounds, rnd, part, est, start)
        if prev is not None and est <= tol:
            converged = True
            break
        prev = value
        if rnd == max_rounds - 1:
            break
        part.refine_all()
    return AdaptiveResult(variant, converged, part, traj[-1], value, None, None, tol, rounds,
                          trajectory=traj, full_final=full_final, seconds=time.perf_counter() - start)


def _compose_increments(incs, dim, degree, y0, d):
    """z_T from z_0 = (1, (0, y0)) and the per-interval increments."""
    from .tensor_algebra import TruncatedTensor, exp_n, tensor_mul
    z = exp_n(TruncatedTensor.from_level1(np.concatenate([np.zeros(d), y0]), degree))
    for inc in incs:
        z = tensor_mul(z, TruncatedTensor.from_flat(np.concatenate([[1.0], inc]), dim, degree))
    return z.to_flat()


def _run_er(problem, variant, max_degree, max_rounds, subdivisions, ode_tol, cost_rule,
            full_error, solution_degree):
    start = time.perf_counter()
    path, field = problem.path, problem.field
    d = field.dim_in
    part = AdaptivePartition(path.t0, path.t1, problem.initial_intervals, problem.initial_degree)
    cm = CostModelState(p=problem.p, base=problem.initial_degree)
    rounds, decisions = [], []
    tol = problem.tol_abs
    converged = False
    pending = []          # (new index, old degree, old magnitude, old cost) of raised intervals
    rep = None
    for rnd in range(max_rounds):
        cfg = _cfg_for(tol, len(part), ode_tol)
        times, degrees = part.times, part.degrees
        rep = error_representation(field, problem.y0, path, times, degrees, problem.payoff, cfg,
                                   subdivisions, full_error=full_error, solution_degree=solution_degree)
        bd = rep.breakdown
        mags = bd.magnitudes
        for iv, m, le, w, c in zip(part.intervals, mags, np.linalg.norm(bd.local_errors, axis=1),
                                   np.linalg.norm(bd.weights.reshape(len(mags), -1), axis=1), bd.cost):
            iv.contribution, iv.local_error, iv.weight, iv.cost = float(m), float(le), float(w), float(c)
        tol = tolerance(problem, bd.terminal_value)
        est = float(np.linalg.norm(bd.estimate))
        _record(rounds, rnd, part, est, start)
        # harvest cost-model samples from last round's degree increases
        for new_k, old_deg, old_mag, old_cost in pending:
            iv = part.intervals[new_k]
            if old_mag > 0 and iv.contribution > 0 and old_cost > 0 and iv.cost > 0:
                update_cost_estimates(cm, old_deg, old_cost, iv.cost, old_mag, iv.contribution, d, cost_rule)
        pending = []
        if est <= tol:
            converged = True
            break
        if rnd == max_rounds - 1:
            break
        n = len(part)
        flagged = [k for k in range(n) if mags[k] > tol / n]
        if variant == "er-predicting":
            actions = _predict_actions(problem, part, flagged, rep, cm, cfg, max_degree, subdivisions,
                                       cost_rule, decisions, rnd)
        else:
            actions = _test_actions(problem, part, flagged, rep, cfg, max_degree, subdivisions,
                                    decisions, rnd)
        snapshot = [(k, part.intervals[k].degree, part.intervals[k].contribution, part.intervals[k].cost)
                    for k in range(n)]
        raised = part.apply(actions, max_degree)
        pending = [(new_k, snapshot[old_k][1], snapshot[old_k][2], snapshot[old_k][3])
                   for new_k, old_k in raised]
    bd = rep.breakdown
    return AdaptiveResult(
        variant, converged, part, bd.final_state, bd.terminal_value, bd.estimate, bd.corrected, tol,
        rounds, breakdown=bd, cost_model=cm, trajectory=rep.forward.states,
        seconds=time.perf_counter() - start, decisions=decisions)


def _starts_and_weights(rep, ks):
    states = rep.forward.states
    w = rep.breakdown.weights
    return states[ks], w[ks]


def _predict_actions(problem, part, flagged, rep, cm, cfg, max_degree, subdivisions, cost_rule,
                     decisions, rnd):
    d = problem.field.dim_in
    actions = {}
    by_degree = {}
    for k in flagged:
        by_degree.setdefault(part.intervals[k].degree, []).append(k)
    for N, ks in sorted(by_degree.items()):
        if N >= max_degree or N + 1 <= cm.p:
            for k in ks:
                actions[k] = REFINE
            continue
        if not cm.known(N + 1):
            _bootstrap(problem, part, ks, rep, cm, cfg, N, subdivisions, cost_rule)
        for k in ks:
            iv = part.intervals[k]
            a_n = cm.a(N)
            w_p = infer_local_control(iv.contribution, N, a_n)
            omega = w_p ** cm.p
            act = decide(omega, N, cm, d)
            actions[k] = act
            decisions.append((rnd, iv.t_start, iv.t_end, N, act))
    return actions


def _bootstrap(problem, part, ks, rep, cm, cfg, N, subdivisions, cost_rule):
    """One trial degree increase on the worst flagged interval of degree N."""
    worst = max(ks, key=lambda k: part.intervals[k].contribution)
    iv = part.intervals[worst]
    starts, weights = _starts_and_weights(rep, np.array([worst]))
    e_n, t_n, _ = trial_local(problem, [iv], starts, weights, N, cfg, 1, subdivisions)
    e_up, t_up, _ = trial_local(problem, [iv], starts, weights, N + 1, cfg, 1, subdivisions)
    if e_n[0] > 0 and e_up[0] > 0:
        update_cost_estimates(cm, N, t_n[0], t_up[0], e_n[0], e_up[0], problem.field.dim_in, cost_rule)
    else:
        # degenerate sample (exact step); fall back to neutral ratios
        cm.c_samples.setdefault(N + 1, []).append(cm.c(N))
        cm.a_samples.setdefault(N + 1, []).append(cm.a(N))


def _test_actions(problem, part, flagged, rep, cfg, max_degree, subdivisions, decisions, rnd):
    actions = {}
    by_degree = {}
    for k in flagged:
        by_degree.setdefault(part.intervals[k].degree, []).append(k)
    for N, ks in sorted(by_degree.items()):
        ks_arr = np.array(ks)
        ivs = [part.intervals[k] for k in ks]
        if N >= max_degree:
            for k in ks:
                actions[k] = REFINE
            continue
        starts, weights = _starts_and_weights(rep, ks_arr)
        e_ref, c_ref, _ = trial_local(problem, ivs, starts, weights, N, cfg, 2, subdivisions)
        e_deg, c_deg, _ = trial_local(problem, ivs, starts, weights, N + 1, cfg, 1, subdivisions)
        for j, k in enumerate(ks):
            e0 = part.intervals[k].contribution
            gain_ref = (e0 - e_ref[j]) / max(c_ref[j], 1.0)
            gain_deg = (e0 - e_deg[j]) / max(c_deg[j], 1.0)
            act = REFINE if gain_ref >= gain_deg else INCREASE_DEGREE
            actions[k] = act
            decisions.append((rnd, ivs[j].t_start, ivs[j].t_end, N, act))
    return actions
