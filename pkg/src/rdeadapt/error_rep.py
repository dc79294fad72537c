"""A-posteriori global error representation for log-ODE solutions.

The global error of a payoff g is written as a weighted sum of local errors,

    g(y_T) - g(ybar_T) ~ sum_k Psibar(t_k) ebar(t_k),

where Psibar solves the backward linear equation -dPsi = Psi dh driven by the
rough integral h = int f'(y) dx along the computed solution.  The pipeline:

1. forward sweep of the lifted field (Id; f) gives ybar and the increments of
   the full solution z = (x, y);
2. per interval, the increment of h is obtained by lifting g(y)(dx, dy) =
   f'(y) dx along the z increment;
3. the weights are propagated backwards with the linear field Psi -> Psi X;
4. local errors come from re-solving every interval with m substeps;
5. contributions Psibar ebar are summed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .log_ode import (
    OdeSolverConfig,
    batched_log_flat,
    pad_lie,
    path_log_signatures,
    solve_chains,
    solve_steps,
    solve_sweep,
)
from .tensor_algebra import exp_n, TruncatedTensor
from .vector_field import (
    first_level_payoff,
    forward_lift,
    full_field,
    identity_payoff,
    lie_size,
    linear_f3,
    rough_integral_lift,
)

_LIFT_CACHE = {}


def _cached(kind, field, degree):
    key = (kind, id(field), degree)
    obj = _LIFT_CACHE.get(key)
    if obj is None or obj[0] is not field:
        if kind == "f1":
            lift = forward_lift(field, degree)
        elif kind == "f2":
            lift = rough_integral_lift(field, degree)
        elif kind == "f3":
            lift = linear_f3(*degree)
        else:
            raise KeyError(kind)
        obj = (field, lift)
        _LIFT_CACHE[key] = obj
    return obj[1]


# ---------------------------------------------------------------------------
# results


@dataclass
class ForwardResult:
    times: np.ndarray
    degrees: np.ndarray
    states: np.ndarray          # (n+1, e) first-level solution at grid points
    increments: np.ndarray      # (n, lie_size(d+e, top)) z-increments, unit level implicit
    top: int
    nfev: np.ndarray
    cost: np.ndarray
    seconds: float


@dataclass
class DualWeights:
    times: np.ndarray
    weights: np.ndarray         # (n+1, c, e)

    @property
    def terminal(self):
        return self.weights[-1]


@dataclass
class ErrorBreakdown:
    """Per-interval local errors, weights and contributions."""

    times: np.ndarray
    degrees: np.ndarray
    local_errors: np.ndarray    # (n, e)
    weights: np.ndarray         # (n, c, e): weight at the right end of each interval
    contributions: np.ndarray   # (n, c)
    estimate: np.ndarray        # (c,)
    terminal_value: np.ndarray  # g(ybar_T)
    corrected: np.ndarray       # g(ybar_T) + estimate
    final_state: np.ndarray
    cost: np.ndarray            # forward cost proxy per interval
    seconds: dict

    @property
    def n_intervals(self):
        return len(self.degrees)

    @property
    def magnitudes(self):
        return np.linalg.norm(self.contributions, axis=1)

    def to_csv(self):
        c = self.contributions.shape[1]
        head = ["k", "t_start", "t_end", "degree", "local_err_norm", "weight_norm"]
        head += [f"contribution_{i + 1}" for i in range(c)]
        lines = [",".join(head)]
        le = np.linalg.norm(self.local_errors, axis=1)
        wn = np.linalg.norm(self.weights.reshape(len(self.degrees), -1), axis=1)
        for k in range(len(self.degrees)):
            row = [str(k), _g(self.times[k]), _g(self.times[k + 1]), str(int(self.degrees[k])),
                   _g(le[k]), _g(wn[k])] + [_g(v) for v in self.contributions[k]]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"


def _g(x):
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# pipeline steps


def forward_augmented(field, y0, path, times, degrees, cfg, per_degree=True):
    """Step 1: forward sweep of the lift of (Id; f).

    Returns the first-level states and the increments z_k^{-1} (x) z_{k+1}
    of the full solution z = (x, y) in G^N(R^{d+e}).

    :param per_degree: solve the base sweep first and lift each interval at its
        own degree, levels above it are zero. Otherwise one sweep of the lift at
        the maximum degree gives all levels up to it.
    """
    times = np.asarray(times, dtype=np.float64)
    degrees = np.asarray(degrees, dtype=int)
    top = int(degrees.max())
    e = field.dim_state
    ws = path_log_signatures(path, times, degrees, top)
    y0 = np.asarray(y0, dtype=np.float64)
    start = time.perf_counter()
    if per_degree:
        base, _ = solve_sweep(field, y0, ws, top, cfg)
        states = np.concatenate([y0.reshape(1, -1), base])
        inc = np.zeros((len(degrees), lie_size(field.dim_in + e, top)))
        nfev = np.zeros(len(degrees), dtype=np.int64)
        for N in np.unique(degrees):
            idx = np.nonzero(degrees == N)[0]
            lift = _cached("f1", field, int(N))
            s0 = np.concatenate([states[idx], np.zeros((idx.size, lift.lift_size))], axis=1)
            w = ws[idx, : lie_size(field.dim_in, int(N))]
            out, nfev[idx] = solve_steps(lift, s0, w, int(N), cfg)
            inc[idx, : lift.lift_size] = out[:, e:]
    else:
        lift = _cached("f1", field, top)
        out, nfev = solve_sweep(lift, y0, ws, top, cfg)
        states = np.concatenate([y0.reshape(1, -1), out[:, :e]])
        inc = out[:, e:]
    seconds = time.perf_counter() - start
    cost = nfev * np.array([field.eval_cost(int(N)) for N in degrees], dtype=np.float64)
    return ForwardResult(times, degrees, states, inc, top, nfev, cost, seconds)


def _truncate_lie_batch(flat_no_unit, dim, top, degree):
    """Levels 1..degree of vectors holding levels 1..top."""
    return flat_no_unit[..., : lie_size(dim, degree)]


def interval_rough_integrals(field, forward, cfg):
    """Step 2: increments of h = int f'(y) dx per interval, in G^N(R^{e^2}).

    Returned as flat levels 1..top (unit implicit), truncated at each interval's degree.
    """
    d, e = field.dim_in, field.dim_state
    top = forward.top
    q = d + e
    r = e * e
    n = len(forward.degrees)
    h = np.zeros((n, lie_size(r, top)))
    for N in np.unique(forward.degrees):
        N = int(N)
        idx = np.nonzero(forward.degrees == N)[0]
        lift = _cached("f2", field, N)
        inc = _truncate_lie_batch(forward.increments[idx], q, top, N)
        flat = np.concatenate([np.ones((idx.size, 1)), inc], axis=1)
        ws = batched_log_flat(flat, q, N)
        s0 = np.concatenate([forward.states[idx], np.zeros((idx.size, lift.lift_size))], axis=1)
        out, _ = solve_steps(lift, s0, ws, N, cfg)
        h[idx, : lift.lift_size] = out[:, e:]
    return h


def _dual_driver(h, r, degree):
    """log of delta_{-1}(hbar^{-1}) = level-wise (-1)^(j+1) log(hbar)."""
    flat = np.concatenate([np.ones((h.shape[0], 1)), h[:, : lie_size(r, degree)]], axis=1)
    logs = batched_log_flat(flat, r, degree)
    pos = 0
    for j in range(1, degree + 1):
        n = r ** j
        if j % 2 == 0:
            logs[:, pos:pos + n] *= -1.0
        pos += n
    return logs


def backward_dual(h, degrees, payoff, final_state, cfg, times=None):
    """Step 3: Psibar(T) = grad g(ybar_T), Psibar(t_k) from Psibar(t_{k+1})."""
    degrees = np.asarray(degrees, dtype=int)
    n = degrees.size
    c = payoff.dim_out
    e = payoff.dim_state
    r = e * e
    top = int(degrees.max())
    grad = payoff.gradient(final_state)
    weights = np.zeros((n + 1, c, e))
    weights[-1] = grad
    if n == 0:
        return DualWeights(times, weights)
    ws = np.zeros((n, lie_size(r, top)))
    for N in np.unique(degrees):
        idx = np.nonzero(degrees == N)[0]
        ws[idx] = pad_lie(_dual_driver(h[idx], r, int(N)), r, int(N), top)
    f3 = _cached("f3", None, (c, e))
    if not np.any(grad):
        return DualWeights(times, weights)
    out, _ = solve_sweep(f3, grad.reshape(-1), ws[::-1], top, cfg)
    weights[:-1] = out[::-1].reshape(n, c, e)
    return DualWeights(times, weights)


MAX_SUBSTEP_DEGREE = 5


def local_errors(field, path, times, degrees, states, cfg, subdivisions=8, degree_boost=0):
    """Step 4: ebar(t_{k+1}) = (m-substep solution from ybar_{t_k}) - ybar_{t_{k+1}}.

    :param degree_boost: substeps use degree N_k + degree_boost (capped at 5)
    """
    if subdivisions < 2:
        raise ValueError("subdivisions must be at least 2")
    times = np.asarray(times, dtype=np.float64)
    degrees = np.minimum(np.asarray(degrees, dtype=int) + int(degree_boost), MAX_SUBSTEP_DEGREE)
    states = np.asarray(states, dtype=np.float64)
    n = degrees.size
    top = int(degrees.max())
    m = subdivisions
    frac = np.arange(m + 1) / m
    sub = times[:-1, None] + frac[None, :] * (times[1:] - times[:-1])[:, None]
    sub[:, 0] = times[:-1]
    sub[:, -1] = times[1:]
    sub_deg = np.repeat(degrees, m)
    s_flat = sub[:, :-1].reshape(-1)
    t_flat = sub[:, 1:].reshape(-1)
    ws = _logsigs_pairs(path, s_flat, t_flat, sub_deg, top).reshape(n, m, -1)
    fine, nfev = solve_chains(field, states[:-1], ws, top, cfg)
    return fine - states[1:], nfev


def _logsigs_pairs(path, s, t, degrees, top):
    d = path.dim
    out = np.zeros((s.size, lie_size(d, top)))
    for N in np.unique(degrees):
        idx = np.nonzero(degrees == N)[0]
        sig = path.cache.signatures(s[idx], t[idx], int(N))
        out[idx] = pad_lie(batched_log_flat(sig, d, int(N)), d, int(N), top)
    return out


def assemble(weights, locals_, payoff, final_state, times, degrees, cost=None, seconds=None):
    """Step 5: contributions Psibar(t_{k+1}) ebar(t_{k+1}) and their sum."""
    w = weights.weights if isinstance(weights, DualWeights) else np.asarray(weights)
    locals_ = np.asarray(locals_, dtype=np.float64)
    if w.shape[0] != locals_.shape[0] + 1:
        raise ValueError("grid mismatch between weights and local errors")
    right = w[1:]
    contrib = np.einsum("kce,ke->kc", right, locals_)
    estimate = contrib.sum(axis=0)
    value = payoff(final_state)
    degrees = np.asarray(degrees, dtype=int)
    return ErrorBreakdown(
        times=np.asarray(times, dtype=np.float64), degrees=degrees, local_errors=locals_,
        weights=right, contributions=contrib, estimate=estimate, terminal_value=value,
        corrected=value + estimate, final_state=np.asarray(final_state),
        cost=np.zeros(degrees.size) if cost is None else cost, seconds=seconds or {})


# ---------------------------------------------------------------------------
# driver


@dataclass
class ErrorRepresentation:
    forward: ForwardResult
    h: np.ndarray
    dual: DualWeights
    breakdown: ErrorBreakdown
    local_nfev: np.ndarray


def error_representation(field, y0, path, times, degrees, payoff=None, cfg=None,
                         subdivisions=8, full_error=False, solution_degree=2):
    """Run the whole pipeline on a fixed partition.

    With ``full_error`` the field is replaced by its full extension on the
    truncated tensor algebra (levels 1..solution_degree) and the error of the
    whole state, or of ``payoff`` applied to it, is represented.
    """
    cfg = cfg or OdeSolverConfig()
    times = np.asarray(times, dtype=np.float64)
    degrees = np.asarray(degrees, dtype=int)
    y0 = np.asarray(y0, dtype=np.float64).reshape(-1)
    if full_error:
        e = field.dim_state
        field = full_field(field, solution_degree)
        y0 = exp_n(TruncatedTensor.from_level1(y0, solution_degree)).to_flat()[1:]
        if payoff is None:
            payoff = identity_payoff(field.dim_state)
        elif payoff.dim_state == e:
            payoff = first_level_payoff(payoff, e, solution_degree)
    if payoff is None:
        payoff = identity_payoff(field.dim_state)
    secs = {}
    t0 = time.perf_counter()
    fwd = forward_augmented(field, y0, path, times, degrees, cfg)
    t1 = time.perf_counter()
    h = interval_rough_integrals(field, fwd, cfg)
    t2 = time.perf_counter()
    dual = backward_dual(h, degrees, payoff, fwd.states[-1], cfg, times)
    t3 = time.perf_counter()
    loc, lnfev = local_errors(field, path, times, degrees, fwd.states, cfg, subdivisions)
    t4 = time.perf_counter()
    secs.update(forward=t1 - t0, rough_integral=t2 - t1, dual=t3 - t2, local=t4 - t3)
    bd = assemble(dual, loc, payoff, fwd.states[-1], times, degrees, fwd.cost, secs)
    return ErrorRepresentation(fwd, h, dual, bd, lnfev)
