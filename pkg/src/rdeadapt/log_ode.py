"""Log-ODE and Euler one-step schemes, batched and swept over partitions.

The log-ODE step replaces the rough driver on [s, t] by the constant Lie
element w = log_N(S_N(x)_{s,t}) and solves the autonomous ODE

    y' = sum_k f^{ok}(y) pi_k(w),    0 <= tau <= 1.

The inner ODE is solved with a Dormand-Prince 5(4) pair under PI step-size
control, written with jax control flow so whole sweeps compile to one call.
Mixed degrees are handled by zero-padding log-signatures up to the largest
degree of a batch; the padded terms contribute exactly nothing.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field

import jax
import jax.numpy as jnp
import numpy as np

from .tensor_algebra import TruncatedTensor, log_n, mul_levels, split_levels
from .vector_field import lie_size

# Dormand-Prince 5(4) tableau
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
_E = tuple(b5 - b4 for b5, b4 in zip(_B5, _B4))

EXPLOSION_NORM = 1e8

STATUS_OK = 0
STATUS_MAX_STEPS = 1
STATUS_EXPLOSION = 2
STATUS_STEP_UNDERFLOW = 3

CHUNK = 32


class InnerSolverError(RuntimeError):
    """Failure of the inner ODE solver (step exhaustion or explosion)."""

    def __init__(self, message, status=None, index=None):
        super().__init__(message)
        self.status = status
        self.index = index


@dataclass(frozen=True)
class OdeSolverConfig:
    """Tolerances of the inner Dormand-Prince solver.

    :param rtol: relative tolerance
    :param atol: absolute tolerance
    :param max_steps: step budget per unit-time log-ODE solve
    """

    rtol: float = 1e-10
    atol: float = 1e-12
    max_steps: int = 20000

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("inner tolerances must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")

    def scaled(self, factor):
        return OdeSolverConfig(self.rtol * factor, self.atol * factor, self.max_steps)


def inner_config_for(tol, n_intervals, floor=1e-14):
    """Default inner tolerance: 0.01 * global tolerance / interval count."""
    val = max(0.01 * tol / max(int(n_intervals), 1), floor)
    return OdeSolverConfig(rtol=val, atol=val)


@dataclass
class StepRecord:
    """Book-keeping for one interval of a sweep."""

    t_start: float
    t_end: float
    degree: int
    state_in: np.ndarray
    state_out: np.ndarray
    seconds: float
    cost: float
    nfev: int
    status: int = 0
    log_signature: np.ndarray | None = dc_field(default=None, repr=False)

    def to_json(self):
        return {
            "t_start": self.t_start, "t_end": self.t_end, "degree": self.degree,
            "state_in": np.asarray(self.state_in).tolist(),
            "state_out": np.asarray(self.state_out).tolist(),
            "seconds": self.seconds, "cost": self.cost, "nfev": self.nfev, "status": self.status,
        }


# ---------------------------------------------------------------------------
# inner solver


def _rms(x):
    return jnp.sqrt(jnp.mean(x * x)) if x.size else jnp.zeros((), dtype=x.dtype)


def dopri_unit(fun, y0, rtol, atol, max_steps):
    """Integrate y' = fun(y) over [0, 1]; returns (y1, nfev, nsteps, status)."""
    dtype = y0.dtype
    f0 = fun(y0)
    scale0 = atol + rtol * jnp.abs(y0)
    d0 = _rms(y0 / scale0)
    d1 = _rms(f0 / scale0)
    h0 = jnp.where((d0 < 1e-5) | (d1 < 1e-5), 1e-6, 0.01 * d0 / jnp.maximum(d1, 1e-300))
    f1 = fun(y0 + h0 * f0)
    d2 = _rms((f1 - f0) / scale0) / h0
    dmax = jnp.maximum(d1, d2)
    h1 = jnp.where(dmax <= 1e-15, 1.0, (0.01 / jnp.maximum(dmax, 1e-300)) ** 0.2)
    h_init = jnp.clip(h1, 1e-12, 1.0).astype(dtype)

    beta = 0.04
    alpha = 0.2 - 0.75 * beta

    def cond(c):
        t, y, f, h, eprev, nst, nfev, status = c
        return (t < 1.0) & (status == STATUS_OK)

    a_mat = jnp.array([list(row) + [0.0] * (7 - len(row)) for row in _A], dtype=dtype)
    e_vec = jnp.array(_E, dtype=dtype)

    def body(c):
        t, y, f, h, eprev, nst, nfev, status = c
        last = h >= 1.0 - t
        h = jnp.where(last, 1.0 - t, h)
        ks = jnp.zeros((7,) + y.shape, dtype).at[0].set(f)

        def stage(i, ks):
            yi = y + h * (a_mat[i] @ ks)
            return ks.at[i].set(fun(yi))

        # a single traced copy of the right-hand side keeps compile times low
        ks = jax.lax.fori_loop(1, 7, stage, ks)
        y_new = y + h * (a_mat[6] @ ks)
        err = h * (e_vec @ ks)
        sc = atol + rtol * jnp.maximum(jnp.abs(y), jnp.abs(y_new))
        en = _rms(err / sc)
        finite = jnp.all(jnp.isfinite(y_new)) & jnp.isfinite(en)
        accept = (en <= 1.0) & finite
        en_safe = jnp.where(finite, en, 1e10)
        fac = jnp.where(en_safe == 0.0, 10.0,
                        0.9 * jnp.maximum(en_safe, 1e-300) ** (-alpha) * eprev ** beta)
        fac = jnp.clip(fac, 0.2, 10.0)
        fac = jnp.where(accept, fac, jnp.minimum(fac, 1.0))
        t_new = jnp.where(accept, jnp.where(last, 1.0, t + h), t)
        y_out = jnp.where(accept, y_new, y)
        f_out = jnp.where(accept, ks[6], f)
        e_out = jnp.where(accept, jnp.maximum(en_safe, 1e-4), eprev)
        h_new = h * fac
        nst = nst + 1
        blown = jnp.any(jnp.abs(y_out) > EXPLOSION_NORM)
        status = jnp.where(blown, STATUS_EXPLOSION,
                           jnp.where(h_new < 1e-14, STATUS_STEP_UNDERFLOW,
                                     jnp.where((nst >= max_steps) & (t_new < 1.0), STATUS_MAX_STEPS, STATUS_OK)))
        return (t_new, y_out, f_out, h_new, e_out, nst, nfev + 6, status)

    init = (jnp.zeros((), dtype), y0, f0, h_init, jnp.ones((), dtype), jnp.zeros((), jnp.int64),
            jnp.full((), 2, jnp.int64), jnp.zeros((), jnp.int64))
    t, y, f, h, eprev, nst, nfev, status = jax.lax.while_loop(cond, body, init)
    return y, nfev, nst, status


# ---------------------------------------------------------------------------
# compiled kernels


def _step_kernel(system, degree, batch):
    cache = system.__dict__.setdefault("_kernels", {})
    key = ("step", degree, batch)
    fn = cache.get(key)
    if fn is None:
        def one(state0, w, rtol, atol, max_steps):
            y, nfev, nst, status = dopri_unit(lambda y: system.rhs(y, w, degree), state0, rtol, atol, max_steps)
            return y, nfev, status
        fn = jax.jit(jax.vmap(one, in_axes=(0, 0, None, None, None)))
        cache[key] = fn
    return fn


def _sweep_kernel(system, degree, length):
    cache = system.__dict__.setdefault("_kernels", {})
    key = ("sweep", degree, length)
    fn = cache.get(key)
    if fn is None:
        def run(carry, ws, rtol, atol, max_steps):
            def body(c, w):
                y, nfev, nst, status = dopri_unit(
                    lambda s: system.rhs(s, w, degree), system.initial_state(c), rtol, atol, max_steps)
                return system.carry_from(y), (y, nfev, status)
            return jax.lax.scan(body, carry, ws)
        fn = jax.jit(run)
        cache[key] = fn
    return fn


def _chain_kernel(system, degree, batch, length):
    cache = system.__dict__.setdefault("_kernels", {})
    key = ("chain", degree, batch, length)
    fn = cache.get(key)
    if fn is None:
        def chain(carry, ws, rtol, atol, max_steps):
            def body(c, w):
                y, nfev, nst, status = dopri_unit(
                    lambda s: system.rhs(s, w, degree), system.initial_state(c), rtol, atol, max_steps)
                return system.carry_from(y), (nfev, status)
            last, (nfev, status) = jax.lax.scan(body, carry, ws)
            return last, jnp.sum(nfev), jnp.max(status)
        fn = jax.jit(jax.vmap(chain, in_axes=(0, 0, None, None, None)))
        cache[key] = fn
    return fn


def _check_status(status, what, offset=0):
    status = np.asarray(status)
    bad = np.nonzero(status != STATUS_OK)[0]
    if bad.size:
        i = int(bad[0])
        code = int(status.reshape(-1)[i])
        reason = {STATUS_MAX_STEPS: "inner step budget exhausted",
                  STATUS_EXPLOSION: f"solution norm exceeded {EXPLOSION_NORM:g} (explosion)",
                  STATUS_STEP_UNDERFLOW: "inner step size underflow"}.get(code, f"status {code}")
        raise InnerSolverError(f"{what}: {reason} on interval {i + offset}", status=code, index=i + offset)


# ---------------------------------------------------------------------------
# log-signature preparation


def pad_lie(w_levels_flat, dim, degree, target):
    """Zero-pad a flat Lie vector (levels 1..degree) to levels 1..target."""
    w = np.asarray(w_levels_flat, dtype=np.float64)
    extra = lie_size(dim, target) - lie_size(dim, degree)
    if extra < 0:
        raise ValueError("target degree below the vector's degree")
    if extra == 0:
        return w
    pad = np.zeros(w.shape[:-1] + (extra,))
    return np.concatenate([w, pad], axis=-1)


def log_signature_flat(g):
    """Flat levels 1..N of log_N(g)."""
    return log_n(g).to_flat()[1:]


def batched_log_flat(flat, dim, degree):
    """log_N for a batch of flat group elements (levels 0..N); returns levels 1..N."""
    flat = np.asarray(flat, dtype=np.float64)
    lv = split_levels(flat, dim, degree)
    x = [np.zeros_like(lv[0])] + [l.copy() for l in lv[1:]]
    acc = [np.zeros_like(l) for l in x]
    power = [np.ones_like(lv[0])] + [np.zeros_like(l) for l in lv[1:]]
    for j in range(1, degree + 1):
        power = mul_levels(power, x, degree, a_min=j - 1, b_min=1)
        c = (-1.0) ** (j + 1) / j
        acc = [a + c * p for a, p in zip(acc, power)]
    return np.concatenate(acc[1:], axis=-1)


# ---------------------------------------------------------------------------
# public schemes


def _as_state(field, y0):
    if isinstance(y0, TruncatedTensor):
        y0 = y0.to_flat()[1:]
    y0 = np.asarray(y0, dtype=np.float64).reshape(-1)
    size = getattr(field, "state_size", None)
    if size is not None and y0.size != size:
        raise ValueError(f"state has {y0.size} entries, field expects {size}")
    return y0


def solve_steps(system, states, ws, degree, cfg):
    """Independent log-ODE steps: states (n, S), ws (n, W) padded to ``degree``.

    Returns (outputs, nfev) as numpy arrays.
    """
    states = np.asarray(states, dtype=np.float64)
    ws = np.asarray(ws, dtype=np.float64)
    n = states.shape[0]
    if n == 0:
        return np.zeros_like(states), np.zeros(0, dtype=np.int64)
    batch = CHUNK
    outs, nfevs = [], []
    kernel = _step_kernel(system, degree, batch)
    for lo in range(0, n, batch):
        s = states[lo:lo + batch]
        w = ws[lo:lo + batch]
        k = s.shape[0]
        if k < batch:
            s = np.concatenate([s, np.repeat(s[-1:], batch - k, axis=0)])
            w = np.concatenate([w, np.zeros((batch - k, w.shape[1]))])
        y, nfev, status = kernel(jnp.asarray(s), jnp.asarray(w), cfg.rtol, cfg.atol, cfg.max_steps)
        _check_status(np.asarray(status)[:k], "log-ODE step", lo)
        outs.append(np.asarray(y)[:k])
        nfevs.append(np.asarray(nfev)[:k])
    return np.concatenate(outs), np.concatenate(nfevs)


def solve_chains(system, carries, ws, degree, cfg):
    """Batches of consecutive steps: carries (n, C), ws (n, m, W).

    Returns (final carries, total nfev per chain).
    """
    carries = np.asarray(carries, dtype=np.float64)
    ws = np.asarray(ws, dtype=np.float64)
    n, m = ws.shape[:2]
    if n == 0:
        return np.zeros_like(carries), np.zeros(0, dtype=np.int64)
    batch = CHUNK
    kernel = _chain_kernel(system, degree, batch, m)
    outs, nfevs = [], []
    for lo in range(0, n, batch):
        c = carries[lo:lo + batch]
        w = ws[lo:lo + batch]
        k = c.shape[0]
        if k < batch:
            c = np.concatenate([c, np.repeat(c[-1:], batch - k, axis=0)])
            w = np.concatenate([w, np.zeros((batch - k,) + w.shape[1:])])
        last, nfev, status = kernel(jnp.asarray(c), jnp.asarray(w), cfg.rtol, cfg.atol, cfg.max_steps)
        _check_status(np.asarray(status)[:k], "substep chain", lo)
        outs.append(np.asarray(last)[:k])
        nfevs.append(np.asarray(nfev)[:k])
    return np.concatenate(outs), np.concatenate(nfevs)


def solve_sweep(system, carry0, ws, degree, cfg, chunk=CHUNK):
    """Sequential sweep; returns (states after each step (n, S), nfev (n,))."""
    ws = np.asarray(ws, dtype=np.float64)
    n = ws.shape[0]
    carry = jnp.asarray(np.asarray(carry0, dtype=np.float64))
    if n == 0:
        return np.zeros((0, system.state_size)), np.zeros(0, dtype=np.int64)
    length = chunk
    kernel = _sweep_kernel(system, degree, length)
    ys, nfevs = [], []
    for lo in range(0, n, length):
        w = ws[lo:lo + length]
        k = w.shape[0]
        if k < length:
            w = np.concatenate([w, np.zeros((length - k, w.shape[1]))])
        last, (y, nfev, status) = kernel(carry, jnp.asarray(w), cfg.rtol, cfg.atol, cfg.max_steps)
        _check_status(np.asarray(status)[:k], "sweep", lo)
        y = np.asarray(y)[:k]
        ys.append(y)
        nfevs.append(np.asarray(nfev)[:k])
        carry = jnp.asarray(system.carry_from(y[-1])) if k < length else last
    return np.concatenate(ys), np.concatenate(nfevs)


def log_ode_step(field, y0, g, cfg=None):
    """One log-ODE step A_N(f, y0, g) for a group element g of degree N."""
    cfg = cfg or OdeSolverConfig()
    if g.dim != field.driver_dim:
        raise ValueError("driver dimension mismatch")
    y0 = _as_state(field, y0)
    w = log_signature_flat(g)
    out, _ = solve_steps(field, y0[None, :], w[None, :], g.degree, cfg)
    return out[0]


def euler_step(field, y0, g):
    """Euler scheme y0 + sum_k f^{ok}(y0) pi_k(S_N)."""
    y0 = _as_state(field, y0)
    v = g - TruncatedTensor.one(g.dim, g.degree)
    return y0 + np.asarray(field.contract(y0, v))


# ---------------------------------------------------------------------------
# partition sweeps


@dataclass
class SweepResult:
    """States at every grid point together with per-interval statistics."""

    times: np.ndarray
    degrees: np.ndarray
    states: np.ndarray            # (n+1, S) including the initial state
    nfev: np.ndarray
    cost: np.ndarray
    seconds: float
    log_signatures: list

    @property
    def final(self):
        return self.states[-1]

    def records(self):
        out = []
        total = max(float(np.sum(self.cost)), 1.0)
        for k in range(len(self.degrees)):
            out.append(StepRecord(
                float(self.times[k]), float(self.times[k + 1]), int(self.degrees[k]),
                self.states[k], self.states[k + 1], self.seconds * float(self.cost[k]) / total,
                float(self.cost[k]), int(self.nfev[k]), 0, self.log_signatures[k]))
        return out


def path_log_signatures(path, times, degrees, max_degree=None):
    """log_N of S_N(x) over each [t_k, t_{k+1}], padded to a common degree."""
    times = np.asarray(times, dtype=np.float64)
    degrees = np.asarray(degrees, dtype=int)
    top = int(max_degree or degrees.max())
    d = path.dim
    out = np.zeros((degrees.size, lie_size(d, top)))
    for N in np.unique(degrees):
        idx = np.nonzero(degrees == N)[0]
        sig = path.cache.signatures(times[idx], times[idx + 1], int(N))
        out[idx] = pad_lie(batched_log_flat(sig, d, int(N)), d, int(N), top)
    return out


def sweep(field, y0, path, times, degrees, cfg=None):
    """Successive log-ODE steps over the partition ``times`` with per-interval degrees."""
    cfg = cfg or OdeSolverConfig()
    times = np.asarray(times, dtype=np.float64)
    degrees = np.asarray(degrees, dtype=int)
    if times.size != degrees.size + 1:
        raise ValueError("need one degree per interval")
    if not np.all(np.diff(times) > 0):
        raise ValueError("partition times must be increasing")
    if times[0] < path.t0 or times[-1] > path.t1:
        raise ValueError("partition must lie inside the path's domain")
    y0 = _as_state(field, y0)
    top = int(degrees.max())
    ws = path_log_signatures(path, times, degrees, top)
    start = time.perf_counter()
    ys, nfev = solve_sweep(field, y0, ws, top, cfg)
    seconds = time.perf_counter() - start
    states = np.concatenate([y0[None, :], ys])
    cost = nfev * np.array([field.eval_cost(int(N)) for N in degrees], dtype=np.float64)
    return SweepResult(times, degrees, states, nfev, cost, seconds, list(ws))
