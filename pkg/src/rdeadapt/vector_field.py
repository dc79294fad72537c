"""Vector fields, their iterated derivatives, and the augmented fields.

A vector field maps a state y in R^e to a linear map f(y): R^d -> R^e, stored
as an (e, d) matrix.  Iterated fields follow the recursion

    f^{o1} = f,    f^{o(k+1)}(a (x) b) = D(f^{ok}(.) b)[f(.) a],

so the first letter of a word is the direction of the outermost derivative.
For a word I = (i_1, ..., i_k) the array ``levels[k][flat(I)]`` holds the
state-space vector f^{ok}(y)(e_{i_1} (x) ... (x) e_{i_k}).

Derivatives come from nested forward-mode differentiation in jax.  Every
object below exposes a pure ``rhs(state, w)`` giving the log-ODE vector field
sum_k f^{ok}(state) pi_k(w) for a flat Lie element ``w`` (levels 1..N).
"""

from __future__ import annotations

import math
from functools import cached_property

import jax
import jax.numpy as jnp
import numpy as np

from .tensor_algebra import TruncatedTensor, flat_size

jax.config.update("jax_enable_x64", True)


def word_sizes(dim, degree):
    return [dim ** k for k in range(1, degree + 1)]


def lie_size(dim, degree):
    """Length of the flat vector of levels 1..degree."""
    return flat_size(dim, degree) - 1


def split_words(w, dim, degree):
    out, pos = [], 0
    for n in word_sizes(dim, degree):
        out.append(w[..., pos:pos + n])
        pos += n
    return out


def _outer_flat(a, b):
    return (a[..., :, None] * b[..., None, :]).reshape(a.shape[:-1] + (a.shape[-1] * b.shape[-1],))


def tensor_times_lie(h, q, dim, degree):
    """(1 + h) (x) q for flat h, q holding levels 1..degree (level 0 of q is 0)."""
    hs = split_words(h, dim, degree)
    qs = split_words(q, dim, degree)
    out = []
    for n in range(1, degree + 1):
        acc = qs[n - 1]
        for j in range(1, n):
            acc = acc + _outer_flat(hs[n - j - 1], qs[j - 1])
        out.append(acc)
    return jnp.concatenate(out, axis=-1)


def compiled_cost(system, degree):
    """Flops (plus transcendental calls) of the compiled ``system.rhs``; cached per degree."""
    cache = system.__dict__.setdefault("_eval_cost", {})
    degree = int(degree)
    if degree not in cache:
        fallback = float(system.state_size * sum(word_sizes(system.driver_dim, degree)))
        y = jnp.zeros(system.state_size, dtype=jnp.float64)
        w = jnp.zeros(lie_size(system.driver_dim, degree), dtype=jnp.float64)
        try:
            info = jax.jit(lambda s, v: system.rhs(s, v, degree)).lower(y, w).compile().cost_analysis()
            if isinstance(info, (list, tuple)):
                info = info[0] if info else {}
            flops = float(info.get("flops", 0.0)) + float(info.get("transcendentals", 0.0))
        except Exception:  # backend without cost analysis
            flops = 0.0
        cache[degree] = flops if flops > 0 else fallback
    return cache[degree]


class VectorField:
    """A (possibly nonlinear) vector field y -> f(y) in L(R^d, R^e).

    :param fn: jax-traceable function mapping a state of shape (e,) to an
        (e, d) matrix
    :param dim_in: driver dimension d
    :param dim_state: state dimension e
    :param name: label used in reports
    """

    kind = "plain"

    def __init__(self, fn, dim_in, dim_state, name=None):
        self.fn = fn
        self.dim_in = int(dim_in)
        self.dim_state = int(dim_state)
        self.name = name or getattr(fn, "__name__", "field")
        self._jit = {}

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r}, d={self.dim_in}, e={self.dim_state})"

    # state layout used by the integrator
    @property
    def state_size(self):
        return self.dim_state

    @property
    def driver_dim(self):
        return self.dim_in

    def evaluate(self, y):
        """f(y) as a numpy (e, d) array."""
        return np.asarray(self._compiled("eval")(jnp.asarray(y, dtype=jnp.float64)))

    def jacobian(self, y):
        """Derivative of f at y, shape (e, d, e)."""
        return np.asarray(self._compiled("jac")(jnp.asarray(y, dtype=jnp.float64)))

    def _compiled(self, key):
        fn = self._jit.get(key)
        if fn is None:
            if key == "eval":
                fn = jax.jit(self.fn)
            elif key == "jac":
                fn = jax.jit(jax.jacfwd(self.fn))
            elif key[0] == "levels":
                fn = jax.jit(lambda y, n=key[1]: self.iterated_levels(y, n))
            elif key[0] == "rhs":
                fn = jax.jit(lambda y, w, n=key[1]: self.rhs(y, w, n))
            else:
                raise KeyError(key)
            self._jit[key] = fn
        return fn

    # iterated fields ----------------------------------------------------

    def _columns(self, y):
        # (d, e): row i is the vector field f(.) e_i
        return self.fn(y).T

    def iterated_levels(self, y, degree):
        """[f^{o1}(y), ..., f^{oN}(y)], level k of shape (d**k, e)."""
        return _iterated(self._columns, None, y, degree, self.dim_in)[0]

    def rhs(self, y, w, degree):
        """sum_k f^{ok}(y) pi_k(w) with w the flat levels 1..degree."""
        levels = self.iterated_levels(y, degree)
        ws = split_words(w, self.dim_in, degree)
        out = jnp.zeros(self.dim_state, dtype=y.dtype)
        for lv, wk in zip(levels, ws):
            out = out + wk @ lv
        return out

    def contract(self, y, v):
        """Evaluate sum_k f^{ok}(y) pi_k(v) for a TruncatedTensor v with pi_0 = 0."""
        if v.dim != self.dim_in:
            raise ValueError("tensor dimension does not match the driver dimension")
        if float(v.levels[0][0]) != 0.0:
            raise ValueError("contraction needs a tensor with zero scalar part")
        w = jnp.asarray(v.to_flat()[1:])
        return np.asarray(self._compiled(("rhs", v.degree))(jnp.asarray(y, dtype=jnp.float64), w))

    def iterated(self, y, degree):
        """Numpy copies of the iterated field levels at y."""
        out = self._compiled(("levels", degree))(jnp.asarray(y, dtype=jnp.float64))
        return [np.asarray(a) for a in out]

    def eval_cost(self, degree):
        """Deterministic cost of one right-hand side evaluation at ``degree``.

        The floating-point operation count of the compiled evaluation, which
        grows with the nesting depth of the derivatives; falls back to
        e * sum_k d**k when the backend does not report it.
        """
        return compiled_cost(self, degree)

    # plain systems need no carry translation
    def initial_state(self, carry):
        return carry

    def carry_from(self, state):
        return state


def _iterated(columns, beta, u, degree, d, lie_mul=None):
    """Iterated fields and, optionally, the lifted tensor fields.

    ``columns(u)`` gives the (d, m) base field; ``beta(u)`` the (d, r) level-1
    integrand and ``lie_mul(b, q)`` the product of a level-1 element with a
    tensor q without unit level.  Q_k only has levels 1..k, so it is stored
    with that width and padded by the caller.  Returns ([F_1..F_N], [Q_1..Q_N]).
    """

    def level1(v):
        F = columns(v)
        Q = beta(v) if beta is not None else None
        return (F, Q), ([F], [Q])

    fn = level1
    for _ in range(1, degree):
        def nxt(v, prev=fn):
            jac, (lastF, lastQ), (allF, allQ) = _value_and_jac(prev, v)
            A = columns(v)                                  # (d, m)
            jF, jQ = jac
            # jF: (n, m, m) derivative of each row in u; contract with a_i
            newF = jnp.einsum("nml,il->inm", jF, A).reshape(-1, lastF.shape[-1])
            if beta is not None:
                B = beta(v)                                  # (d, r)
                dQ = jnp.einsum("nsl,il->ins", jQ, A)
                prod = lie_mul(B[:, None, :], lastQ[None, :, :])
                pad = jnp.zeros(dQ.shape[:-1] + (prod.shape[-1] - dQ.shape[-1],), dtype=dQ.dtype)
                newQ = (jnp.concatenate([dQ, pad], axis=-1) + prod).reshape(-1, prod.shape[-1])
            else:
                newQ = None
            return (newF, newQ), (allF + [newF], allQ + [newQ])
        fn = nxt
    _, (allF, allQ) = fn(u)
    return allF, allQ


def _value_and_jac(fn, v):
    def wrapped(x):
        last, allv = fn(x)
        return last, (last, allv)
    jac, (last, allv) = jax.jacfwd(wrapped, has_aux=True)(v)
    return jac, last, allv


# ---------------------------------------------------------------------------
# lifted systems


class LiftField:
    """Base flow u' = a(u) dx together with the tensor lift H' = H (x) b(u) dx.

    The state is (u in R^m, H in T_1^N(R^r)) with H stored as levels 1..N
    (the unit level is implicit).  With ``b`` set to the augmented fields this
    reproduces the full fields needed by the error representation without
    forming them on the large product space: derivatives are taken in u only.

    :param base: :class:`VectorField` a on R^m driven by R^q
    :param integrand: jax function u -> (r, q) matrix b(u)
    :param dim_lift: r
    :param lift_degree: truncation level N of H
    """

    kind = "lift"

    def __init__(self, base, integrand, dim_lift, lift_degree, name=None):
        self.base = base
        self.integrand = integrand
        self.dim_lift = int(dim_lift)
        self.lift_degree = int(lift_degree)
        self.name = name or f"lift({base.name})"
        self._jit = {}

    @property
    def driver_dim(self):
        return self.base.dim_in

    @property
    def dim_u(self):
        return self.base.dim_state

    @property
    def lift_size(self):
        return lie_size(self.dim_lift, self.lift_degree)

    @property
    def state_size(self):
        return self.dim_u + self.lift_size

    def _beta(self, u):
        return self.integrand(u).T                  # (q, r)

    def _lie_mul(self, b, q):
        # level-1 element b times q (levels 1..j, no unit): levels shift by one, capped at N
        r, N = self.dim_lift, self.lift_degree
        j = next(k for k in range(1, N + 1) if lie_size(r, k) == q.shape[-1])
        qs = split_words(q, r, j)
        shape = jnp.broadcast_shapes(b.shape[:-1], q.shape[:-1])
        b = jnp.broadcast_to(b, shape + (r,))
        out = [jnp.zeros(shape + (r,), dtype=q.dtype)]
        for n in range(2, min(j + 1, N) + 1):
            out.append(_outer_flat(b, jnp.broadcast_to(qs[n - 2], shape + (qs[n - 2].shape[-1],))))
        return jnp.concatenate(out, axis=-1)

    def iterated_levels(self, u, degree):
        return _iterated(self.base._columns, self._beta, u, degree, self.driver_dim, self._lie_mul)

    def rhs(self, state, w, degree):
        m = self.dim_u
        u, H = state[:m], state[m:]
        F, Q = self.iterated_levels(u, degree)
        ws = split_words(w, self.driver_dim, degree)
        du = jnp.zeros(m, dtype=state.dtype)
        q = jnp.zeros(self.lift_size, dtype=state.dtype)
        for Fk, Qk, wk in zip(F, Q, ws):
            du = du + wk @ Fk
            qk = wk @ Qk
            q = q + jnp.concatenate([qk, jnp.zeros(self.lift_size - qk.shape[-1], dtype=qk.dtype)])
        dH = tensor_times_lie(H, q, self.dim_lift, self.lift_degree)
        return jnp.concatenate([du, dH])


    def initial_state(self, carry):
        # every step restarts the lift at the unit element
        return jnp.concatenate([carry, jnp.zeros(self.lift_size, dtype=carry.dtype)])

    def carry_from(self, state):
        return state[: self.dim_u]


class LinearField:
    """f3(Psi) X = Psi X for Psi in R^{c x e} and X in R^{e x e}.

    Letter (i, j) of the driver (flat index i*e + j) is the matrix unit E_ij.
    Iterated fields are products: f3^{ok}(Psi)(X_1 (x) ... (x) X_k) = Psi X_1 ... X_k.
    """

    kind = "plain"

    def __init__(self, c, e):
        if c < 1 or e < 1:
            raise ValueError("shape mismatch: c and e must be positive")
        self.c = int(c)
        self.e = int(e)
        self.name = f"linear({c}x{e})"
        self._jit = {}

    @property
    def driver_dim(self):
        return self.e * self.e

    @property
    def state_size(self):
        return self.c * self.e

    def generator(self, w, degree):
        """Matrix L(w) = sum over words of w_I X_{i_1} ... X_{i_k}."""
        e = self.e
        L = jnp.zeros((e, e), dtype=w.dtype)
        for k, wk in enumerate(split_words(w, e * e, degree), start=1):
            t = wk.reshape((e, e) * k)
            # contract inner index pairs (b_j with a_{j+1}) from the left
            for _ in range(k - 1):
                t = jnp.trace(t, axis1=1, axis2=2)
            L = L + t
        return L

    def rhs(self, state, w, degree):
        psi = state.reshape(self.c, self.e)
        return (psi @ self.generator(w, degree)).reshape(-1)

    def as_vector_field(self):
        """The same field as a generic :class:`VectorField` (used as an oracle)."""
        c, e = self.c, self.e

        def fn(y):
            psi = y.reshape(c, e)
            cols = []
            for i in range(e):
                for j in range(e):
                    cols.append(jnp.zeros((c, e), dtype=y.dtype).at[:, j].set(psi[:, i]).reshape(-1))
            return jnp.stack(cols, axis=1)

        return VectorField(fn, e * e, c * e, name=self.name)


    def initial_state(self, carry):
        return carry

    def carry_from(self, state):
        return state


def linear_f3(c, e):
    """Linear dual field Psi -> Psi X."""
    return LinearField(c, e)


# ---------------------------------------------------------------------------
# augmented fields


def augment_f1(field):
    """f1(x, y) = (Id; f(y)) on R^{d+e}, driven by R^d."""
    d, e = field.dim_in, field.dim_state

    def fn(z):
        return jnp.concatenate([jnp.eye(d, dtype=z.dtype), field.fn(z[d:])], axis=0)

    return VectorField(fn, d, d + e, name=f"f1({field.name})")


def augment_f2(field):
    """f2(z, h) = (Id; g(z)) on R^{d+e+e^2}, driven by R^{d+e}.

    g(x, y)(dx, dy) = f'(y) dx, flattened row-major: entry (i, j) is
    sum_l d_j f_{il}(y) dx_l.
    """
    d, e = field.dim_in, field.dim_state

    def fn(v):
        y = v[d:d + e]
        return jnp.concatenate(
            [jnp.eye(d + e, dtype=v.dtype), _jacobian_dx_block(field, y, d, e)], axis=0)

    return VectorField(fn, d + e, d + e + e * e, name=f"f2({field.name})")


def _jacobian_dx_block(field, y, d, e):
    jac = jax.jacfwd(field.fn)(y)                     # (e, d, e): [i, l, j] = d_j f_il
    g = jnp.transpose(jac, (0, 2, 1)).reshape(e * e, d)
    return jnp.concatenate([g, jnp.zeros((e * e, e), dtype=y.dtype)], axis=1)


def forward_lift(field, degree):
    """Lift computing (y, z-increment) for the forward augmented solve.

    u = y follows f; the lift integrates f1 = (Id; f) so that H is the
    increment of the full solution z = (x, y) in G^N(R^{d+e}).
    """
    d, e = field.dim_in, field.dim_state

    def integrand(y):
        return jnp.concatenate([jnp.eye(d, dtype=y.dtype), field.fn(y)], axis=0)

    return LiftField(field, integrand, d + e, degree, name=f"f1-lift({field.name})")


def rough_integral_lift(field, degree):
    """Lift computing the increments of h = int f'(y) dx driven by z = (x, y).

    The base flow is u = y with u' = dy (the y letters of the driver), and
    the lift integrates g(y)(dx, dy) = f'(y) dx in R^{e^2}.
    """
    d, e = field.dim_in, field.dim_state

    def base_fn(y):
        return jnp.concatenate([jnp.zeros((e, d), dtype=y.dtype), jnp.eye(e, dtype=y.dtype)], axis=1)

    base = VectorField(base_fn, d + e, e, name=f"proj-y({field.name})")

    def integrand(y):
        return _jacobian_dx_block(field, y, d, e)

    return LiftField(base, integrand, e * e, degree, name=f"f2-lift({field.name})")


def full_field(field, degree):
    """Full field z -> z (x) f(pi_1 z) on T_1^N(R^e), as a field on the levels 1..N."""
    d, e = field.dim_in, field.dim_state
    size = lie_size(e, degree)

    def fn(z):
        fy = field.fn(z[:e])                          # (e, d)
        cols = []
        for i in range(d):
            b = jnp.zeros(size, dtype=z.dtype).at[:e].set(fy[:, i])
            cols.append(tensor_times_lie(z, b, e, degree))
        return jnp.stack(cols, axis=1)

    vf = VectorField(fn, d, size, name=f"full{degree}({field.name})")
    vf.base_field = field
    vf.solution_degree = degree
    return vf


def lift_state_to_tensor(z, dim, degree):
    """Flat levels 1..N (unit implicit) to a TruncatedTensor."""
    z = np.asarray(z, dtype=np.float64)
    return TruncatedTensor.from_flat(np.concatenate([[1.0], z]), dim, degree)


def iterated_field_contract(oracle, y, v):
    """sum_k f^{ok}(y) pi_k(v)."""
    return oracle.contract(y, v)


# ---------------------------------------------------------------------------
# payoff


class Payoff:
    """Payoff g: R^e -> R^c with its gradient from forward-mode AD."""

    def __init__(self, fn, dim_state, dim_out, name=None):
        self.fn = fn
        self.dim_state = int(dim_state)
        self.dim_out = int(dim_out)
        self.name = name or "payoff"

    @cached_property
    def _eval(self):
        return jax.jit(lambda y: jnp.atleast_1d(self.fn(y)))

    @cached_property
    def _grad(self):
        return jax.jit(jax.jacfwd(lambda y: jnp.atleast_1d(self.fn(y))))

    def __call__(self, y):
        return np.asarray(self._eval(jnp.asarray(y, dtype=jnp.float64)))

    def gradient(self, y):
        """(c, e) Jacobian of g at y."""
        return np.asarray(self._grad(jnp.asarray(y, dtype=jnp.float64))).reshape(self.dim_out, self.dim_state)


def identity_payoff(e):
    return Payoff(lambda y: y, e, e, name="identity")


def coordinate_payoff(e, index):
    return Payoff(lambda y: y[index:index + 1], e, 1, name=f"y{index + 1}")


def zero_payoff(e, c=1):
    return Payoff(lambda y: jnp.zeros(c, dtype=y.dtype) * y[0], e, c, name="zero")


def first_level_payoff(payoff, solution_dim, degree):
    """Lift a payoff on R^e to the flat full state (levels 1..N)."""
    e = solution_dim
    return Payoff(lambda z: payoff.fn(z[:e]), lie_size(e, degree), payoff.dim_out,
                  name=f"{payoff.name}@level1")


# ---------------------------------------------------------------------------
# derivative self-checks


def check_derivatives(obj, points, rtol=1e-5, step=1e-6):
    """Compare AD derivatives with central differences.

    Works for :class:`VectorField` and :class:`Payoff`.  Returns the largest
    relative deviation over the points.
    """
    worst = 0.0
    for p in np.atleast_2d(np.asarray(points, dtype=np.float64)):
        if isinstance(obj, Payoff):
            ad = obj.gradient(p)
            f = obj
        else:
            ad = np.moveaxis(obj.jacobian(p), -1, 0)       # (e_in, e, d)
            f = obj.evaluate
        fd = []
        for j in range(p.size):
            dp = np.zeros_like(p)
            h = step * max(1.0, abs(p[j]))
            dp[j] = h
            fd.append((np.asarray(f(p + dp)) - np.asarray(f(p - dp))) / (2 * h))
        fd = np.stack(fd, axis=-1) if isinstance(obj, Payoff) else np.stack(fd, axis=0)
        scale = max(1.0, float(np.max(np.abs(ad))))
        worst = max(worst, float(np.max(np.abs(ad - fd))) / scale)
    return worst


# ---------------------------------------------------------------------------
# registry


def _spike_path_fn(y):
    y1, y2 = y[0], y[1]
    return jnp.array([[y2 - y1, -y2], [jnp.tanh(-y2), jnp.cos(2 * y2 - y1)]])


def _spike_field_fn(y):
    y1, y2 = y[0], y[1]
    return jnp.array([
        [y2 - y1, -y2],
        [1 + 20 / (1000 * (y1 + 1) ** 2 + 1), 20 / (1000 * (y2 + 1) ** 2 + 1)],
    ])


def _changing_roughness_fn(y):
    y1, y2 = y[0], y[1]
    return jnp.array([[y2 - y1, -y2], [jnp.tanh(-y2), jnp.cos(-y1 + 2 * y2)]])


LANGEVIN_NU = 1.0
LANGEVIN_BETA = 3.0


def _langevin_fn(y):
    q, p = y[0], y[1]
    sigma = math.sqrt(2 * LANGEVIN_NU / LANGEVIN_BETA)
    return jnp.array([[p, 0.0], [-4 * q * (q * q - 1) - LANGEVIN_NU * p, sigma]])


def _scalar_linear_fn(y):
    return y.reshape(1, 1)


FIELD_REGISTRY = {
    "spike-path": (_spike_path_fn, 2, 2),
    "spike-field": (_spike_field_fn, 2, 2),
    "changing-roughness": (_changing_roughness_fn, 2, 2),
    "langevin": (_langevin_fn, 2, 2),
    "scalar-linear": (_scalar_linear_fn, 1, 1),
}

_FIELD_CACHE = {}


def get_field(name):
    """Registered field by name (instances are shared so compiled code is reused)."""
    if name not in FIELD_REGISTRY:
        raise ValueError(f"unknown field {name!r}; choose from {', '.join(FIELD_REGISTRY)}")
    if name not in _FIELD_CACHE:
        fn, d, e = FIELD_REGISTRY[name]
        _FIELD_CACHE[name] = VectorField(fn, d, e, name=name)
    return _FIELD_CACHE[name]
