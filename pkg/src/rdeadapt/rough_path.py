"""Piecewise-linear driving paths and their signatures.

Signatures over arbitrary [s, t] are assembled by Chen's identity from a
segment tree of segment exponentials.  The tree is built lazily per degree,
and queries are batched so that many intervals are handled by a fixed number
of vectorised tensor products.
"""

from __future__ import annotations

import csv
import io
import math
import threading

import numpy as np

from .tensor_algebra import (
    GroupTensor,
    TruncatedTensor,
    flat_size,
    join_levels,
    mul_levels,
    split_levels,
)


class SampledPath:
    """Piecewise-linear path through ``values`` at ``times``.

    :param times: strictly increasing array of M+1 times
    :param values: array of shape (M+1, d)
    """

    def __init__(self, times, values, name=None):
        times = np.array(times, dtype=np.float64).reshape(-1)
        values = np.array(values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if times.size < 2:
            raise ValueError("a path needs at least two samples")
        if values.shape[0] != times.size:
            raise ValueError("times and values have different lengths")
        if not np.all(np.diff(times) > 0):
            raise ValueError("times must be strictly increasing")
        if not np.all(np.isfinite(values)) or not np.all(np.isfinite(times)):
            raise ValueError("path samples must be finite")
        times.setflags(write=False)
        values.setflags(write=False)
        self.times = times
        self.values = values
        self.name = name
        self._cache = None

    @property
    def dim(self):
        return self.values.shape[1]

    @property
    def n_segments(self):
        return self.times.size - 1

    @property
    def t0(self):
        return float(self.times[0])

    @property
    def t1(self):
        return float(self.times[-1])

    def __call__(self, t):
        """Linear interpolation; accepts scalars or arrays."""
        t = np.asarray(t, dtype=np.float64)
        scalar = t.ndim == 0
        t = np.atleast_1d(t)
        if np.any(t < self.times[0]) or np.any(t > self.times[-1]):
            raise ValueError("time outside the path's domain")
        i = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, self.n_segments - 1)
        t_a, t_b = self.times[i], self.times[i + 1]
        lam = ((t - t_a) / (t_b - t_a))[:, None]
        out = self.values[i] + lam * (self.values[i + 1] - self.values[i])
        exact = t == t_b
        out[exact] = self.values[i[exact] + 1]
        exact = t == t_a
        out[exact] = self.values[i[exact]]
        return out[0] if scalar else out

    @property
    def cache(self):
        if self._cache is None:
            self._cache = SignatureCache(self)
        return self._cache

    def signature(self, s, t, degree):
        return self.cache.signature(s, t, degree)

    def restrict(self, s, t):
        """The path on [s, t], with interpolated endpoints when needed."""
        inner = (self.times > s) & (self.times < t)
        ts = np.concatenate([[s], self.times[inner], [t]])
        return SampledPath(ts, self(ts), name=self.name)

    # i/o

    def to_csv(self, fh=None):
        """Write as ``t,x1,...,xd`` with 17 significant digits."""
        own = fh is None
        fh = io.StringIO() if own else fh
        header = ["t"] + [f"x{i + 1}" for i in range(self.dim)]
        fh.write(",".join(header) + "\n")
        for t, row in zip(self.times, self.values):
            fh.write(",".join(format(float(v), ".17g") for v in (t, *row)) + "\n")
        return fh.getvalue() if own else None

    @classmethod
    def from_csv(cls, fh, name=None):
        """Parse the CSV format written by :meth:`to_csv`.

        Errors name the offending line (1-based, header is line 1).
        """
        if isinstance(fh, str):
            fh = io.StringIO(fh)
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError("line 1: empty path file") from None
        header = [h.strip() for h in header]
        if not header or header[0] != "t" or len(header) < 2:
            raise ValueError("line 1: header must be 't,x1,...,xd'")
        expect = [f"x{i + 1}" for i in range(len(header) - 1)]
        if header[1:] != expect:
            raise ValueError(f"line 1: header must be 't,{','.join(expect)}'")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValueError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise ValueError(f"line {lineno}: non-numeric field in {row!r}") from None
            if len(rows) > 1 and not rows[-1][0] > rows[-2][0]:
                raise ValueError(f"line {lineno}: times must be strictly increasing")
            if not all(math.isfinite(v) for v in rows[-1]):
                raise ValueError(f"line {lineno}: non-finite value")
        if len(rows) < 2:
            raise ValueError("path file needs at least two data rows")
        arr = np.array(rows)
        return cls(arr[:, 0], arr[:, 1:], name=name)


def segment_signature(increment, degree):
    """Signature of a linear segment: exp of the increment placed at level 1."""
    v = np.asarray(increment, dtype=np.float64).reshape(-1)
    levels = [np.ones(1)]
    cur = np.ones(1)
    for k in range(1, degree + 1):
        cur = np.outer(cur, v).reshape(-1) / k
        levels.append(cur)
    return GroupTensor(TruncatedTensor(v.size, degree, levels))


def _batched_segment_exp(incr, degree):
    # incr: (n, d), returns level list with arrays (n, d**k)
    n, d = incr.shape
    levels = [np.ones((n, 1))]
    cur = levels[0]
    for k in range(1, degree + 1):
        cur = (cur[:, :, None] * incr[:, None, :]).reshape(n, -1) / k
        levels.append(cur)
    return levels


def _identity_levels(n, d, degree):
    out = [np.ones((n, 1))]
    for k in range(1, degree + 1):
        out.append(np.zeros((n, d ** k)))
    return out


def _select(mask, a, b):
    return [np.where(mask[:, None], x, y) for x, y in zip(a, b)]


class SignatureCache:
    """Segment tree of segment exponentials plus a memo of queried intervals."""

    def __init__(self, path):
        self.path = path
        self._trees = {}
        self._memo = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def _tree(self, degree):
        tree = self._trees.get(degree)
        if tree is not None:
            return tree
        path = self.path
        d = path.dim
        m = path.n_segments
        size = 1
        while size < m:
            size *= 2
        incr = np.zeros((size, d))
        incr[:m] = np.diff(path.values, axis=0)
        nodes = [_batched_segment_exp(incr, degree)]
        while len(nodes[-1][0]) > 1:
            prev = nodes[-1]
            left = [lv[0::2] for lv in prev]
            right = [lv[1::2] for lv in prev]
            nodes.append(mul_levels(left, right, degree))
        self._trees[degree] = nodes
        return nodes

    def _range_products(self, lo, hi, degree):
        """Products of full segments [lo, hi) for arrays of segment indices."""
        d = self.path.dim
        tree = self._tree(degree)
        q = lo.size
        left = _identity_levels(q, d, degree)
        right = _identity_levels(q, d, degree)
        lo = lo.copy()
        hi = hi.copy()
        for level in tree:
            n_nodes = level[0].shape[0]
            take_l = (lo % 2 == 1) & (lo < hi)
            idx = np.minimum(lo, n_nodes - 1)
            node = [lv[idx] for lv in level]
            left = _select(take_l, mul_levels(left, node, degree), left)
            lo = lo + take_l
            take_r = (hi % 2 == 1) & (lo < hi)
            idx = np.minimum(np.maximum(hi - 1, 0), n_nodes - 1)
            node = [lv[idx] for lv in level]
            right = _select(take_r, mul_levels(node, right, degree), right)
            hi = hi - take_r
            lo //= 2
            hi //= 2
        return mul_levels(left, right, degree)

    def signatures_flat(self, s, t, degree):
        """Flat signatures (levels 0..degree) for arrays of interval endpoints."""
        path = self.path
        s = np.atleast_1d(np.asarray(s, dtype=np.float64))
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if s.shape != t.shape:
            raise ValueError("s and t must have the same shape")
        if np.any(s > t):
            raise ValueError("signature requires s <= t")
        if np.any(s < path.times[0]) or np.any(t > path.times[-1]):
            raise ValueError("interval outside the path's domain")
        times = path.times
        # first sample point >= s and last sample point <= t
        a = np.searchsorted(times, s, side="left")
        b = np.searchsorted(times, t, side="right") - 1
        has_full = a < b
        xs, xt = path(s), path(t)
        if xs.ndim == 1:
            xs, xt = xs[None, :], xt[None, :]
        # a > b: both ends inside one segment; a == b: one knot, no full segment
        inside = a > b
        # left partial [s, times[a]], right partial [times[b], t]
        a_c = np.minimum(a, times.size - 1)
        b_c = np.maximum(b, 0)
        left_inc = np.where(inside[:, None], xt - xs, path.values[a_c] - xs)
        right_inc = np.where(inside[:, None], 0.0, xt - path.values[b_c])
        out = _batched_segment_exp(left_inc, degree)
        if np.any(has_full):
            lo = np.where(has_full, a, 0)
            hi = np.where(has_full, b, 0)
            mid = self._range_products(lo, hi, degree)
            out = mul_levels(out, mid, degree)
        right = _batched_segment_exp(right_inc, degree)
        out = mul_levels(out, right, degree)
        return join_levels(out)

    def signature(self, s, t, degree):
        """Signature S_N(x)_{s,t} as a :class:`GroupTensor` (memoised)."""
        key = (float(s), float(t), int(degree))
        with self._lock:
            hit = self._memo.get(key)
        if hit is not None:
            self.hits += 1
            return hit
        self.misses += 1
        flat = self.signatures_flat(np.array([s]), np.array([t]), degree)[0]
        g = GroupTensor(TruncatedTensor(self.path.dim, degree, split_levels(flat, self.path.dim, degree)))
        with self._lock:
            self._memo[key] = g
        return g

    def signatures(self, s, t, degree):
        """Batch version of :meth:`signature` returning an (n, size) flat array."""
        s = np.asarray(s, dtype=np.float64).reshape(-1)
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        out = np.empty((s.size, flat_size(self.path.dim, degree)))
        missing = []
        for i, key in enumerate(zip(s.tolist(), t.tolist())):
            hit = self._memo.get((key[0], key[1], int(degree)))
            if hit is None:
                missing.append(i)
            else:
                out[i] = hit.to_flat()
        self.hits += s.size - len(missing)
        self.misses += len(missing)
        if missing:
            idx = np.array(missing)
            flat = self.signatures_flat(s[idx], t[idx], degree)
            out[idx] = flat
            d = self.path.dim
            with self._lock:
                for j, i in enumerate(missing):
                    g = GroupTensor(TruncatedTensor(d, degree, split_levels(flat[j], d, degree)))
                    self._memo[(float(s[i]), float(t[i]), int(degree))] = g
        return out


def signature(path, s, t, degree):
    """Signature of a sampled path over [s, t] truncated at ``degree``."""
    return path.signature(s, t, degree)


# ---------------------------------------------------------------------------
# generators


def make_rng(seed):
    """Counter-based generator (Philox) so streams are reproducible per seed."""
    return np.random.Generator(np.random.Philox(int(seed)))


def _fgn_autocov(h, n):
    k = np.arange(n + 1, dtype=np.float64)
    return 0.5 * (np.abs(k + 1) ** (2 * h) - 2 * np.abs(k) ** (2 * h) + np.abs(k - 1) ** (2 * h))


def fgn(hurst, n, rng, size=1):
    """Fractional Gaussian noise with unit step (rows are independent samples).

    Uses circulant embedding; falls back to a Cholesky factorisation if the
    embedding is not positive semi-definite.
    """
    if not 0 < hurst < 1:
        raise ValueError("Hurst parameter must lie in (0, 1)")
    if n <= 0:
        raise ValueError("number of steps must be positive")
    gamma = _fgn_autocov(hurst, n)
    row = np.concatenate([gamma[:n + 1], gamma[n - 1:0:-1]])
    lam = np.fft.fft(row).real
    if lam.min() < -1e-10 * lam.max():
        cov = gamma[np.abs(np.subtract.outer(np.arange(n), np.arange(n)))]
        chol = np.linalg.cholesky(cov)
        return rng.standard_normal((size, n)) @ chol.T
    lam = np.clip(lam, 0.0, None)
    m = row.size
    out = np.empty((size, n))
    for j in range(size):
        w = rng.standard_normal(m) + 1j * rng.standard_normal(m)
        out[j] = np.fft.fft(np.sqrt(lam / m) * w)[:n].real
    return out


def generate_fbm(hurst, n_steps, seed, horizon=1.0, dim=1):
    """Fractional Brownian motion on [0, horizon] sampled at n_steps+1 points."""
    n_steps = int(n_steps)
    if n_steps <= 0:
        raise ValueError("n_steps must be positive")
    rng = make_rng(seed)
    dt = horizon / n_steps
    incr = fgn(hurst, n_steps, rng, size=dim) * dt ** hurst
    values = np.zeros((n_steps + 1, dim))
    values[1:] = np.cumsum(incr.T, axis=0)
    times = np.linspace(0.0, horizon, n_steps + 1)
    return SampledPath(times, values, name=f"fbm-H{hurst}")


def brownian_increments(n_steps, dt, rng, dim=1):
    return rng.standard_normal((n_steps, dim)) * math.sqrt(dt)


# ---------------------------------------------------------------------------
# example drivers

EXAMPLE_NAMES = ("spike-path", "spike-field", "changing-roughness", "langevin")

SMOOTH_SAMPLES = 2 ** 16
ROUGH_SAMPLES_DESK = 2 ** 17
ROUGH_SAMPLES_FULL = 2 ** 20
LANGEVIN_HORIZON_FULL = 1000.0
LANGEVIN_HORIZON_DESK = 10.0
LANGEVIN_STEPS_FULL = 2 ** 20


def spike_curve(t):
    t = np.asarray(t, dtype=np.float64)
    return np.stack([1.0 / (5000.0 * (t - 0.5) ** 2 + 1.0), t], axis=-1)


def circle_curve(t):
    t = np.asarray(t, dtype=np.float64)
    return 0.5 * np.stack([np.sin(8 * np.pi * t), np.cos(8 * np.pi * t)], axis=-1)


def cos_sin_curve(t):
    """Same circle with the components exchanged; drives the spike-field example.

    In this orientation the solution from the origin runs through the
    singular set {y_i = -1} near t = 0.094, 0.188, 0.322, 0.414, 0.524.
    """
    return circle_curve(t)[..., ::-1]


def sample_curve(curve, n, t0=0.0, t1=1.0, name=None):
    times = np.linspace(t0, t1, n + 1)
    return SampledPath(times, curve(times), name=name)


def changing_roughness_path(n_steps=ROUGH_SAMPLES_DESK, seed=0, hurst=0.4):
    """Circle on [0,1/4] and [3/4,1], planar fBm on [1/4,3/4], glued continuously."""
    if n_steps % 4:
        raise ValueError("n_steps must be divisible by 4")
    times = np.linspace(0.0, 1.0, n_steps + 1)
    q = n_steps // 4
    values = np.empty((n_steps + 1, 2))
    values[: q + 1] = circle_curve(times[: q + 1])
    fbm = generate_fbm(hurst, 2 * q, seed, horizon=0.5, dim=2).values
    values[q: 3 * q + 1] = values[q] + fbm
    shift = values[3 * q] - circle_curve(times[3 * q])
    values[3 * q:] = circle_curve(times[3 * q:]) + shift
    return SampledPath(times, values, name="changing-roughness")


def langevin_steps(horizon):
    """Step count keeping the full-scale step size, rounded up to a power of two."""
    target = LANGEVIN_STEPS_FULL * horizon / LANGEVIN_HORIZON_FULL
    return max(2, 1 << int(math.ceil(math.log2(max(target, 2.0)))))


def langevin_path(horizon=LANGEVIN_HORIZON_DESK, seed=0, n_steps=None):
    """Time-enhanced Brownian motion (t, W_t) on [0, horizon]."""
    n = langevin_steps(horizon) if n_steps is None else int(n_steps)
    rng = make_rng(seed)
    times = np.linspace(0.0, horizon, n + 1)
    w = np.zeros(n + 1)
    w[1:] = np.cumsum(brownian_increments(n, horizon / n, rng)[:, 0])
    return SampledPath(times, np.stack([times, w], axis=1), name="langevin")


def build_example_path(name, seed=0, n_samples=None, horizon=None, full_scale=False):
    """Driving path of one of the registered examples (desk scale by default)."""
    if name == "spike-path":
        return sample_curve(spike_curve, n_samples or SMOOTH_SAMPLES, name=name)
    if name == "spike-field":
        return sample_curve(cos_sin_curve, n_samples or SMOOTH_SAMPLES, name=name)
    if name == "changing-roughness":
        n = n_samples or (ROUGH_SAMPLES_FULL if full_scale else ROUGH_SAMPLES_DESK)
        return changing_roughness_path(n, seed=seed)
    if name == "langevin":
        if horizon is None:
            horizon = LANGEVIN_HORIZON_FULL if full_scale else LANGEVIN_HORIZON_DESK
        return langevin_path(horizon, seed=seed, n_steps=n_samples)
    raise ValueError(f"unknown example {name!r}; choose from {', '.join(EXAMPLE_NAMES)}")
