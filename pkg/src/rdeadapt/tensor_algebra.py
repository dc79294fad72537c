"""Truncated tensor algebra over R^d.

An element of T^N(R^d) is stored as N+1 dense levels, level k being a flat
array of length d**k.  The multi-index (i_1, ..., i_k) lives at flat position
sum_j i_j * d**(k-j), i.e. ordinary row-major order of a (d,)*k array.

Besides the object API (:class:`TruncatedTensor`, :class:`GroupTensor`) the
module exposes a few helpers working on the concatenated flat vector of all
levels.  They take an array namespace ``xp`` so that the same code runs on
numpy arrays and inside jax-traced functions.
"""

from __future__ import annotations

import itertools
import json
from functools import lru_cache

import numpy as np


# ---------------------------------------------------------------------------
# flat layout helpers


@lru_cache(maxsize=None)
def level_offsets(dim, degree):
    """Start offsets of levels 0..degree in the flat vector, plus the total size."""
    offs = [0]
    for k in range(degree + 1):
        offs.append(offs[-1] + dim ** k)
    return tuple(offs)


def flat_size(dim, degree):
    """Number of coefficients of T^degree(R^dim), level 0 included."""
    return level_offsets(dim, degree)[-1]


def multi_index_to_flat(word, dim):
    """Map a 0-based multi-index to its flat position inside its level."""
    idx = 0
    for letter in word:
        if not 0 <= letter < dim:
            raise ValueError(f"letter {letter} outside 0..{dim - 1}")
        idx = idx * dim + letter
    return idx


def flat_to_multi_index(index, dim, length):
    """Inverse of :func:`multi_index_to_flat` for a word of the given length."""
    if not 0 <= index < dim ** length:
        raise ValueError("flat index out of range")
    word = []
    for _ in range(length):
        index, r = divmod(index, dim)
        word.append(r)
    return tuple(reversed(word))


def split_levels(flat, dim, degree, xp=np):
    """Split a flat vector (levels 0..degree) into a list of level arrays."""
    offs = level_offsets(dim, degree)
    return [flat[..., offs[k]:offs[k + 1]] for k in range(degree + 1)]


def join_levels(levels, xp=np):
    return xp.concatenate(levels, axis=-1)


def _outer(a, b, xp):
    # batched outer product over the last axis, flattened row-major
    out = a[..., :, None] * b[..., None, :]
    return out.reshape(out.shape[:-2] + (a.shape[-1] * b.shape[-1],))


def mul_levels(a, b, degree, xp=np, a_min=0, b_min=0):
    """Truncated product of two level lists.

    ``a_min``/``b_min`` declare that all levels below them vanish, which lets
    callers skip work (e.g. for elements of the Lie algebra).
    """
    out = []
    for n in range(degree + 1):
        acc = None
        for k in range(max(a_min, n - degree), n + 1):
            j = n - k
            if j < b_min or k < a_min:
                continue
            term = _outer(a[k], b[j], xp)
            acc = term if acc is None else acc + term
        if acc is None:
            acc = xp.zeros(a[n].shape[:-1] + (a[n].shape[-1],))
        out.append(acc)
    return out


def flat_mul(a, b, dim, degree, xp=np):
    """Truncated tensor product of two flat vectors (supports leading batch axes)."""
    la = split_levels(a, dim, degree, xp)
    lb = split_levels(b, dim, degree, xp)
    return join_levels(mul_levels(la, lb, degree, xp), xp)


# ---------------------------------------------------------------------------
# object API


class TruncatedTensor:
    """Element of the truncated tensor algebra T^N(R^d).

    :param dim: dimension d of the underlying space
    :param degree: truncation level N
    :param levels: sequence of N+1 arrays, level k holding d**k entries
    """

    __slots__ = ("dim", "degree", "levels")

    def __init__(self, dim, degree, levels):
        dim = int(dim)
        degree = int(degree)
        if dim < 1 or degree < 0:
            raise ValueError("dim must be positive and degree non-negative")
        if len(levels) != degree + 1:
            raise ValueError(f"expected {degree + 1} levels, got {len(levels)}")
        lv = []
        for k, arr in enumerate(levels):
            arr = np.array(arr, dtype=np.float64).reshape(-1)
            if arr.size != dim ** k:
                raise ValueError(f"level {k} must have {dim ** k} entries, got {arr.size}")
            arr.setflags(write=False)
            lv.append(arr)
        self.dim = dim
        self.degree = degree
        self.levels = tuple(lv)

    # construction helpers

    @classmethod
    def zero(cls, dim, degree):
        return cls(dim, degree, [np.zeros(dim ** k) for k in range(degree + 1)])

    @classmethod
    def one(cls, dim, degree):
        t = [np.zeros(dim ** k) for k in range(degree + 1)]
        t[0][0] = 1.0
        return cls(dim, degree, t)

    @classmethod
    def from_flat(cls, flat, dim, degree):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (flat_size(dim, degree),):
            raise ValueError("flat vector has wrong length")
        return cls(dim, degree, split_levels(flat, dim, degree))

    @classmethod
    def from_level1(cls, vec, degree, scalar=0.0):
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        dim = vec.size
        t = [np.zeros(dim ** k) for k in range(degree + 1)]
        t[0][0] = scalar
        if degree >= 1:
            t[1] = vec.copy()
        return cls(dim, degree, t)

    def to_flat(self):
        return np.concatenate(self.levels)

    def __getitem__(self, k):
        return self.levels[k]

    def level_tensor(self, k):
        """Level k reshaped to a (d,)*k array."""
        return self.levels[k].reshape((self.dim,) * k)

    def coefficient(self, word):
        """Coefficient of a word given as a sequence of 0-based letters."""
        word = tuple(word)
        if len(word) > self.degree:
            raise ValueError("word longer than the truncation degree")
        return float(self.levels[len(word)][multi_index_to_flat(word, self.dim)])

    # linear structure

    def _check(self, other):
        if not isinstance(other, TruncatedTensor):
            raise TypeError("expected a TruncatedTensor")
        if other.dim != self.dim or other.degree != self.degree:
            raise ValueError(
                f"dimension/degree mismatch: ({self.dim},{self.degree}) vs ({other.dim},{other.degree})"
            )

    def __add__(self, other):
        self._check(other)
        return TruncatedTensor(self.dim, self.degree, [a + b for a, b in zip(self.levels, other.levels)])

    def __sub__(self, other):
        self._check(other)
        return TruncatedTensor(self.dim, self.degree, [a - b for a, b in zip(self.levels, other.levels)])

    def __neg__(self):
        return self.scale(-1.0)

    def scale(self, c):
        return TruncatedTensor(self.dim, self.degree, [c * a for a in self.levels])

    __rmul__ = scale

    def __mul__(self, other):
        if isinstance(other, TruncatedTensor):
            return tensor_mul(self, other)
        return self.scale(float(other))

    def __matmul__(self, other):
        return tensor_mul(self, other)

    def dilate(self, lam):
        """Dilation: level k is multiplied by lam**k."""
        return TruncatedTensor(self.dim, self.degree, [lam ** k * a for k, a in enumerate(self.levels)])

    def truncate(self, degree):
        if degree > self.degree:
            raise ValueError("cannot truncate to a higher degree")
        res = TruncatedTensor(self.dim, degree, self.levels[: degree + 1])
        return GroupTensor(res) if isinstance(self, GroupTensor) else res

    def extend(self, degree):
        """Pad with zero levels up to ``degree``."""
        if degree < self.degree:
            raise ValueError("use truncate to lower the degree")
        lv = list(self.levels) + [np.zeros(self.dim ** k) for k in range(self.degree + 1, degree + 1)]
        return TruncatedTensor(self.dim, degree, lv)

    def allclose(self, other, rtol=1e-12, atol=1e-12):
        self._check(other)
        return all(np.allclose(a, b, rtol=rtol, atol=atol) for a, b in zip(self.levels, other.levels))

    def max_abs_diff(self, other):
        self._check(other)
        return max(float(np.max(np.abs(a - b))) for a, b in zip(self.levels, other.levels))

    def to_json(self):
        """Debug dump as ``{dim, degree, levels}``."""
        return json.dumps({
            "dim": self.dim,
            "degree": self.degree,
            "levels": [[float(x) for x in lv] for lv in self.levels],
        })

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        return cls(obj["dim"], obj["degree"], obj["levels"])

    def __repr__(self):
        return f"TruncatedTensor(dim={self.dim}, degree={self.degree}, levels={[lv.tolist() for lv in self.levels]})"

    def __eq__(self, other):
        if not isinstance(other, TruncatedTensor):
            return NotImplemented
        return (self.dim == other.dim and self.degree == other.degree
                and all(np.array_equal(a, b) for a, b in zip(self.levels, other.levels)))

    __hash__ = None


class GroupTensor(TruncatedTensor):
    """A truncated tensor with unit scalar part, meant to be group-like.

    Construction only enforces ``levels[0] == 1``; group-likeness itself is
    checked with :func:`shuffle_coefficient` / :func:`is_group_like`.
    """

    __slots__ = ()

    def __init__(self, tensor, *args):
        if args:
            tensor = TruncatedTensor(tensor, *args)
        if tensor.levels[0][0] != 1.0:
            raise ValueError("group elements must have scalar part exactly 1")
        super().__init__(tensor.dim, tensor.degree, tensor.levels)

    def inverse(self):
        return GroupTensor(tensor_inverse(self))

    def log(self):
        return log_n(self)


def repr_float(x):
    """Round-trip safe decimal representation (17 significant digits)."""
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# operations


def tensor_mul(a, b):
    """Truncated tensor product: pi_n(a*b) = sum_k pi_k(a) (x) pi_{n-k}(b)."""
    if not isinstance(a, TruncatedTensor) or not isinstance(b, TruncatedTensor):
        raise TypeError("tensor_mul expects TruncatedTensor arguments")
    a._check(b)
    d, N = a.dim, a.degree
    out = []
    for n in range(N + 1):
        acc = np.zeros(d ** n)
        for k in range(n + 1):
            ak, bj = a.levels[k], b.levels[n - k]
            if not ak.any() or not bj.any():
                continue
            acc += np.outer(ak, bj).reshape(-1)
        out.append(acc)
    res = TruncatedTensor(d, N, out)
    if isinstance(a, GroupTensor) and isinstance(b, GroupTensor):
        return GroupTensor(res)
    return res


def tensor_inverse(a):
    """Inverse by the terminating Neumann series around pi_0(a)."""
    a0 = float(a.levels[0][0])
    if a0 == 0.0:
        raise ZeroDivisionError("element with zero scalar part is not invertible")
    d, N = a.dim, a.degree
    one = TruncatedTensor.one(d, N)
    x = one - a.scale(1.0 / a0)       # pi_0(x) = 0, so x^(N+1) = 0
    acc = one
    power = one
    for _ in range(N):
        power = tensor_mul(power, x)
        acc = acc + power
    res = acc.scale(1.0 / a0)
    if isinstance(a, GroupTensor):
        # scalar part is 1 up to rounding; make it exact
        lv = list(res.levels)
        lv[0] = np.ones(1)
        return GroupTensor(TruncatedTensor(d, N, lv))
    return res


def log_n(g):
    """Truncated logarithm sum_{j=1}^N (-1)^(j+1)/j (g - 1)^j."""
    if float(g.levels[0][0]) != 1.0:
        raise ValueError("log_n requires an element with scalar part 1")
    d, N = g.dim, g.degree
    x = g - TruncatedTensor.one(d, N)
    acc = TruncatedTensor.zero(d, N)
    power = TruncatedTensor.one(d, N)
    for j in range(1, N + 1):
        power = tensor_mul(power, x)
        acc = acc + power.scale((-1.0) ** (j + 1) / j)
    lv = list(acc.levels)
    lv[0] = np.zeros(1)
    return TruncatedTensor(d, N, lv)


def exp_n(v):
    """Truncated exponential sum_{n=0}^N v^n / n!; the result has scalar part 1."""
    if float(v.levels[0][0]) != 0.0:
        raise ValueError("exp_n requires an element with scalar part 0")
    d, N = v.dim, v.degree
    acc = TruncatedTensor.one(d, N)
    power = TruncatedTensor.one(d, N)
    for n in range(1, N + 1):
        power = tensor_mul(power, v).scale(1.0 / n)
        acc = acc + power
    lv = list(acc.levels)
    lv[0] = np.ones(1)
    return GroupTensor(TruncatedTensor(d, N, lv))


def inhom_norm(a):
    """max over levels 1..N of the Euclidean norm of the level."""
    return max([float(np.linalg.norm(lv)) for lv in a.levels[1:]] or [0.0])


def hom_norm(a):
    """max over levels k = 1..N of ||pi_k||^(1/k)."""
    return max([float(np.linalg.norm(lv)) ** (1.0 / k) for k, lv in enumerate(a.levels) if k >= 1] or [0.0])


# shuffles ------------------------------------------------------------------


def shuffle_product(u, w):
    """Shuffle product of two words as a dict word -> multiplicity."""
    u, w = tuple(u), tuple(w)
    return dict(_shuffle(u, w))


@lru_cache(maxsize=4096)
def _shuffle(u, w):
    if not u:
        return ((w, 1),)
    if not w:
        return ((u, 1),)
    out = {}
    for word, c in _shuffle(u[:-1], w):
        key = word + (u[-1],)
        out[key] = out.get(key, 0) + c
    for word, c in _shuffle(u, w[:-1]):
        key = word + (w[-1],)
        out[key] = out.get(key, 0) + c
    return tuple(out.items())


def shuffle_coefficient(g, word_u, word_w):
    """Return (<g,u><g,w>, <g, u sh w>) for words over letters 1..d.

    Both numbers agree when g is group-like.
    """
    d = g.dim
    for letter in tuple(word_u) + tuple(word_w):
        if not 1 <= int(letter) <= d:
            raise ValueError(f"letter {letter} outside 1..{d}")
    if len(word_u) + len(word_w) > g.degree:
        raise ValueError("|u| + |w| exceeds the truncation degree")
    u0 = tuple(int(c) - 1 for c in word_u)
    w0 = tuple(int(c) - 1 for c in word_w)
    lhs = g.coefficient(u0) * g.coefficient(w0)
    rhs = sum(c * g.coefficient(word) for word, c in _shuffle(u0, w0))
    return lhs, rhs


def all_words(dim, max_len, min_len=0):
    """All words (1-based letters) of length min_len..max_len."""
    for n in range(min_len, max_len + 1):
        for word in itertools.product(range(1, dim + 1), repeat=n):
            yield word


def shuffle_defect(g):
    """Largest |<g,u><g,w> - <g,u sh w>| over all word pairs with |u|+|w| <= N."""
    worst = 0.0
    N = g.degree
    for nu in range(1, N):
        for u in all_words(g.dim, nu, nu):
            for w in all_words(g.dim, N - nu, 1):
                lhs, rhs = shuffle_coefficient(g, u, w)
                worst = max(worst, abs(lhs - rhs) / max(1.0, abs(lhs), abs(rhs)))
    return worst


def is_group_like(g, tol=1e-10):
    return float(g.levels[0][0]) == 1.0 and shuffle_defect(g) <= tol


def segment_exp_levels(v, degree):
    """Levels of exp_N(v) for a level-1 increment v (no object overhead)."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    out = [np.ones(1)]
    cur = np.ones(1)
    for k in range(1, degree + 1):
        cur = np.outer(cur, v).reshape(-1) / k
        out.append(cur)
    return out
