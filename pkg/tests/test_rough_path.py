import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rdeadapt.rough_path import (
    EXAMPLE_NAMES,
    SampledPath,
    build_example_path,
    circle_curve,
    generate_fbm,
    langevin_steps,
    sample_curve,
    segment_signature,
    spike_curve,
)
from rdeadapt.tensor_algebra import TruncatedTensor, shuffle_defect, tensor_mul


def quadrature_signature(values, refine=4):
    """Levels 1..3 by exact quadrature on the polygon with each chord split ``refine`` times.

    Level 2 integrates a linear integrand (trapezoid, exact) and level 3 a
    quadratic one (Simpson, exact) against the constant derivative of a piece.
    """
    v = np.asarray(values, dtype=np.float64)
    frac = np.arange(refine) / refine
    pts = (v[:-1, None, :] + frac[None, :, None] * (v[1:] - v[:-1])[:, None, :]).reshape(-1, v.shape[1])
    pts = np.vstack([pts, v[-1]])
    x0 = pts[0]
    s2 = np.zeros((v.shape[1],) * 2)
    s3 = np.zeros((v.shape[1],) * 3)
    for a, b in zip(pts[:-1], pts[1:]):
        dx = b - a
        ya, ym, yb = a - x0, 0.5 * (a + b) - x0, b - x0
        s2_a = s2
        s2_m = s2 + np.outer(0.5 * (ya + ym), 0.5 * dx)
        s2_b = s2 + np.outer(0.5 * (ya + yb), dx)
        s3 = s3 + np.einsum("ij,k->ijk", (s2_a + 4 * s2_m + s2_b) / 6.0, dx)
        s2 = s2_b
    return pts[-1] - x0, s2, s3


def test_segment_signature_examples():
    v = np.array([1.0, 2.0])
    g = segment_signature(v, 3)
    assert np.allclose(g[1], v, atol=0)
    assert np.allclose(g[2], np.outer(v, v).reshape(-1) / 2, atol=0)
    assert np.allclose(g[3], np.einsum("i,j,k->ijk", v, v, v).reshape(-1) / 6, atol=1e-15)
    assert segment_signature(np.zeros(2), 3) == TruncatedTensor.one(2, 3)
    h = 0.37
    g = segment_signature([h], 5)
    for k in range(6):
        assert g[k][0] == pytest.approx(h ** k / np.prod(range(1, k + 1)), rel=1e-15)


def test_two_segment_path_example():
    p = SampledPath([0.0, 0.5, 1.0], [[0, 0], [1, 0], [1, 1]])
    g = p.signature(0.0, 1.0, 2)
    assert np.array_equal(g[1], [1.0, 1.0])
    assert np.allclose(g[2], [0.5, 1.0, 0.0, 0.5], atol=1e-16)


def test_signature_degenerate_and_errors():
    p = sample_curve(spike_curve, 64)
    assert p.signature(0.3, 0.3, 3) == TruncatedTensor.one(2, 3)
    with pytest.raises(ValueError):
        p.signature(0.6, 0.2, 2)
    with pytest.raises(ValueError):
        p.signature(-0.1, 0.5, 2)


def test_partial_segment_interpolation():
    p = SampledPath([0.0, 1.0], [[0.0], [2.0]])
    g = p.signature(0.25, 0.75, 2)
    assert g[1][0] == pytest.approx(1.0, abs=1e-15)
    assert g[2][0] == pytest.approx(0.5, abs=1e-15)


def test_circle_against_quadrature_oracle():
    p = sample_curve(circle_curve, 2 ** 14)
    q = 2 ** 12                          # [0, 0.25]
    g = p.signature(0.0, 0.25, 3)
    l1, l2, l3 = quadrature_signature(p.values[: q + 1])
    assert np.abs(g[1] - l1).max() <= 1e-8
    assert np.abs(g[2] - l2.reshape(-1)).max() <= 1e-8
    assert np.abs(g[3] - l3.reshape(-1)).max() <= 1e-8


def test_brute_force_fold():
    rng = np.random.default_rng(3)
    vals = np.cumsum(rng.standard_normal((40, 3)), axis=0)
    p = SampledPath(np.linspace(0, 1, 40), vals)
    acc = TruncatedTensor.one(3, 4)
    for a, b in zip(vals[:-1], vals[1:]):
        acc = tensor_mul(acc, segment_signature(b - a, 4))
    g = p.signature(0.0, 1.0, 4)
    assert g.max_abs_diff(acc) <= 1e-12 * max(1.0, np.abs(acc.to_flat()).max())


@pytest.mark.parametrize("name", EXAMPLE_NAMES)
def test_chen_identity_examples(name):
    path = build_example_path(name)
    rng = np.random.default_rng(11)
    for _ in range(5):
        s, u, t = np.sort(rng.uniform(path.t0, path.t1, 3))
        for N in (2, 4):
            g = tensor_mul(path.signature(s, u, N), path.signature(u, t, N))
            ref = path.signature(s, t, N)
            scale = max(1.0, np.abs(ref.to_flat()).max())
            assert g.max_abs_diff(ref) <= 1e-12 * scale


@pytest.mark.parametrize("name", EXAMPLE_NAMES)
def test_signatures_group_like(name):
    path = build_example_path(name)
    rng = np.random.default_rng(2)
    s, t = np.sort(rng.uniform(path.t0, path.t1, 2))
    assert shuffle_defect(path.signature(s, t, 4)) <= 1e-10


@given(seed=st.integers(0, 2 ** 31), N=st.integers(1, 4))
@settings(max_examples=40, deadline=None)
def test_chen_and_projection_random_paths(seed, N):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(2, 60))
    times = np.cumsum(rng.uniform(0.1, 1.0, m + 1))
    vals = rng.standard_normal((m + 1, 2))
    p = SampledPath(times, vals)
    s, u, t = np.sort(rng.uniform(times[0], times[-1], 3))
    if rng.uniform() < 0.3:
        u = times[int(rng.integers(0, m + 1))]     # knots as split points
        s, u, t = np.sort([s, u, t])
    g = tensor_mul(p.signature(s, u, N), p.signature(u, t, N))
    ref = p.signature(s, t, N)
    assert g.max_abs_diff(ref) <= 1e-12 * max(1.0, np.abs(ref.to_flat()).max())
    if N > 1:
        assert p.signature(s, t, N + 1).truncate(N) == p.signature(s, t, N)


def test_batch_queries_match_single():
    p = build_example_path("spike-path")
    s = np.array([0.0, 0.1, 0.45])
    t = np.array([0.1, 0.45, 1.0])
    flat = p.cache.signatures_flat(s, t, 3)
    for k in range(3):
        assert np.array_equal(flat[k], p.signature(s[k], t[k], 3).to_flat())


def test_fbm_brownian_variance():
    n = 10 ** 4
    path = generate_fbm(0.5, n, seed=1, horizon=1.0)
    inc = np.diff(path.values[:, 0])
    assert abs(inc.var() / (1.0 / n) - 1.0) <= 0.05


def test_fbm_scaling_slope():
    path = generate_fbm(0.4, 2 ** 16, seed=4, horizon=1.0)
    x = path.values[:, 0]
    lags = 2 ** np.arange(0, 9)
    msd = [np.mean((x[lag:] - x[:-lag]) ** 2) for lag in lags]
    slope = np.polyfit(np.log(lags), np.log(msd), 1)[0]
    assert abs(slope - 0.8) <= 0.05


def test_fbm_determinism_and_errors():
    a = generate_fbm(0.4, 1000, seed=9, dim=2)
    b = generate_fbm(0.4, 1000, seed=9, dim=2)
    c = generate_fbm(0.4, 1000, seed=10, dim=2)
    assert a.values.tobytes() == b.values.tobytes()
    assert a.values.tobytes() != c.values.tobytes()
    with pytest.raises(ValueError):
        generate_fbm(0.4, 0, seed=1)
    with pytest.raises(ValueError):
        generate_fbm(1.2, 10, seed=1)


def test_example_path_values():
    p = build_example_path("spike-path")
    assert p(0.5)[0] == pytest.approx(1.0, abs=1e-15)
    assert p(0.0)[0] == pytest.approx(1.0 / 1251.0, rel=1e-15)
    with pytest.raises(ValueError):
        build_example_path("nope")


def test_changing_roughness_glue_continuity():
    p = build_example_path("changing-roughness")
    for t in (0.25, 0.75):
        k = int(np.searchsorted(p.times, t))
        assert p.times[k] == t
        eps = 1e-3 * (p.times[1] - p.times[0])
        left, right = p(t - eps), p(t + eps)
        assert np.abs(left - p.values[k]).max() <= 1.001e-3 * np.abs(p.values[k] - p.values[k - 1]).max() + 1e-15
        assert np.abs(right - p.values[k]).max() <= 1.001e-3 * np.abs(p.values[k + 1] - p.values[k]).max() + 1e-15
    # circle pieces follow the formula up to the gluing shift
    q = len(p.times) // 4
    assert np.allclose(p.values[:q + 1], circle_curve(p.times[:q + 1]), atol=0)
    shift = p.values[3 * q] - circle_curve(p.times[3 * q])
    assert np.allclose(p.values[3 * q:], circle_curve(p.times[3 * q:]) + shift, atol=1e-15)


def test_langevin_path_layout():
    p = build_example_path("langevin", seed=7, horizon=10.0)
    assert p.n_segments == langevin_steps(10.0) == 16384
    assert np.allclose(p.values[:, 0], p.times, atol=0)
    q = build_example_path("langevin", seed=7, horizon=10.0)
    assert p.values.tobytes() == q.values.tobytes()


def test_csv_roundtrip_and_errors():
    p = build_example_path("spike-path", n_samples=50)
    text = p.to_csv()
    back = SampledPath.from_csv(io.StringIO(text))
    assert back.times.tobytes() == p.times.tobytes()
    assert back.values.tobytes() == p.values.tobytes()
    bad = "t,x1\n0,0\n0.5,abc\n1,1\n"
    with pytest.raises(ValueError, match="line 3"):
        SampledPath.from_csv(bad)
    with pytest.raises(ValueError, match="line 3"):
        SampledPath.from_csv("t,x1\n0,0\n0.5,1,2\n")
    with pytest.raises(ValueError, match="line 1"):
        SampledPath.from_csv("time,x\n0,0\n1,1\n")
    with pytest.raises(ValueError):
        SampledPath.from_csv("t,x1\n0,0\n0,1\n")
