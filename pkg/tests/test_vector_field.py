import numpy as np
import jax.numpy as jnp
import pytest
from hypothesis import given, settings, strategies as st

from rdeadapt.log_ode import OdeSolverConfig, log_ode_step
from rdeadapt.tensor_algebra import TruncatedTensor, exp_n, flat_size, log_n, shuffle_defect, tensor_inverse, tensor_mul
from rdeadapt.vector_field import (
    FIELD_REGISTRY,
    LinearField,
    Payoff,
    VectorField,
    augment_f1,
    augment_f2,
    check_derivatives,
    coordinate_payoff,
    forward_lift,
    full_field,
    get_field,
    iterated_field_contract,
    lift_state_to_tensor,
    linear_f3,
)

TIGHT = OdeSolverConfig(rtol=1e-12, atol=1e-14)


def scalar_field(fn):
    return VectorField(lambda y: fn(y).reshape(1, 1), 1, 1, name="scalar")


def lie_tensor(rng, d, N, scale=1.0):
    flat = scale * rng.standard_normal(flat_size(d, N))
    flat[0] = 0.0
    return TruncatedTensor.from_flat(flat, d, N)


# iterated fields


def test_contract_scalar_linear():
    f = scalar_field(lambda y: y)
    h, y = 0.3, np.array([1.7])
    v = TruncatedTensor(1, 3, [[0], [h], [0], [0]])
    assert f.contract(y, v)[0] == pytest.approx(y[0] * h, rel=1e-15)
    v = log_n(exp_n(TruncatedTensor(1, 3, [[0], [h], [0], [0]])))
    assert iterated_field_contract(f, y, v)[0] == pytest.approx(y[0] * h, rel=1e-14)
    # f^{ok}(y) = y for every k
    for lv in f.iterated(y, 4):
        assert lv[0, 0] == pytest.approx(y[0], rel=1e-15)


def test_contract_square_field_second_level():
    f = scalar_field(lambda y: y ** 2)
    y, w = np.array([0.6]), 0.25
    v = TruncatedTensor(1, 2, [[0], [0], [w]])
    assert f.contract(y, v)[0] == pytest.approx(2 * y[0] ** 3 * w, rel=1e-14)


def test_spike_path_field_at_origin():
    f = get_field("spike-path")
    v = TruncatedTensor.from_level1([1.0, 0.0], 1)
    assert np.allclose(f.contract(np.zeros(2), v), [0.0, 0.0], atol=0)
    assert np.allclose(f.evaluate(np.zeros(2)), [[0.0, 0.0], [0.0, 1.0]], atol=0)


def test_second_level_word_order():
    # word (i, j) carries Df_j f_i, the coefficient of int_{s<u} dx^i_s dx^j_u
    f = get_field("spike-path")
    y = np.array([0.3, -0.2])
    lv = f.iterated(y, 2)[1]
    F, J = f.evaluate(y), f.jacobian(y)
    for i in range(2):
        for j in range(2):
            assert np.allclose(lv[2 * i + j], J[:, j, :] @ F[:, i], atol=1e-14)


def test_contract_rejects_bad_tensors():
    f = get_field("spike-path")
    with pytest.raises(ValueError):
        f.contract(np.zeros(2), TruncatedTensor.one(2, 2))
    with pytest.raises(ValueError):
        f.contract(np.zeros(2), TruncatedTensor.zero(3, 2))


@pytest.mark.parametrize("name", sorted(FIELD_REGISTRY))
def test_contract_linear_in_tensor(name):
    f = get_field(name)
    rng = np.random.default_rng(4)
    d, e = f.dim_in, f.dim_state
    y = 0.3 * rng.standard_normal(e)
    u, v = lie_tensor(rng, d, 3), lie_tensor(rng, d, 3)
    a, b = 0.7, -1.3
    lhs = f.contract(y, u * a + v * b)
    rhs = a * f.contract(y, u) + b * f.contract(y, v)
    assert np.abs(lhs - rhs).max() <= 1e-12 * max(1.0, np.abs(rhs).max())


@given(seed=st.integers(0, 2 ** 31), a=st.floats(-2, 2), b=st.floats(-2, 2))
@settings(max_examples=30, deadline=None)
def test_contract_linearity_random(seed, a, b):
    f = get_field("spike-field")
    rng = np.random.default_rng(seed)
    y = 0.2 * rng.standard_normal(2)
    u, v = lie_tensor(rng, 2, 4), lie_tensor(rng, 2, 4)
    lhs = f.contract(y, u * a + v * b)
    rhs = a * f.contract(y, u) + b * f.contract(y, v)
    assert np.abs(lhs - rhs).max() <= 1e-12 * max(1.0, np.abs(lhs).max(), np.abs(rhs).max())


@pytest.mark.parametrize("name", sorted(FIELD_REGISTRY))
def test_derivative_self_check(name):
    f = get_field(name)
    rng = np.random.default_rng(20)
    pts = 0.5 * rng.standard_normal((20, f.dim_state))
    assert check_derivatives(f, pts) <= 1e-5


def test_payoff_gradient_self_check():
    rng = np.random.default_rng(8)
    g = Payoff(lambda y: jnp.array([jnp.sin(y[0]) * y[1], y[0] ** 2]), 2, 2)
    assert check_derivatives(g, rng.standard_normal((20, 2))) <= 1e-5
    q = coordinate_payoff(2, 0)
    assert np.array_equal(q.gradient(np.array([0.3, 0.4])), [[1.0, 0.0]])


# augmented fields


def test_f1_scalar():
    f1 = augment_f1(scalar_field(lambda y: y))
    m = f1.evaluate(np.array([0.4, 2.5]))
    assert np.array_equal(m, [[1.0], [2.5]])
    # the top block does not depend on the state
    assert np.array_equal(f1.jacobian(np.array([0.4, 2.5]))[0], np.zeros((1, 2)))


def test_f1_derivative_matches_base():
    f = get_field("spike-path")
    f1 = augment_f1(f)
    z = np.array([0.1, -0.4, 0.3, 0.2])
    jac = f1.jacobian(z)                       # (d+e, d, d+e)
    assert np.allclose(jac[2:, :, 2:], f.jacobian(z[2:]), atol=1e-14)
    assert check_derivatives(f1, z[None, :]) <= 1e-5


def test_f2_scalar_dx_convention():
    f2 = augment_f2(scalar_field(lambda y: y))
    m = f2.evaluate(np.array([0.2, 1.4, 0.0]))      # state (x, y, h)
    # increment (dx, dy) acts through f'(y) dx; the dy column is zero
    assert np.array_equal(m[2], [1.0, 0.0])
    assert np.array_equal(m[:2], np.eye(2))
    assert np.array_equal(m @ np.zeros(2), np.zeros(3))


def test_f2_jacobian_block_against_differences():
    f = get_field("spike-path")
    f2 = augment_f2(f)
    e, d = 2, 2
    v = np.zeros(d + e + e * e)
    block = f2.evaluate(v)[d + e:, :d]            # (e*e, d), entry (i*e + j, l) = d_j f_il
    h = 1e-6
    for j in range(e):
        dy = np.zeros(e)
        dy[j] = h
        fd = (f.evaluate(dy) - f.evaluate(-dy)) / (2 * h)       # (e, d)
        for i in range(e):
            assert np.allclose(block[i * e + j], fd[i], atol=1e-8)
    assert np.array_equal(f2.evaluate(v)[d + e:, d:], np.zeros((e * e, e)))


def test_linear_f3_products():
    rng = np.random.default_rng(3)
    e, c = 2, 2
    f3 = linear_f3(c, e)
    A, B = rng.standard_normal((e, e)), rng.standard_normal((e, e))
    psi = np.eye(e)
    w1 = jnp.asarray(A.reshape(-1))
    assert np.allclose(f3.rhs(jnp.asarray(psi.reshape(-1)), w1, 1), A.reshape(-1), atol=1e-15)
    w2 = np.concatenate([np.zeros(e * e), np.outer(A.reshape(-1), B.reshape(-1)).reshape(-1)])
    psi = rng.standard_normal((c, e))
    out = np.asarray(f3.rhs(jnp.asarray(psi.reshape(-1)), jnp.asarray(w2), 2))
    assert np.allclose(out, (psi @ A @ B).reshape(-1), atol=1e-13)


def test_linear_f3_matches_generic_oracle():
    rng = np.random.default_rng(6)
    f3 = LinearField(1, 2)
    generic = f3.as_vector_field()
    v = lie_tensor(rng, 4, 3, 0.5)
    psi = rng.standard_normal(2)
    direct = np.asarray(f3.rhs(jnp.asarray(psi), jnp.asarray(v.to_flat()[1:]), 3))
    assert np.allclose(direct, generic.contract(psi, v), atol=1e-12)
    # derivatives of order two vanish
    assert np.allclose(np.asarray(generic._compiled("jac")(jnp.asarray(psi))),
                       np.asarray(generic._compiled("jac")(jnp.asarray(psi + 1.0))), atol=0)


def test_linear_f3_scalar_flow_and_errors():
    f3 = linear_f3(1, 1)
    h, psi = 0.35, 1.6
    out = log_ode_step(f3, [psi], exp_n(TruncatedTensor.from_level1([h], 3)), TIGHT)
    assert out[0] == pytest.approx(psi * np.exp(h), rel=1e-11)
    with pytest.raises(ValueError):
        LinearField(0, 2)


# full field


def test_full_field_at_unit():
    f = get_field("spike-path")
    ff = full_field(f, 3)
    m = ff.evaluate(np.zeros(ff.dim_state))
    assert np.array_equal(m[:2], f.evaluate(np.zeros(2)))
    assert np.array_equal(m[2:], np.zeros((ff.dim_state - 2, 2)))


def test_full_field_degree_one_is_base():
    f = get_field("spike-field")
    ff = full_field(f, 1)
    y = np.array([0.2, -0.3])
    assert np.allclose(ff.evaluate(y), f.evaluate(y), atol=0)


@pytest.mark.parametrize("name", ["spike-path", "langevin"])
def test_full_field_first_level_flow_and_group_like(name):
    f = get_field(name)
    N = 3
    ff = full_field(f, N)
    y0 = np.array([0.3, -0.1])
    g = exp_n(TruncatedTensor.from_level1([0.2, -0.15], 2))
    plain = log_ode_step(f, y0, g, TIGHT)
    z0 = exp_n(TruncatedTensor.from_level1(y0, N)).to_flat()[1:]
    z1 = log_ode_step(ff, z0, g, TIGHT)
    assert np.allclose(z1[:2], plain, atol=1e-10)
    assert shuffle_defect(lift_state_to_tensor(z1, 2, N)) <= 1e-8


@pytest.mark.parametrize("N", [2, 3])
def test_forward_lift_matches_full_product_field(N):
    # the lift restarts at the unit, so its tensor part is the increment z0^{-1} (x) z1
    f = get_field("langevin")
    d, e = 2, 2
    y0 = np.array([0.3, -0.2])
    g = exp_n(TruncatedTensor.from_level1([0.2, -0.15], N))
    g = tensor_mul(g, exp_n(TruncatedTensor.from_level1([-0.1, 0.25], N)))
    lift = forward_lift(f, N)
    out = log_ode_step(lift, np.concatenate([y0, np.zeros(lift.lift_size)]), g, TIGHT)
    big = full_field(augment_f1(f), N)
    z0 = exp_n(TruncatedTensor.from_level1(np.concatenate([np.zeros(d), y0]), N))
    z1 = lift_state_to_tensor(log_ode_step(big, z0.to_flat()[1:], g, TIGHT), d + e, N)
    inc = tensor_mul(tensor_inverse(z0), z1)
    assert np.allclose(out[:e], z1[1][d:], atol=1e-10)
    assert np.abs(out[e:] - inc.to_flat()[1:]).max() <= 1e-10
