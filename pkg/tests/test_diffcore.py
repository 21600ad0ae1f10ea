import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from protomlc import diffcore as dc
from protomlc.diffcore import Tensor

from conftest import weighted_sum

N_INSTANCES = 100


def _shape(rng, ndim=2, lo=1, hi=4):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=ndim))


# Each entry builds (f, x) for one random instance; f maps a Tensor to a scalar Tensor.
def _case_add(rng):
    s = _shape(rng)
    b = rng.standard_normal(s[1:])
    return lambda x: weighted_sum(x + b, np.random.default_rng(0)), rng.standard_normal(s)


def _case_mul(rng):
    s = _shape(rng)
    b = rng.standard_normal(s)
    return lambda x: weighted_sum(x * b * x, np.random.default_rng(0)), rng.standard_normal(s)


def _case_div(rng):
    s = _shape(rng)
    b = rng.uniform(1.0, 2.0, size=s)
    return lambda x: weighted_sum(b / (x * x + 1.0) + x / b, np.random.default_rng(0)), rng.standard_normal(s)


def _case_scalar_ops(rng):
    s = _shape(rng)
    c = float(rng.uniform(0.5, 2.0))
    return lambda x: weighted_sum((x * c - 1.0) * 0.5 + 2.0 - x, np.random.default_rng(0)), rng.standard_normal(s)


def _case_power(rng):
    s = _shape(rng)
    e = float(rng.choice([0.5, 1.5, 2.0, 3.0]))
    return lambda x: weighted_sum(dc.power(x, e), np.random.default_rng(0)), rng.uniform(0.5, 2.0, size=s)


def _case_exp(rng):
    s = _shape(rng)
    return lambda x: weighted_sum(dc.exp(x), np.random.default_rng(0)), rng.standard_normal(s)


def _case_log(rng):
    s = _shape(rng)
    return lambda x: weighted_sum(dc.log(x), np.random.default_rng(0)), rng.uniform(0.3, 3.0, size=s)


def _case_sqrt(rng):
    s = _shape(rng)
    return lambda x: weighted_sum(dc.sqrt(x), np.random.default_rng(0)), rng.uniform(0.3, 3.0, size=s)


def _case_tanh_sigmoid(rng):
    s = _shape(rng)
    return (lambda x: weighted_sum(dc.tanh(x) + dc.sigmoid(x) + dc.softplus(x), np.random.default_rng(0)),
            rng.standard_normal(s) * 2)


def _away_from_zero(rng, s):
    x = rng.standard_normal(s)
    return np.where(np.abs(x) < 0.05, 0.5, x)


def _case_relu(rng):
    s = _shape(rng)
    return lambda x: weighted_sum(dc.relu(x), np.random.default_rng(0)), _away_from_zero(rng, s)


def _case_gelu(rng):
    s = _shape(rng)
    x = rng.uniform(-3, 3, size=s)
    # stay clear of the stationary point near -0.7518 and the flat far tail, where the
    # gradient is so small that relative error measures only finite-difference noise
    x = np.where(np.abs(x + 0.7518) < 0.1, 0.4, x)
    return lambda t: weighted_sum(dc.gelu(t), np.random.default_rng(0)), x


def _case_clip(rng):
    s = _shape(rng)
    x = rng.uniform(-2, 2, size=s)
    x = np.where(np.abs(np.abs(x) - 1.0) < 0.05, 0.3, x)
    return lambda t: weighted_sum(dc.clip(t, -1.0, 1.0) * t, np.random.default_rng(0)), x


def _case_reductions(rng):
    s = _shape(rng, 3)
    axis = int(rng.integers(0, 3))
    return (lambda x: weighted_sum(dc.tsum(x, axis=axis) + dc.mean(x, axis=axis) * 2.0, np.random.default_rng(0))
            + dc.mean(x * x), rng.standard_normal(s))


def _case_reshape_transpose(rng):
    s = _shape(rng, 3)
    perm = tuple(rng.permutation(3))
    return (lambda x: weighted_sum(dc.reshape(dc.transpose(x, perm), (-1,)), np.random.default_rng(0)),
            rng.standard_normal(s))


def _case_slicing(rng):
    s = _shape(rng, 2, lo=2, hi=5)
    idx = rng.integers(0, s[0], size=3)
    return (lambda x: weighted_sum(x[1:, ::2], np.random.default_rng(0)) + weighted_sum(x[idx], np.random.default_rng(1)),
            rng.standard_normal(s))


def _case_concat(rng):
    s = _shape(rng)
    other = rng.standard_normal(s)
    axis = int(rng.integers(0, 2))
    return lambda x: weighted_sum(dc.concat([x * x, other, x], axis=axis), np.random.default_rng(0)), rng.standard_normal(s)


def _case_matmul(rng):
    m, p, n = _shape(rng, 3)
    b = rng.standard_normal((p, n))
    return lambda x: weighted_sum(dc.matmul(x, b), np.random.default_rng(0)), rng.standard_normal((m, p))


def _case_matmul_batched(rng):
    bsz, m, p, n = _shape(rng, 4)
    b = rng.standard_normal((bsz, p, n))
    return lambda x: weighted_sum(dc.matmul(x, b) + dc.matmul(x, b[0]), np.random.default_rng(0)), rng.standard_normal((bsz, m, p))


def _case_l2_normalize(rng):
    s = _shape(rng, 2, lo=2)
    return (lambda x: weighted_sum(dc.normalize(x, axis=-1), np.random.default_rng(0)) + dc.tsum(dc.l2_norm(x, axis=0)),
            rng.standard_normal(s) + 0.1)


def _case_cosine(rng):
    d = int(rng.integers(2, 6))
    v = rng.standard_normal(d)
    other = rng.standard_normal((3, d))
    return (lambda x: dc.cosine_sim(x, v) * 1.7 + weighted_sum(dc.cosine_matrix(dc.reshape(x, (1, -1)), other),
                                                                np.random.default_rng(0)),
            rng.standard_normal(d))


def _case_solve_spd(rng):
    k = int(rng.integers(1, 5))
    a0 = rng.standard_normal((k, k))
    b = rng.standard_normal((k, 2))

    def f(x):
        a = dc.matmul(x, dc.transpose(x)) + np.eye(k)
        return weighted_sum(dc.solve_spd(a, b), np.random.default_rng(0))

    return f, a0


def _case_softmax(rng):
    s = _shape(rng, 2, lo=2)
    return lambda x: weighted_sum(dc.softmax(x, axis=-1), np.random.default_rng(0)), rng.standard_normal(s)


def _case_logsumexp(rng):
    s = _shape(rng, 2, lo=2)
    w = (rng.random(s) < 0.7).astype(float) * rng.uniform(0.5, 2.0, size=s)
    w[:, 0] = 1.0
    return (lambda x: weighted_sum(dc.logsumexp(x, axis=1) + dc.logsumexp(x, axis=1, weights=w), np.random.default_rng(0)),
            rng.standard_normal(s))


def _case_layer_norm(rng):
    # width 2 is degenerate: the normalized pair is always (-1, 1) and the input gradient vanishes
    s = _shape(rng, 2, lo=3, hi=6)
    g = rng.uniform(0.5, 1.5, size=s[-1])
    b = rng.standard_normal(s[-1])
    return lambda x: weighted_sum(dc.layer_norm(x, g, b), np.random.default_rng(0)), rng.standard_normal(s)


OP_CASES = {name[6:]: fn for name, fn in globals().items() if name.startswith("_case_")}


@pytest.mark.parametrize("op", sorted(OP_CASES))
def test_every_op_passes_grad_check(op):
    rng = np.random.default_rng(sorted(OP_CASES).index(op))
    worst = 0.0
    for _ in range(N_INSTANCES):
        f, x = OP_CASES[op](rng)
        rep = dc.grad_check(f, x, eps=1e-5, tol=1e-5)
        worst = max(worst, rep.max_rel_error)
        assert rep.passed, f"{op}: rel error {rep.max_rel_error:.2e} at {rep.worst_index}"
    assert worst <= 1e-5


def test_grad_check_examples():
    x = np.random.default_rng(0).standard_normal((3, 4))
    rep = dc.grad_check(lambda t: dc.tsum(t), x, tol=1e-10)
    assert rep.passed
    np.testing.assert_allclose(rep.analytic, np.ones_like(x))
    rep = dc.grad_check(lambda t: dc.tsum(t * t) * 0.5, np.array([3.0, -4.0]))
    assert rep.passed
    np.testing.assert_allclose(rep.analytic, [3.0, -4.0])


def test_grad_check_flags_wrong_gradient():
    def bad(t):
        out = dc.tsum(t * t)
        wrong = Tensor(out.data, requires_grad=True, _parents=(t,), _backward=lambda g: (g * 3.0 * t.data,))
        return wrong

    rep = dc.grad_check(bad, np.array([1.0, 2.0]))
    assert not rep.passed


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_rejects_non_finite():
    with pytest.raises(dc.NumericalError):
        dc.grad_check(lambda t: dc.tsum(dc.log(t)), np.array([-1.0, 2.0]))


# -- matmul ---------------------------------------------------------------------


def test_matmul_examples():
    X = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(dc.matmul(np.eye(2), X).data, X)
    np.testing.assert_array_equal(dc.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.ones((2, 1))).data, [[3.0], [7.0]])


def test_matmul_gradient_of_sum_is_broadcast_column_sums():
    rng = np.random.default_rng(5)
    A = dc.parameter(rng.standard_normal((3, 4)))
    B = rng.standard_normal((4, 2))
    dc.tsum(dc.matmul(A, B)).backward()
    np.testing.assert_allclose(A.grad, np.tile(B.sum(axis=1), (3, 1)), rtol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(dc.ShapeError):
        dc.matmul(np.ones((2, 3)), np.ones((2, 3)))


@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
def test_matmul_associative(m, p, q, n, seed):
    rng = np.random.default_rng(seed)
    a, b, c = rng.standard_normal((m, p)), rng.standard_normal((p, q)), rng.standard_normal((q, n))
    left = dc.matmul(dc.matmul(a, b), c).data
    right = dc.matmul(a, dc.matmul(b, c)).data
    scale = np.abs(a).sum() * np.abs(b).max() * np.abs(c).max() * max(p, q)
    assert np.abs(left - right).max() <= 1e-9 * max(scale, 1.0)


# -- cosine ----------------------------------------------------------------------


def test_cosine_examples():
    u = np.array([0.3, -1.2, 2.0])
    assert dc.cosine_sim(u, u).item() == pytest.approx(1.0, abs=1e-15)
    assert dc.cosine_sim([1.0, 0.0], [0.0, 1.0]).item() == 0.0
    assert dc.cosine_sim([1.0, 1.0], [1.0, 0.0]).item() == pytest.approx(0.7071067811865476, abs=1e-15)


def test_cosine_zero_norm_is_an_error():
    with pytest.raises(dc.DegenerateInputError):
        dc.cosine_sim([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(dc.DegenerateInputError):
        dc.cosine_matrix(np.zeros((1, 3)), np.ones((2, 3)))


@given(arrays(np.float64, 4, elements=st.floats(-10, 10)), arrays(np.float64, 4, elements=st.floats(-10, 10)),
       st.floats(1e-3, 1e3))
def test_cosine_scale_invariant(u, v, alpha):
    if np.linalg.norm(u) < 1e-3 or np.linalg.norm(v) < 1e-3:
        return
    a = dc.cosine_sim(u * alpha, v).item()
    b = dc.cosine_sim(u, v).item()
    assert abs(a - b) <= 1e-12
    assert -1.0 - 1e-12 <= b <= 1.0 + 1e-12


# -- solve_spd ------------------------------------------------------------------------


def test_solve_spd_examples():
    B = np.random.default_rng(0).standard_normal((3, 2))
    np.testing.assert_allclose(dc.solve_spd(np.eye(3), B).data, B, atol=1e-15)
    A = np.array([[2.0, 1.0], [1.0, 2.0]])
    np.testing.assert_allclose(dc.solve_spd(A, A).data, np.eye(2), atol=1e-15)


@given(st.integers(1, 8), st.integers(1, 4), st.integers(0, 2**31))
def test_solve_spd_round_trip(k, d, seed):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((k, k))
    A = m @ m.T + k * np.eye(k)
    X = rng.standard_normal((k, d))
    B = A @ X
    sol = dc.solve_spd(A, B).data
    assert np.linalg.norm(A @ sol - B) <= 1e-9 * np.linalg.norm(B)
    assert np.abs(sol - X).max() <= 1e-9 * max(1.0, np.abs(X).max())


def test_solve_spd_singular_has_diagnostic():
    with pytest.raises(dc.NumericalError, match="cond"):
        dc.solve_spd(np.array([[1.0, 1.0], [1.0, 1.0]]), np.ones((2, 1)))


# -- misc ops -----------------------------------------------------------------------


def test_softmax_rows_sum_to_one():
    x = np.random.default_rng(1).standard_normal((5, 7)) * 50
    p = dc.softmax(x, axis=1).data
    assert np.all(np.abs(p.sum(axis=1) - 1.0) <= 1e-12)


def test_stable_forms_stay_finite():
    x = np.array([-800.0, 0.0, 800.0])
    for op in (dc.sigmoid, dc.softplus, dc.tanh, dc.gelu):
        assert np.all(np.isfinite(op(x).data))
    assert dc.softplus(np.array([800.0])).item() == 800.0
    assert dc.logsumexp(np.array([[1000.0, 1000.0]]), axis=1).item() == pytest.approx(1000.0 + math.log(2))


def test_gelu_matches_erf_definition():
    x = np.linspace(-4, 4, 41)
    expected = np.array([0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in x])
    np.testing.assert_allclose(dc.gelu(x).data, expected, atol=1e-15)


def test_layer_norm_output_is_standardized():
    x = np.random.default_rng(2).standard_normal((4, 6)) * 3 + 1
    y = dc.layer_norm(x, np.ones(6), np.zeros(6)).data
    np.testing.assert_allclose(y.mean(axis=1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=1), 1 / (1 + 1e-5 / x.var(axis=1)), rtol=1e-9)


def test_broadcast_gradients_are_reduced():
    b = dc.parameter(np.ones(3))
    x = np.arange(6.0).reshape(2, 3)
    dc.tsum(x * b).backward()
    np.testing.assert_array_equal(b.grad, x.sum(axis=0))


def test_gradient_accumulates_over_reuse():
    x = dc.parameter(np.array([2.0]))
    y = x * x + x * 3.0
    dc.tsum(y).backward()
    assert x.grad[0] == pytest.approx(7.0)


def test_forward_outputs_finite_on_finite_inputs():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 5)) * 10
    for out in (dc.exp(x * 0.1), dc.softmax(x), dc.gelu(x), dc.layer_norm(x, np.ones(5), np.zeros(5)),
                dc.normalize(x), dc.logsumexp(x, axis=1)):
        assert np.all(np.isfinite(out.data))
