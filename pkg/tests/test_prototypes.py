import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.utils.estimator_checks import check_get_params_invariance

from protomlc import diffcore as dc
from protomlc.datamodel import ClassTaxonomy
from protomlc.prototypes import (PrototypeRefiner, PrototypeSet, ema_update, estimate_prototypes, init_prototypes,
                                 prototype_residual, superclass_prototypes)


@pytest.mark.parametrize("mode", ["random", "orthogonal"])
def test_single_prototype_is_unit_norm(mode):
    p = init_prototypes(1, 5, mode, seed=3)
    assert p.matrix.shape == (1, 5)
    assert abs(np.linalg.norm(p.matrix) - 1.0) <= 1e-12


@given(st.integers(1, 10), st.integers(0, 6), st.integers(0, 2**31))
def test_orthogonal_gram_is_identity(k, extra, seed):
    p = init_prototypes(k, k + extra, "orthogonal", seed)
    gram = p.matrix @ p.matrix.T
    assert np.abs(gram - np.eye(k)).max() <= 1e-9
    assert np.abs(np.linalg.norm(p.matrix, axis=1) - 1.0).max() <= 1e-12


def test_init_is_deterministic_and_validated():
    a = init_prototypes(3, 8, "orthogonal", 7)
    b = init_prototypes(3, 8, "orthogonal", 7)
    assert a.matrix.tobytes() == b.matrix.tobytes()
    np.testing.assert_allclose(a.matrix @ a.matrix.T, np.eye(3), atol=1e-9)
    assert not np.array_equal(a.matrix, init_prototypes(3, 8, "orthogonal", 8).matrix)
    with pytest.raises(ValueError):
        init_prototypes(5, 3, "orthogonal", 0)
    with pytest.raises(ValueError):
        init_prototypes(2, 3, "learned", 0)


def test_estimate_examples():
    Z = np.random.default_rng(0).standard_normal((4, 3))
    np.testing.assert_allclose(estimate_prototypes(Z, np.eye(4), ridge=0.0), Z, atol=1e-14)
    L = np.array([[1, 0], [1, 0], [0, 1]])
    Z = np.array([[2.0, 0.0], [0.0, 2.0], [4.0, 4.0]])
    np.testing.assert_allclose(estimate_prototypes(Z, L, ridge=0.0), [[1.0, 1.0], [4.0, 4.0]], atol=1e-14)
    L = np.array([[1, 0], [0, 1], [1, 1]])
    Z = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    np.testing.assert_allclose(estimate_prototypes(Z, L, ridge=0.0), [[1.0, 0.0], [0.0, 1.0]], atol=1e-14)


@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 2**31))
def test_single_label_rows_give_class_means(k, d, seed):
    rng = np.random.default_rng(seed)
    y = np.r_[np.arange(k), rng.integers(0, k, size=3 * k)]
    L = np.eye(k)[y]
    Z = rng.standard_normal((len(y), d))
    means = np.stack([Z[y == c].mean(axis=0) for c in range(k)])
    assert np.abs(estimate_prototypes(Z, L, ridge=0.0) - means).max() <= 1e-12


def test_noiseless_recovery_100_instances():
    rng = np.random.default_rng(11)
    for _ in range(100):
        k, d = rng.integers(2, 7), rng.integers(2, 9)
        n = int(rng.integers(k + 2, 40))
        while True:
            L = (rng.random((n, k)) < 0.4).astype(float)
            if np.linalg.matrix_rank(L.T @ L) == k:
                break
        cp = rng.standard_normal((k, d))
        assert np.abs(estimate_prototypes(L @ cp, L, ridge=0.0) - cp).max() <= 1e-8


def test_singular_without_ridge_advises_ridge():
    L = np.array([[1, 0], [1, 0]])
    with pytest.raises(dc.NumericalError, match="ridge"):
        estimate_prototypes(np.ones((2, 3)), L, ridge=0.0)
    out = estimate_prototypes(np.ones((2, 3)), L, ridge=1e-6)
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out[1], 0.0)


def test_residual_diagnostic():
    L = np.array([[1, 0], [0, 1], [1, 1]])
    cp = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert prototype_residual(L @ cp, L, cp) == 0.0


def test_ema_examples():
    cp = PrototypeSet(np.array([[1.0, 0.0]]))
    assert np.array_equal(ema_update(cp, cp.matrix, 0.5).matrix, cp.matrix)
    star = np.array([[0.0, 1.0]])
    np.testing.assert_array_equal(ema_update(cp, star, 0.0).matrix, star)
    np.testing.assert_allclose(ema_update(cp, star, 0.9).matrix, [[0.9, 0.1]], atol=1e-15)
    with pytest.raises(dc.ShapeError):
        ema_update(cp, np.ones((2, 2)), 0.5)
    with pytest.raises(ValueError):
        ema_update(cp, star, 1.0)


@given(st.floats(0, 0.999999), st.integers(0, 2**31))
def test_ema_stays_between_endpoints(beta, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    out = ema_update(PrototypeSet(a), b, beta).matrix
    assert np.all(out >= np.minimum(a, b)) and np.all(out <= np.maximum(a, b))


def test_superclass_examples():
    tax = ClassTaxonomy(["a", "b"], {0: 0, 1: 0}, ["s"])
    out = superclass_prototypes(np.array([[1.0, 0.0], [0.0, 1.0]]), tax).matrix
    np.testing.assert_allclose(out, [[2 ** -0.5, 2 ** -0.5]], atol=1e-15)
    same = superclass_prototypes(np.array([[3.0, 4.0], [3.0, 4.0]]), tax).matrix
    np.testing.assert_allclose(same, [[0.6, 0.8]], atol=1e-15)
    eye = np.eye(3)
    tax3 = ClassTaxonomy(["a", "b", "c"], {0: 0, 1: 0, 2: 0}, ["all"])
    np.testing.assert_allclose(superclass_prototypes(eye, tax3).matrix, np.full((1, 3), 3 ** -0.5), atol=1e-15)


def test_superclass_without_children_is_an_error():
    with pytest.raises(ValueError):
        superclass_prototypes(np.eye(2), ClassTaxonomy(["a", "b"], {0: 0, 1: 0}, ["s", "empty"]))


def test_prototype_set_validation():
    with pytest.raises(ValueError):
        PrototypeSet(np.array([[0.0, 0.0], [1.0, 0.0]]))
    with pytest.raises(ValueError):
        PrototypeSet(np.eye(2), beta=1.0)
    with pytest.raises(ValueError):
        PrototypeSet(np.eye(2), ridge=-1.0)


def test_refiner_estimator():
    rng = np.random.default_rng(2)
    L = np.eye(3)[rng.integers(0, 3, 30)]
    Z = L @ np.eye(3, 4) + 0.01 * rng.standard_normal((30, 4))
    r = PrototypeRefiner(beta=0.5, ridge=0.0).fit(Z, L)
    assert r.get_params() == {"beta": 0.5, "ridge": 0.0}
    sims = r.transform(Z)
    assert np.array_equal(sims.argmax(axis=1), L.argmax(axis=1))
    before = r.prototypes_.copy()
    r.partial_fit(Z + 1.0, L)
    star = estimate_prototypes(Z + 1.0, L, 0.0)
    np.testing.assert_allclose(r.prototypes_, 0.5 * before + 0.5 * star)
    check_get_params_invariance("PrototypeRefiner", r)
