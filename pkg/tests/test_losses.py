import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from protomlc import diffcore as dc
from protomlc.losses import (AsymConfig, FocalConfig, LossContractError, MlcLossConfig, asym_loss, bce_loss,
                             classifier_loss, focal_loss, mlc_loss, mlc_loss_batch, negative_weights, supcon_loss)

ONE = MlcLossConfig(tau=1.0)


def _cp_for_sims(sims):
    """Unit prototypes and a unit z whose cosine similarities are ``sims``."""
    sims = np.asarray(sims, dtype=float)
    k = sims.size
    z = np.zeros(k + 1)
    z[0] = 1.0
    cp = np.zeros((k, k + 1))
    cp[:, 0] = sims
    cp[np.arange(k), np.arange(1, k + 1)] = np.sqrt(1.0 - sims ** 2)
    cp[sims == 1.0, 1:] = 0.0
    return z, cp


def test_mlc_examples():
    z, cp = _cp_for_sims([1.0, 0.0, 0.0])
    assert mlc_loss(z, [1, 0, 0], cp, ONE).item() == pytest.approx(math.log(2) - 1, abs=1e-12)
    z, cp = _cp_for_sims([0.3, 0.3, 0.3])
    assert mlc_loss(z, [1, 1, 0], cp, ONE).item() == pytest.approx(0.0, abs=1e-12)


def test_mlc_value_is_the_written_formula():
    rng = np.random.default_rng(0)
    z, cp = rng.standard_normal(5), rng.standard_normal((4, 5))
    y = np.array([1, 0, 1, 0])
    tau = 0.3
    s = cp @ z / (np.linalg.norm(cp, axis=1) * np.linalg.norm(z)) / tau
    expected = -np.mean([s[k] - np.log(np.exp(s[y == 0]).sum()) for k in np.flatnonzero(y)])
    assert mlc_loss(z, y, cp, MlcLossConfig(tau=tau)).item() == pytest.approx(expected, abs=1e-12)
    all_cls = -np.mean([s[k] - np.log(np.exp(s).sum()) for k in np.flatnonzero(y)])
    got = mlc_loss(z, y, cp, MlcLossConfig(tau=tau, denominator="all_classes")).item()
    assert got == pytest.approx(all_cls, abs=1e-12)


@given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3), st.integers(0, 2**31))
def test_mlc_scale_invariance(alpha, beta, seed):
    rng = np.random.default_rng(seed)
    Z, cp = rng.standard_normal((3, 6)), rng.standard_normal((4, 6))
    y = np.array([[1, 0, 0, 1], [0, 1, 0, 0], [1, 1, 1, 0]])
    a = mlc_loss_batch(Z, y, cp, MlcLossConfig(tau=0.2)).item()
    b = mlc_loss_batch(Z * alpha, y, cp * beta, MlcLossConfig(tau=0.2)).item()
    assert abs(a - b) <= 1e-12


def test_mlc_contract_errors():
    z, cp = _cp_for_sims([0.1, 0.2])
    with pytest.raises(LossContractError):
        mlc_loss(z, [0, 0], cp)
    with pytest.raises(LossContractError):
        mlc_loss(z, [1, 1], cp)
    with pytest.raises(dc.DegenerateInputError):
        mlc_loss(np.zeros(3), [1, 0], cp)


def test_mlc_batch_skips_invalid_rows_when_asked():
    rng = np.random.default_rng(1)
    Z, cp = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    y = np.array([[1, 0, 0], [0, 0, 0], [1, 1, 1]])
    got = mlc_loss_batch(Z, y, cp, skip_invalid=True).item()
    assert got == pytest.approx(mlc_loss_batch(Z[:1], y[:1], cp).item(), abs=1e-15)
    assert mlc_loss_batch(Z[1:], y[1:], cp, skip_invalid=True).item() == 0.0


def _sims_loss(sims, y, tau=0.5):
    """mlc loss as a function of the raw similarity vector (via matching unit vectors)."""
    z, cp = _cp_for_sims(sims)
    return mlc_loss(z, y, cp, MlcLossConfig(tau=tau)).item()


@given(st.lists(st.floats(-0.9, 0.9), min_size=4, max_size=4), st.integers(0, 3), st.floats(1e-4, 0.05))
def test_mlc_monotone_in_similarities(sims, k, step):
    y = np.array([1, 0, 1, 0])
    base = _sims_loss(sims, y)
    moved = list(sims)
    moved[k] += step
    after = _sims_loss(moved, y)
    if y[k]:
        assert after < base
    else:
        assert after > base


def test_negative_sampling():
    y = np.array([[1, 0, 0, 0, 0], [0, 1, 1, 0, 1]])
    np.testing.assert_array_equal(negative_weights(y, None, None), 1 - y)
    w = negative_weights(y, 2, np.random.default_rng(0))
    assert np.count_nonzero(w[0]) == 2 and set(np.unique(w[0])) == {0.0, 2.0}
    np.testing.assert_array_equal(w[1], 1 - y[1])
    assert np.all(w[y == 1] == 0)
    rng = np.random.default_rng(4)
    Z, cp = rng.standard_normal((2, 6)), rng.standard_normal((5, 6))
    full = mlc_loss_batch(Z, y, cp).item()
    capped = mlc_loss_batch(Z, y, cp, MlcLossConfig(neg_sample_cap=4)).item()
    assert full == capped


def test_negative_sampling_is_unbiased_in_the_denominator():
    rng = np.random.default_rng(9)
    y = np.zeros((1, 8))
    y[0, 0] = 1
    s = rng.standard_normal(8)
    exact = np.exp(s[1:]).sum()
    est = np.mean([(negative_weights(y, 3, rng)[0] * np.exp(s)).sum() for _ in range(20000)])
    assert est == pytest.approx(exact, rel=0.02)


# -- supcon ---------------------------------------------------------------------------


def test_supcon_examples():
    rng = np.random.default_rng(0)
    assert supcon_loss(rng.standard_normal((2, 4)), [3, 3], tau=0.7).item() == pytest.approx(0.0, abs=1e-12)
    Z = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    per = supcon_loss(Z, [0, 0, 1], tau=1.0, reduction="none").data
    assert per[0] == pytest.approx(math.log(1 + math.e), abs=1e-12)
    assert per[2] == 0.0


def test_supcon_value_matches_direct_formula():
    rng = np.random.default_rng(3)
    Z = rng.standard_normal((6, 4))
    y = np.array([0, 1, 0, 2, 1, 0])
    tau = 0.4
    U = Z / np.linalg.norm(Z, axis=1, keepdims=True)
    S = U @ U.T / tau
    terms = []
    for i in range(6):
        pos = [p for p in range(6) if p != i and y[p] == y[i]]
        if not pos:
            continue
        denom = np.log(sum(np.exp(S[i, a]) for a in range(6) if a != i))
        terms.append(np.mean([denom - S[i, p] for p in pos]))
    assert supcon_loss(Z, y, tau).item() == pytest.approx(np.mean(terms), abs=1e-12)


@given(st.integers(0, 2**31))
def test_supcon_permutation_and_scale_invariant(seed):
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((7, 3))
    y = rng.integers(0, 3, size=7)
    base = supcon_loss(Z, y).item()
    perm = rng.permutation(7)
    assert supcon_loss(Z[perm], y[perm]).item() == pytest.approx(base, abs=1e-12)
    scale = rng.uniform(0.1, 10, size=(7, 1))
    assert supcon_loss(Z * scale, y).item() == pytest.approx(base, abs=1e-12)


def test_supcon_contract():
    with pytest.raises(LossContractError):
        supcon_loss(np.ones((1, 2)), [0])
    with pytest.raises(LossContractError):
        supcon_loss(np.eye(2), np.array([[1, 1], [0, 1]]))
    one_hot = supcon_loss(np.eye(3), np.eye(2)[[0, 1, 0]]).item()
    assert one_hot == supcon_loss(np.eye(3), [0, 1, 0]).item()


# -- classifier losses -------------------------------------------------------------------


def test_bce_examples():
    assert bce_loss([0.0], [1]).item() == pytest.approx(math.log(2), abs=1e-15)
    assert bce_loss([50.0], [1]).item() <= 1e-20
    assert bce_loss([1.0, -1.0], [1, 0]).item() == pytest.approx(0.31326168751822286, abs=1e-12)
    assert np.isfinite(bce_loss([-1000.0, 1000.0], [1, 0]).item())


def test_focal_examples():
    assert focal_loss([1.0], [1]).item() == pytest.approx(0.0, abs=1e-7)
    assert focal_loss([0.5], [1], FocalConfig(2.0, 0.2)).item() == pytest.approx(0.0346573590, abs=1e-9)
    p = np.array([0.3, 0.8])
    ce = -np.mean(np.log(p))
    assert focal_loss(p, [1, 1], FocalConfig(0.0, 1.0)).item() == pytest.approx(ce, abs=1e-12)


@given(st.lists(st.floats(1e-3, 1 - 1e-3), min_size=1, max_size=6), st.integers(0, 2**31))
def test_focal_half_is_half_bce(probs, seed):
    p = np.array(probs)
    y = np.random.default_rng(seed).integers(0, 2, size=p.size)
    logits = np.log(p) - np.log1p(-p)
    got = focal_loss(p, y, FocalConfig(0.0, 0.5)).item()
    assert abs(got - 0.5 * bce_loss(logits, y).item()) <= 1e-10


def test_asym_examples():
    cfg = AsymConfig(gamma_pos=1.0, gamma_neg=2.0, margin=0.1)
    assert asym_loss([0.05], [0], cfg).item() == 0.0
    assert asym_loss([0.9], [1], cfg).item() == pytest.approx(0.0105360516, abs=1e-9)
    assert asym_loss([0.6], [0], cfg).item() == pytest.approx(0.1732867951, abs=1e-9)


@given(st.lists(st.floats(1e-3, 1 - 1e-3), min_size=1, max_size=6), st.floats(0, 3), st.integers(0, 2**31))
def test_asym_without_margin_is_symmetric_focal(probs, gamma, seed):
    p = np.array(probs)
    y = np.random.default_rng(seed).integers(0, 2, size=p.size)
    a = asym_loss(p, y, AsymConfig(gamma, gamma, 0.0)).item()
    f = 2 * focal_loss(p, y, FocalConfig(gamma, 0.5)).item()
    assert abs(a - f) <= 1e-10


def test_config_validation():
    with pytest.raises(ValueError):
        MlcLossConfig(tau=0)
    with pytest.raises(ValueError):
        MlcLossConfig(neg_sample_cap=0)
    with pytest.raises(ValueError):
        FocalConfig(alpha=0)
    with pytest.raises(ValueError):
        AsymConfig(margin=1.0)
    with pytest.raises(ValueError):
        classifier_loss("hinge", [0.0], [1])


# -- gradients ----------------------------------------------------------------------------


def _grad_cases(rng):
    k, d, n = int(rng.integers(3, 6)), int(rng.integers(3, 7)), int(rng.integers(2, 6))
    y = np.zeros((n, k))
    for i in range(n):
        y[i, rng.choice(k, size=rng.integers(1, k), replace=False)] = 1
    cp = rng.standard_normal((k, d))
    Z = rng.standard_normal((n, d))
    tau = float(rng.uniform(0.2, 1.0))
    ys = np.r_[[0, 0], rng.integers(0, 3, size=n - 2)] if n > 2 else np.array([0, 0])
    logits = rng.uniform(-3, 3, size=(n, k))
    return {
        "mlc_z": (lambda x: mlc_loss_batch(x, y, cp, MlcLossConfig(tau=tau)), Z),
        "mlc_cp": (lambda x: mlc_loss_batch(Z, y, x, MlcLossConfig(tau=tau)), cp),
        "mlc_all": (lambda x: mlc_loss_batch(x, y, cp, MlcLossConfig(tau=tau, denominator="all_classes")), Z),
        "supcon": (lambda x: supcon_loss(x, ys, tau), Z[: len(ys)]),
        "bce": (lambda x: bce_loss(x, y), logits),
        "focal": (lambda x: classifier_loss("focal", x, y, FocalConfig(2.0, 0.2)), logits),
        "asym": (lambda x: classifier_loss("asym", x, y, None, AsymConfig(1.0, 2.0, 0.05)), logits),
    }


@pytest.mark.parametrize("name", ["mlc_z", "mlc_cp", "mlc_all", "supcon", "bce", "focal", "asym"])
def test_losses_pass_grad_check(name):
    rng = np.random.default_rng(["mlc_z", "mlc_cp", "mlc_all", "supcon", "bce", "focal", "asym"].index(name))
    done = 0
    while done < 100:
        f, x = _grad_cases(rng)[name]
        if name == "asym":
            # just above the margin the shifted term's gradient is ~1e-8, below finite-difference resolution
            p = 1 / (1 + np.exp(-x))
            if np.any((p > 0.04) & (p < 0.12)):
                continue
        rep = dc.grad_check(f, x, eps=1e-5, tol=1e-5)
        assert rep.passed, f"{name}: {rep.max_rel_error:.2e}"
        done += 1
