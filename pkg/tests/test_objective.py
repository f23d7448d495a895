import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dgc import autodiff as ad
from dgc.autodiff import Tape, Tensor
from dgc.objective import (
    AdamState,
    NumericalError,
    adam_step,
    batch_weights,
    weighted_bce_loss,
    weighted_bce_with_logits,
)


def _logit(p):
    return np.log(p) - np.log1p(-p)


def test_weights_hand_example():
    y = np.zeros((2, 14))
    y[0, [1, 4]] = 1
    y[1, 9] = 1
    w_pos, w_neg = batch_weights(y)
    assert w_pos == pytest.approx(28 / 3, abs=1e-12)
    assert w_neg == pytest.approx(1.12, abs=1e-12)


def test_weights_half_ones():
    y = np.array([[1, 0], [0, 1]])
    assert batch_weights(y) == (2.0, 2.0)


def test_weights_degenerate_fallback(caplog):
    assert batch_weights(np.zeros((3, 4))) == (1.0, 1.0)
    assert batch_weights(np.ones((3, 4))) == (1.0, 1.0)
    assert "degenerate" in caplog.text


def test_weights_reject_non_binary():
    with pytest.raises(ValueError):
        batch_weights(np.array([[0, 2]]))


@settings(max_examples=200, deadline=None)
@given(y=hnp.arrays(np.int64, st.tuples(st.integers(1, 16), st.integers(1, 14)), elements=st.integers(0, 1)))
def test_weight_balance_identity(y):
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return
    w_pos, w_neg = batch_weights(y)
    assert abs(w_pos * n_pos - y.size) < 1e-9
    assert abs(w_neg * n_neg - y.size) < 1e-9


def test_worked_loss_example():
    y = np.zeros((1, 14))
    y[0, 3] = 1
    expected = 28 * math.log(2)
    assert abs(float(weighted_bce_loss(Tensor(np.full((1, 14), 0.5)), y).data) - expected) < 1e-9
    assert abs(float(weighted_bce_with_logits(Tensor(np.zeros((1, 14))), y).data) - expected) < 1e-9
    assert round(expected, 4) == 19.4081


def test_perfect_prediction_limit():
    y = np.array([[1, 0, 0], [0, 1, 1]], dtype=float)
    assert float(weighted_bce_loss(Tensor(y.copy()), y).data) < 1e-5


def test_unclamped_zero_prob_is_rejected():
    y = np.array([[1.0, 0.0]])
    with pytest.raises(ad.DomainError):
        weighted_bce_loss(Tensor([[0.0, 0.5]]), y, clamp=False)
    ad.STRICT["ln"] = False
    try:
        with np.errstate(divide="ignore"), pytest.raises(NumericalError):
            weighted_bce_loss(Tensor([[0.0, 0.5]]), y, clamp=False)
    finally:
        ad.STRICT["ln"] = True


def test_loss_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        weighted_bce_with_logits(Tensor(np.zeros((2, 3))), np.zeros((3, 2)))


@settings(max_examples=100, deadline=None)
@given(
    p=hnp.arrays(np.float64, (4, 5), elements=st.floats(1e-6, 1 - 1e-6)),
    y=hnp.arrays(np.int64, (4, 5), elements=st.integers(0, 1)),
)
def test_probability_and_logit_paths_agree(p, y):
    a = float(weighted_bce_loss(Tensor(p), y).data)
    b = float(weighted_bce_with_logits(Tensor(_logit(p)), y).data)
    assert a >= 0 and b >= 0
    assert abs(a - b) <= 1e-6 * max(1.0, abs(a))


@settings(max_examples=50, deadline=None)
@given(
    s=hnp.arrays(np.float64, (3, 4), elements=st.floats(-8, 8)),
    y=hnp.arrays(np.int64, (3, 4), elements=st.integers(0, 1)),
    seed=st.integers(0, 2**31),
)
def test_loss_permutation_invariant(s, y, seed):
    perm = np.random.default_rng(seed).permutation(12)
    s2 = s.ravel()[perm].reshape(3, 4)
    y2 = y.ravel()[perm].reshape(3, 4)
    a = float(weighted_bce_with_logits(Tensor(s), y).data)
    b = float(weighted_bce_with_logits(Tensor(s2), y2).data)
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


def test_logit_gradient_finite_differences():
    rng = np.random.default_rng(0)
    y = (rng.random((3, 6)) < 0.3).astype(float)
    y[0, 0] = 1
    r = ad.grad_check(lambda t: weighted_bce_with_logits(t, y), rng.normal(size=(3, 6)), step=1e-5, tolerance=1e-6)
    assert r.passed and r.max_rel_error < 1e-6


def test_batch_loss_is_sum_of_entries():
    # the batch weights are fixed per batch, so the loss is additive over samples
    rng = np.random.default_rng(1)
    s = rng.normal(size=(5, 4))
    y = (rng.random((5, 4)) < 0.4).astype(float)
    y[0, 0], y[0, 1] = 1, 0
    w_pos, w_neg = batch_weights(y)
    p = 1 / (1 + np.exp(-s))
    rows = [-(w_pos * y[i] * np.log(p[i]) + w_neg * (1 - y[i]) * np.log(1 - p[i])).sum() for i in range(5)]
    assert float(weighted_bce_with_logits(Tensor(s), y).data) == pytest.approx(sum(rows), rel=1e-12)


# ----------------------------------------------------------------------- adam


def test_adam_zero_gradient_fixed_point():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    state = AdamState(lr=0.1)
    for _ in range(5):
        adam_step(params, {"w": np.zeros(3)}, state)
    np.testing.assert_array_equal(params["w"], [1.0, -2.0, 3.0])


def test_adam_first_step_is_lr():
    for g in (0.37, -5.0, 1e-3):
        params = {"w": np.array([0.5])}
        adam_step(params, {"w": np.array([g])}, AdamState(lr=1e-3))
        step = 0.5 - params["w"][0]
        # m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps)
        assert step == pytest.approx(1e-3 * g / (abs(g) + 1e-8), rel=1e-12)


def test_adam_matches_hand_recurrence():
    rng = np.random.default_rng(2)
    grads = rng.normal(size=(6, 3))
    params = {"w": np.zeros(3)}
    state = AdamState(lr=0.01, beta1=0.8, beta2=0.99, eps=1e-6)
    m = v = np.zeros(3)
    w = np.zeros(3)
    for t, g in enumerate(grads, start=1):
        adam_step(params, {"w": g}, state)
        m = 0.8 * m + 0.2 * g
        v = 0.99 * v + 0.01 * g * g
        w = w - 0.01 * (m / (1 - 0.8**t)) / (np.sqrt(v / (1 - 0.99**t)) + 1e-6)
    np.testing.assert_allclose(params["w"], w, rtol=1e-12, atol=1e-15)


def test_adam_missing_gradient_counts_as_zero():
    params = {"a": np.ones(2), "b": np.ones(2)}
    adam_step(params, {"a": np.ones(2)}, AdamState(lr=0.1))
    np.testing.assert_array_equal(params["b"], np.ones(2))


def test_adam_is_deterministic():
    def run():
        params = {"w": np.ones((2, 2), dtype=np.float32)}
        state = AdamState(lr=1e-3)
        for k in range(4):
            adam_step(params, {"w": np.full((2, 2), 0.1 * (k + 1), dtype=np.float32)}, state)
        return params["w"], state

    (a, sa), (b, sb) = run(), run()
    assert np.array_equal(a, b) and np.array_equal(sa.m["w"], sb.m["w"]) and np.array_equal(sa.v["w"], sb.v["w"])
    assert a.dtype == np.float32


def test_taped_loss_gradient_reaches_probs():
    tape = Tape()
    p = tape.param("p", np.full((1, 2), 0.25))
    g = tape.backward(weighted_bce_loss(p, np.array([[1.0, 0.0]])))["p"]
    # w_pos = w_neg = 2: d/dp of -2 ln p = -8; of -2 ln(1-p) = 2/0.75
    np.testing.assert_allclose(g, [[-8.0, 2 / 0.75]], rtol=1e-12)
