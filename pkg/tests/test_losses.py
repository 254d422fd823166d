import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twins.errors import DataError, DimensionError
from twins.losses import (
    cross_entropy,
    estimate_weights,
    inconsistency_loss,
    total_loss,
    weighted_cross_entropy,
)
from twins.nn import init_pair
from twins.tensor import Tensor, softmax_rows

from gradcheck import assert_grad_close, numeric_grad


def T(x, grad=False):
    return Tensor(np.asarray(x, dtype=float), requires_grad=grad)


def test_cross_entropy_perfect():
    assert cross_entropy(T(np.eye(3)), [0, 1, 2]).item() == 0.0


def test_cross_entropy_uniform():
    assert cross_entropy(T(np.full((4, 5), 0.2)), [0, 1, 2, 3]).item() == pytest.approx(math.log(5), abs=1e-12)


def test_cross_entropy_hand_value():
    probs = T([[0.5, 0.5], [0.75, 0.25]])
    value = cross_entropy(probs, [0, 1]).item()
    assert value == pytest.approx(-(math.log(0.5) + math.log(0.25)) / 2, abs=1e-12)
    assert value == pytest.approx(1.0397, abs=1e-4)


def test_cross_entropy_label_range():
    with pytest.raises(DataError):
        cross_entropy(T(np.full((2, 3), 1 / 3)), [0, 3])
    with pytest.raises(DataError):
        cross_entropy(T(np.full((2, 3), 1 / 3)), [-1, 0])


def test_cross_entropy_clamps_zero_probability():
    assert cross_entropy(T([[0.0, 1.0]]), [0]).item() == pytest.approx(-math.log(1e-12))


def test_weighted_unit_weights_equal_plain_bitwise():
    rng = np.random.default_rng(0)
    probs = softmax_rows(T(rng.normal(size=(6, 4))))
    labels = rng.integers(0, 4, size=6)
    assert weighted_cross_entropy(probs, labels, np.ones(4)).item() == cross_entropy(probs, labels).item()


def test_weighted_zero_weight_masks():
    rng = np.random.default_rng(1)
    probs = softmax_rows(T(rng.normal(size=(5, 3))))
    assert weighted_cross_entropy(probs, [2, 2, 2, 2, 2], [1.5, 1.5, 0.0]).item() == 0.0


def test_weighted_hand_value():
    value = weighted_cross_entropy(T([[0.5, 0.5]]), [0], [1.4, 0.6]).item()
    assert value == pytest.approx(1.4 * math.log(2), abs=1e-12)
    assert value == pytest.approx(0.9704, abs=1e-4)


def test_weighted_wrong_weight_dim():
    with pytest.raises(DimensionError):
        weighted_cross_entropy(T([[0.5, 0.5]]), [0], [1.0, 1.0, 1.0])


def test_weighted_gradient_ignores_weights_and_reaches_probs():
    rng = np.random.default_rng(2)
    logits0 = rng.normal(size=(4, 3))
    labels = np.array([0, 2, 1, 2])
    w = np.array([1.4, 0.2, 1.4])
    logits = T(logits0, grad=True)
    weighted_cross_entropy(softmax_rows(logits), labels, w).backward()

    def f(z):
        p = np.exp(z - z.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        return float(-np.mean(w[labels] * np.log(p[np.arange(4), labels])))

    assert_grad_close(logits.grad, numeric_grad(f, [logits0], 0))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(2, 6), st.floats(0.0, 10.0), st.integers(0, 2**31))
def test_weighted_is_linear_in_w(n, k, c, seed):
    rng = np.random.default_rng(seed)
    probs = softmax_rows(T(rng.normal(size=(n, k))))
    labels = rng.integers(0, k, size=n)
    w = rng.uniform(0, 2, size=k)
    base = weighted_cross_entropy(probs, labels, w).item()
    assert weighted_cross_entropy(probs, labels, c * w).item() == pytest.approx(c * base, rel=1e-12, abs=1e-12)


def test_inconsistency_identical():
    p = T([[0.2, 0.8], [0.5, 0.5]])
    assert inconsistency_loss(p, p).item() == 0.0


def test_inconsistency_extreme():
    assert inconsistency_loss(T([[1.0, 0.0]]), T([[0.0, 1.0]])).item() == 2.0


def test_inconsistency_hand_value():
    assert inconsistency_loss(T([[0.7, 0.3]]), T([[0.5, 0.5]])).item() == pytest.approx(0.4, abs=1e-12)


def test_inconsistency_shape_mismatch():
    with pytest.raises(DimensionError):
        inconsistency_loss(T(np.full((2, 3), 1 / 3)), T(np.full((3, 3), 1 / 3)))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8), st.integers(1, 6), st.integers(0, 2**31))
def test_inconsistency_range_and_symmetry(n, k, seed):
    rng = np.random.default_rng(seed)
    p1 = softmax_rows(T(rng.normal(scale=5, size=(n, k))))
    p2 = softmax_rows(T(rng.normal(scale=5, size=(n, k))))
    a = inconsistency_loss(p1, p2).item()
    assert 0.0 <= a <= 2.0 + 1e-12
    assert a == inconsistency_loss(p2, p1).item()


def test_inconsistency_gradient_reaches_both_sides():
    rng = np.random.default_rng(3)
    z1, z2 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    a, b = T(z1, True), T(z2, True)
    inconsistency_loss(softmax_rows(a), softmax_rows(b)).backward()

    def sm(z):
        e = np.exp(z - z.max(1, keepdims=True))
        return e / e.sum(1, keepdims=True)

    f = lambda x, y: float(np.abs(sm(x) - sm(y)).sum(1).mean())  # noqa: E731
    assert np.abs(a.grad).sum() > 0 and np.abs(b.grad).sum() > 0
    assert_grad_close(a.grad, numeric_grad(f, [z1, z2], 0))
    assert_grad_close(b.grad, numeric_grad(f, [z1, z2], 1))


def test_total_loss_sum():
    assert total_loss(T(0.0), T(0.0), T(0.0)).item() == 0.0
    assert total_loss(T(1.0), T(0.5), T(0.4)).item() == pytest.approx(1.9, abs=1e-15)


def _uniform_pair(widths):
    pair = init_pair(widths, 0)
    for model in (pair.f1, pair.f2):
        model.weights[-1].data[:] = 0.0
    return pair


def test_estimate_weights_uniform_outputs():
    pair = _uniform_pair([2, 8, 5])
    w = estimate_weights(pair, np.random.default_rng(0).normal(size=(37, 2)))
    np.testing.assert_allclose(w, np.ones(5), atol=1e-12)


def test_estimate_weights_hand_value():
    # single-layer identity models: logits = x, so choose x = log(p)
    pair = init_pair([2, 2], 0)
    pair.f1.weights[0].data = np.eye(2)
    pair.f2.weights[0].data = np.eye(2)
    pair.f2.biases[0].data = np.log([0.6, 0.4]) - np.log([0.8, 0.2])
    w = estimate_weights(pair, np.log([[0.8, 0.2]]))
    np.testing.assert_allclose(w, [1.4, 0.6], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 60), st.integers(2, 7), st.integers(0, 2**31))
def test_estimate_weights_sum_and_order_invariance(n, k, seed):
    rng = np.random.default_rng(seed)
    pair = init_pair([3, 6, k], seed % 1000)
    x = rng.normal(scale=3, size=(n, 3))
    w = estimate_weights(pair, x, batch_size=7)
    assert np.all(w >= 0)
    assert w.sum() == pytest.approx(k, abs=1e-9)
    np.testing.assert_allclose(estimate_weights(pair, x[rng.permutation(n)], batch_size=7), w, atol=1e-12)


def test_estimate_weights_empty():
    with pytest.raises(DataError):
        estimate_weights(init_pair([2, 3], 0), np.zeros((0, 2)))


def test_estimate_weights_records_no_tape():
    pair = init_pair([2, 4, 3], 0)
    estimate_weights(pair, np.ones((5, 2)))
    assert all(p.grad is None for p in pair.parameters())


def test_weight_floor_renormalizes():
    pair = init_pair([2, 2], 0)
    pair.f1.weights[0].data = np.eye(2) * 50
    pair.f2.weights[0].data = np.eye(2) * 50
    x = np.array([[1.0, 0.0]])
    raw = estimate_weights(pair, x)
    assert raw[1] < 1e-15
    w = estimate_weights(pair, x, floor=0.1)
    np.testing.assert_allclose(w, np.maximum(raw, 0.1) * 2 / np.maximum(raw, 0.1).sum(), rtol=1e-14)
    assert w.sum() == pytest.approx(2.0, abs=1e-12)
