"""Objective terms for training a classifier pair under partial domain shift.

All losses take probability tensors (softmax outputs), not logits.
"""
from __future__ import annotations

import numpy as np

from .errors import DataError, DimensionError
from .nn import ClassifierPair, forward_probs
from .tensor import LOG_FLOOR, Tensor, no_grad


def _label_mask(probs: Tensor, labels) -> np.ndarray:
    labels = np.asarray(labels)
    if probs.data.ndim != 2:
        raise DimensionError(f"probs must be n x K, got {probs.shape}")
    n, k = probs.shape
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels must lie in [0, {k})")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels.astype(np.int64)] = 1.0
    return onehot


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the true labels."""
    return weighted_cross_entropy(probs, labels, None)


def weighted_cross_entropy(probs: Tensor, labels, w) -> Tensor:
    """Cross-entropy where sample i contributes ``w[labels[i]] * -log p_i``.

    ``w`` is treated as a constant. With ``w=None`` every class weighs 1, and the
    computation path is identical, so unit weights reproduce the plain loss exactly.
    """
    onehot = _label_mask(probs, labels)
    if w is not None:
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (probs.shape[1],):
            raise DimensionError(f"weights must have shape ({probs.shape[1]},), got {w.shape}")
        onehot = onehot * w
    n = probs.shape[0]
    return (probs.log(LOG_FLOOR) * onehot).sum() * (-1.0 / n)


def inconsistency_loss(p1: Tensor, p2: Tensor) -> Tensor:
    """Mean per-sample L1 distance between two probability tables.

    Gradients reach both arguments; neither network is treated as a fixed teacher.
    """
    if p1.shape != p2.shape:
        raise DimensionError(f"shape mismatch: {p1.shape} vs {p2.shape}")
    if p1.data.ndim != 2:
        raise DimensionError(f"expected n x K, got {p1.shape}")
    return (p1 - p2).abs().sum() * (1.0 / p1.shape[0])


def total_loss(weighted_src_1: Tensor, weighted_src_2: Tensor, incons: Tensor) -> Tensor:
    return weighted_src_1 + weighted_src_2 + incons


def estimate_weights(
    pair: ClassifierPair, target_x, batch_size: int = 1024, floor: float = 0.0
) -> np.ndarray:
    """Per-class weights from the averaged predictions of both networks on the target set.

    Returns ``w = K / (2 n) * sum_i (p1(.|x_i) + p2(.|x_i))``, so ``w.sum() == K``.
    A positive ``floor`` lifts every entry to at least ``floor`` and renormalizes.
    """
    x = np.asarray(target_x.data if isinstance(target_x, Tensor) else target_x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DataError("weight estimation needs a nonempty n x d target set")
    k = pair.n_classes
    acc = np.zeros(k)
    with no_grad():
        for start in range(0, x.shape[0], batch_size):
            xb = Tensor(x[start : start + batch_size])
            acc += forward_probs(pair.f1, xb).data.sum(axis=0)
            acc += forward_probs(pair.f2, xb).data.sum(axis=0)
    w = acc * (k / (2.0 * x.shape[0]))
    if floor > 0.0:
        w = np.maximum(w, floor)
        w *= k / w.sum()
    return w
