"""Evaluation metrics, divergence proxies and feature export."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import DomainDataset
from .errors import ConfigError, DataError, DimensionError
from .losses import inconsistency_loss
from .nn import ClassifierPair, forward_probs
from .tensor import Tensor, argmax_rows, no_grad

FUSIONS = ("f1", "f2", "mean")


@dataclass
class MetricsRecord:
    accuracy_f1: float
    accuracy_f2: float
    accuracy_fused: float
    weight_tv: float
    absent_mass: float
    disagree_rate: float
    mean_l1: float

    def to_dict(self) -> dict:
        return asdict(self)


def predict_probs(pair: ClassifierPair, x, batch_size: int = 2048) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    p1, p2 = [], []
    with no_grad():
        for start in range(0, x.shape[0], batch_size):
            xb = Tensor(x[start : start + batch_size])
            p1.append(forward_probs(pair.f1, xb).data)
            p2.append(forward_probs(pair.f2, xb).data)
    k = pair.n_classes
    if not p1:
        return np.zeros((0, k)), np.zeros((0, k))
    return np.concatenate(p1), np.concatenate(p2)


def _fuse(p1: np.ndarray, p2: np.ndarray, fusion: str) -> np.ndarray:
    if fusion == "f1":
        return p1
    if fusion == "f2":
        return p2
    if fusion == "mean":
        return 0.5 * (p1 + p2)
    raise ConfigError(f"fusion must be one of {FUSIONS}, got {fusion!r}", "fusion")


def accuracy_from_probs(p1, p2, labels, fusion: str = "mean") -> float:
    pred = argmax_rows(_fuse(p1, p2, fusion))
    return float(np.mean(pred == labels))


def accuracy(pair: ClassifierPair, test: DomainDataset, fusion: str = "mean") -> float:
    """Fraction of rows whose fused prediction matches the label."""
    if test.labels is None:
        raise DataError("accuracy needs a labeled dataset")
    if len(test) == 0:
        raise DataError("accuracy of an empty dataset is undefined")
    p1, p2 = predict_probs(pair, test.features)
    return accuracy_from_probs(p1, p2, test.labels, fusion)


def divergence_from_probs(p1: np.ndarray, p2: np.ndarray) -> tuple[float, float]:
    disagree = float(np.mean(argmax_rows(p1) != argmax_rows(p2)))
    with no_grad():
        l1 = inconsistency_loss(Tensor(p1), Tensor(p2)).item()
    return disagree, l1


def divergence_proxy(pair: ClassifierPair, target_x) -> tuple[float, float]:
    """``(disagree_rate, mean_l1)`` of the pair on unlabeled target rows.

    The two numbers are distinct quantities: argmax agreement says nothing about
    how close the probability vectors are.
    """
    x = target_x.features if isinstance(target_x, DomainDataset) else np.asarray(target_x)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DataError("divergence proxy needs a nonempty target set")
    return divergence_from_probs(*predict_probs(pair, x))


def weight_quality(w, true_dist) -> tuple[float, float]:
    """Total-variation distance of ``w/K`` from ``true_dist`` and the share of
    ``w/K`` placed on classes absent from ``true_dist``."""
    w = np.asarray(w, dtype=np.float64)
    true_dist = np.asarray(true_dist, dtype=np.float64)
    if w.shape != true_dist.shape or w.ndim != 1:
        raise DimensionError(f"shape mismatch: {w.shape} vs {true_dist.shape}")
    if not np.isclose(true_dist.sum(), 1.0, atol=1e-9):
        raise DataError(f"true distribution sums to {true_dist.sum()}, not 1")
    est = w / w.size
    tv = 0.5 * float(np.abs(est - true_dist).sum())
    absent = float(est[true_dist == 0].sum())
    return tv, absent


def evaluate(
    pair: ClassifierPair, target_test: DomainDataset, w, true_dist
) -> MetricsRecord:
    p1, p2 = predict_probs(pair, target_test.features)
    tv, absent = weight_quality(w, true_dist)
    disagree, l1 = divergence_from_probs(p1, p2)
    return MetricsRecord(
        accuracy_f1=accuracy_from_probs(p1, p2, target_test.labels, "f1"),
        accuracy_f2=accuracy_from_probs(p1, p2, target_test.labels, "f2"),
        accuracy_fused=accuracy_from_probs(p1, p2, target_test.labels, "mean"),
        weight_tv=tv,
        absent_mass=absent,
        disagree_rate=disagree,
        mean_l1=l1,
    )


# -- feature export ---------------------------------------------------------------


def export_features(
    pair: ClassifierPair,
    dataset: DomainDataset,
    layer_index: int | None = None,
    target_classes=None,
    network: str = "f1",
    path: str | Path | None = None,
) -> tuple[np.ndarray, list[dict]]:
    """Hidden-layer activations with per-row domain/label/presence tags.

    ``layer_index`` defaults to the last hidden layer. ``present`` is 1 when the
    row's label belongs to ``target_classes`` (always 1 for target rows). When
    ``path`` is given the table is also written as CSV.
    """
    model = {"f1": pair.f1, "f2": pair.f2}.get(network)
    if model is None:
        raise ConfigError(f"network must be 'f1' or 'f2', got {network!r}", "network")
    if layer_index is None:
        layer_index = model.n_layers - 2
    domain = "target" if dataset.name == "target" else "source"
    present_set = set(range(pair.n_classes) if target_classes is None else target_classes)
    feats = []
    with no_grad():
        for start in range(0, len(dataset), 2048):
            xb = Tensor(dataset.features[start : start + 2048])
            feats.append(model.hidden(xb, layer_index).data)
    features = np.concatenate(feats) if feats else np.zeros((0, model.widths[layer_index + 1]))
    meta = []
    for i in range(len(dataset)):
        label = int(dataset.labels[i]) if dataset.labels is not None else -1
        present = 1 if domain == "target" else int(label in present_set)
        meta.append({"domain": domain, "label": label, "present": present})
    if path is not None:
        write_features_csv(path, features, meta)
    return features, meta


def write_features_csv(path, features: np.ndarray, meta: list[dict]) -> None:
    cols = [f"f{j}" for j in range(features.shape[1])]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols + ["domain", "label", "present"])
        for row, m in zip(features, meta):
            writer.writerow([repr(float(v)) for v in row] + [m["domain"], m["label"], m["present"]])


def read_features_csv(path) -> tuple[np.ndarray, list[dict]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n_feat = len(header) - 3
        rows, meta = [], []
        for rec in reader:
            rows.append([float(v) for v in rec[:n_feat]])
            meta.append({"domain": rec[n_feat], "label": int(rec[n_feat + 1]), "present": int(rec[n_feat + 2])})
    return np.array(rows, dtype=np.float64).reshape(len(rows), n_feat), meta
