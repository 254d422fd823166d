"""Three-phase training of a classifier pair, plus the baseline and ablations.

Phase 1 pre-trains both networks on labeled source data. Phase 2 estimates the
target label distribution from the pair's averaged predictions. Phase 3 trains
on the label-weighted source loss of each network plus the inconsistency of
the two networks on target rows. Phases 2 and 3 then alternate.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .data import DomainDataset, DomainPair, paired_batches, source_batches
from .errors import ConfigError, DataError, NumericError
from .losses import (
    cross_entropy,
    estimate_weights,
    inconsistency_loss,
    total_loss,
    weighted_cross_entropy,
)
from .metrics import evaluate
from .nn import SGD, ClassifierPair, Optimizer, OptimizerConfig, forward_probs, init_pair, save_checkpoint, substream
from .tensor import Tensor

logger = logging.getLogger(__name__)


class MethodVariant(str, Enum):
    TWINS = "twins"
    SOURCE_ONLY = "source_only"
    NO_INCONSISTENCY = "no_inconsistency"
    NO_WEIGHTING = "no_weighting"

    @property
    def uses_weights(self) -> bool:
        return self in (MethodVariant.TWINS, MethodVariant.NO_INCONSISTENCY)

    @property
    def uses_inconsistency(self) -> bool:
        return self in (MethodVariant.TWINS, MethodVariant.NO_WEIGHTING)


class NonFiniteLossError(NumericError):
    pass


@dataclass
class TrainSchedule:
    n1_epochs: int = 10
    n3_epochs: int = 20
    phase2_every: int = 1
    batch_per_domain: int = 128
    # larger step than the OptimizerConfig default suits the small blob MLPs
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(lr=5e-3))
    seed: int = 0
    reset_optimizer: bool = True
    weight_floor: float = 0.0

    def validate(self) -> None:
        if self.n1_epochs < 0 or self.n3_epochs < 0:
            raise ConfigError("epoch counts must be nonnegative", "schedule.n1_epochs")
        if self.n1_epochs + self.n3_epochs == 0:
            raise ConfigError("schedule trains for zero epochs", "schedule.n3_epochs")
        if self.phase2_every < 1:
            raise ConfigError("phase2_every must be >= 1", "schedule.phase2_every")
        if self.batch_per_domain < 1:
            raise ConfigError("batch_per_domain must be >= 1", "schedule.batch_per_domain")
        if self.weight_floor < 0:
            raise ConfigError("weight_floor must be >= 0", "schedule.weight_floor")

    @property
    def total_epochs(self) -> int:
        return self.n1_epochs + self.n3_epochs


@dataclass
class EpochRecord:
    epoch: int
    phase: int
    ls1: float
    ls2: float
    lt: float
    acc_f1: float
    acc_f2: float
    acc_fused: float
    weight_tv: float
    absent_mass: float
    disagree_rate: float
    mean_l1: float
    weights: list[float]


CSV_COLUMNS = [
    "epoch", "phase", "ls1", "ls2", "lt", "acc_f1", "acc_f2", "acc_fused",
    "weight_tv", "absent_mass", "disagree_rate", "mean_l1",
]


@dataclass
class TrainLog:
    variant: str
    records: list[EpochRecord] = field(default_factory=list)
    status: str = "ok"
    message: str = ""
    final: dict | None = None

    def phase_records(self, phase: int) -> list[EpochRecord]:
        return [r for r in self.records if r.phase == phase]

    def to_csv(self, path) -> None:
        k = len(self.records[0].weights) if self.records else 0
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS + [f"w{j}" for j in range(k)])
            for r in self.records:
                row = asdict(r)
                writer.writerow([row[c] for c in CSV_COLUMNS] + r.weights)


class _Optimizers:
    """One optimizer per network; both step after each shared backward pass."""

    def __init__(self, pair: ClassifierPair, config: OptimizerConfig, total_steps: int):
        self.opts: list[Optimizer] = [config.build(pair.f1.parameters()), config.build(pair.f2.parameters())]
        self.total_steps = max(total_steps, 1)
        self.global_step = 0

    def step(self) -> None:
        for opt in self.opts:
            if isinstance(opt, SGD):
                opt.set_progress(min(self.global_step / self.total_steps, 1.0))
            opt.step()
        self.global_step += 1

    def reset(self) -> None:
        for opt in self.opts:
            opt.reset()


def _check_finite(loss: Tensor, what: str) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteLossError(f"non-finite {what} loss: {value}")
    return value


def _steps_per_epoch(n: int, b: int) -> int:
    return -(-n // b)


def _dropout_rng(pair: ClassifierPair, schedule: TrainSchedule, epoch: int):
    return substream(schedule.seed, f"dropout.epoch{epoch}") if pair.f1.dropout else None


def phase1_epoch(
    pair: ClassifierPair,
    source_train: DomainDataset,
    schedule: TrainSchedule,
    opts: _Optimizers,
    epoch: int,
) -> tuple[float, float]:
    """One epoch of plain source cross-entropy for both networks."""
    if source_train.labels is None:
        raise DataError("Phase 1 needs a labeled source set")
    drop = _dropout_rng(pair, schedule, epoch)
    l1_sum = l2_sum = 0.0
    steps = 0
    for xs, ys in source_batches(source_train, schedule.batch_per_domain, schedule.seed, epoch):
        x = Tensor(xs)
        ls1 = cross_entropy(forward_probs(pair.f1, x, drop), ys)
        ls2 = cross_entropy(forward_probs(pair.f2, x, drop), ys)
        loss = ls1 + ls2
        _check_finite(loss, "source")
        loss.backward()
        opts.step()
        l1_sum += ls1.item()
        l2_sum += ls2.item()
        steps += 1
    return l1_sum / steps, l2_sum / steps


def phase1_pretrain(
    pair: ClassifierPair,
    source_train: DomainDataset,
    schedule: TrainSchedule,
    opts: _Optimizers | None = None,
    n_epochs: int | None = None,
) -> list[tuple[float, float]]:
    """Run ``n_epochs`` (default ``schedule.n1_epochs``) of source-only training.

    Takes no target argument: pre-training cannot see target data.
    """
    n_epochs = schedule.n1_epochs if n_epochs is None else n_epochs
    if opts is None:
        steps = n_epochs * _steps_per_epoch(len(source_train), schedule.batch_per_domain)
        opts = _Optimizers(pair, schedule.optimizer, steps)
    return [phase1_epoch(pair, source_train, schedule, opts, e) for e in range(n_epochs)]


def phase2_estimate(pair: ClassifierPair, target_train, floor: float = 0.0) -> np.ndarray:
    """Current target label-distribution weights; never touches parameters."""
    x = target_train.features if isinstance(target_train, DomainDataset) else target_train
    return estimate_weights(pair, x, floor=floor)


def phase3_step_loss(
    pair: ClassifierPair,
    xs: np.ndarray,
    ys: np.ndarray,
    xt: np.ndarray,
    w: np.ndarray | None,
    variant: MethodVariant = MethodVariant.TWINS,
    dropout_rng=None,
) -> tuple[Tensor, Tensor, Tensor, Tensor | None]:
    """Build the Phase-3 objective for one mini-batch.

    Returns ``(total, ls1, ls2, lt)``; ``lt`` is None when the variant drops the
    inconsistency term, in which case the target half is not even forwarded.
    """
    src = Tensor(xs)
    weights = w if variant.uses_weights else None
    ls1 = weighted_cross_entropy(forward_probs(pair.f1, src, dropout_rng), ys, weights)
    ls2 = weighted_cross_entropy(forward_probs(pair.f2, src, dropout_rng), ys, weights)
    if not variant.uses_inconsistency:
        return ls1 + ls2, ls1, ls2, None
    tgt = Tensor(xt)
    lt = inconsistency_loss(forward_probs(pair.f1, tgt, dropout_rng), forward_probs(pair.f2, tgt, dropout_rng))
    return total_loss(ls1, ls2, lt), ls1, ls2, lt


def phase3_epoch(
    pair: ClassifierPair,
    source_train: DomainDataset,
    target_train: DomainDataset,
    w: np.ndarray,
    schedule: TrainSchedule,
    opts: _Optimizers,
    epoch: int,
    variant: MethodVariant = MethodVariant.TWINS,
) -> tuple[float, float, float]:
    """One epoch of joint weighted-source + inconsistency training.

    Gradients of the inconsistency term reach both networks in the same backward
    pass; ``w`` is held fixed for the whole epoch.
    """
    drop = _dropout_rng(pair, schedule, epoch)
    sums = np.zeros(3)
    steps = 0
    batches = paired_batches(
        source_train, target_train, schedule.batch_per_domain, schedule.seed, epoch
    )
    for xs, ys, xt in batches:
        loss, ls1, ls2, lt = phase3_step_loss(pair, xs, ys, xt, w, variant, drop)
        _check_finite(loss, "total")
        loss.backward()
        opts.step()
        sums += (ls1.item(), ls2.item(), lt.item() if lt is not None else 0.0)
        steps += 1
    ls1_mean, ls2_mean, lt_mean = sums / steps
    return ls1_mean, ls2_mean, (lt_mean if variant.uses_inconsistency else float("nan"))


def _record(epoch, phase, losses, pair, task: DomainPair, floor) -> EpochRecord:
    # Weight columns are a read-out of the model at the end of the epoch.
    w = estimate_weights(pair, task.target_train.features, floor=floor)
    m = evaluate(pair, task.target_test, w, task.true_target_distribution())
    return EpochRecord(
        epoch=epoch,
        phase=phase,
        ls1=losses[0],
        ls2=losses[1],
        lt=losses[2],
        acc_f1=m.accuracy_f1,
        acc_f2=m.accuracy_f2,
        acc_fused=m.accuracy_fused,
        weight_tv=m.weight_tv,
        absent_mass=m.absent_mass,
        disagree_rate=m.disagree_rate,
        mean_l1=m.mean_l1,
        weights=w.tolist(),
    )


def run(
    variant: MethodVariant | str,
    task: DomainPair,
    schedule: TrainSchedule,
    widths: list[int] | None = None,
    pair: ClassifierPair | None = None,
    checkpoint_dir: str | Path | None = None,
) -> tuple[ClassifierPair, TrainLog]:
    """Train one variant end to end and return the trained pair and its log.

    ``pair`` supplies pretrained parameters (combine with ``n1_epochs=0`` to skip
    pre-training). ``source_only`` spends the whole epoch budget in Phase 1.
    A non-finite loss stops training; the log then has ``status="aborted"``.
    """
    variant = MethodVariant(variant)
    schedule.validate()
    if task.source_train.labels is None:
        raise DataError("source training set must be labeled")
    if pair is None:
        if widths is None:
            raise ConfigError("either widths or a pretrained pair is required", "model.widths")
        pair = init_pair(widths, schedule.seed)
    if pair.f1.in_features != task.dim or pair.n_classes != task.n_classes:
        raise ConfigError(
            f"model maps {pair.f1.in_features}->{pair.n_classes} but task is "
            f"{task.dim}->{task.n_classes}",
            "model.widths",
        )

    b = schedule.batch_per_domain
    n1 = schedule.total_epochs if variant is MethodVariant.SOURCE_ONLY else schedule.n1_epochs
    n3 = 0 if variant is MethodVariant.SOURCE_ONLY else schedule.n3_epochs
    steps_per_epoch = _steps_per_epoch(len(task.source_train), b)
    opts = _Optimizers(pair, schedule.optimizer, (n1 + n3) * steps_per_epoch)
    log = TrainLog(variant=variant.value)
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    floor = schedule.weight_floor
    nan = float("nan")

    try:
        for epoch in range(n1):
            ls1, ls2 = phase1_epoch(pair, task.source_train, schedule, opts, epoch)
            log.records.append(_record(epoch, 1, (ls1, ls2, nan), pair, task, floor))
        if ckpt is not None and n1:
            save_checkpoint(pair, ckpt / "phase1.ckpt")
        if n3 and schedule.reset_optimizer:
            opts.reset()

        w = np.ones(task.n_classes)
        for e in range(n3):
            epoch = n1 + e
            if variant.uses_weights and e % schedule.phase2_every == 0:
                w = phase2_estimate(pair, task.target_train, floor)
            losses = phase3_epoch(
                pair, task.source_train, task.target_train, w, schedule, opts, epoch, variant
            )
            log.records.append(_record(epoch, 3, losses, pair, task, floor))
    except NumericError as exc:
        log.status = "aborted"
        log.message = f"epoch {len(log.records)}: {exc}"
        logger.warning("run aborted: %s", log.message)

    if ckpt is not None:
        save_checkpoint(pair, ckpt / "final.ckpt")
    if log.records:
        last = log.records[-1]
        log.final = {
            "accuracy_f1": last.acc_f1,
            "accuracy_f2": last.acc_f2,
            "accuracy_fused": last.acc_fused,
            "weight_tv": last.weight_tv,
            "absent_mass": last.absent_mass,
            "disagree_rate": last.disagree_rate,
            "mean_l1": last.mean_l1,
        }
    return pair, log
