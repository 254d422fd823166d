"""Domain datasets, synthetic partial-shift tasks, IDX ingestion and batching."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .nn import substream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class DomainDataset:
    features: np.ndarray
    labels: np.ndarray | None
    class_universe: int
    split: str = "train"
    name: str = ""

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 2:
            raise DataError(f"features must be n x d, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise DataError("features contain non-finite values")
        x.setflags(write=False)
        object.__setattr__(self, "features", x)
        if self.labels is not None:
            y = np.asarray(self.labels, dtype=np.int64)
            if y.shape != (x.shape[0],):
                raise DataError(f"{y.shape[0]} labels for {x.shape[0]} rows")
            if y.size and (y.min() < 0 or y.max() >= self.class_universe):
                raise DataError(f"labels must lie in [0, {self.class_universe})")
            y.setflags(write=False)
            object.__setattr__(self, "labels", y)
        if self.split not in ("train", "test"):
            raise DataError(f"split must be 'train' or 'test', got {self.split!r}")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def is_labeled(self) -> bool:
        return self.labels is not None

    def label_distribution(self) -> np.ndarray:
        if self.labels is None:
            raise DataError("dataset is unlabeled")
        counts = np.bincount(self.labels, minlength=self.class_universe).astype(np.float64)
        return counts / counts.sum()

    def unlabeled(self) -> "DomainDataset":
        return DomainDataset(self.features, None, self.class_universe, self.split, self.name)

    def subset(self, keep_classes) -> "DomainDataset":
        if self.labels is None:
            raise DataError("cannot filter an unlabeled dataset by class")
        mask = np.isin(self.labels, sorted(keep_classes))
        return DomainDataset(
            self.features[mask], self.labels[mask], self.class_universe, self.split, self.name
        )


@dataclass
class PdaTaskSpec:
    """Synthetic partial-domain-adaptation task.

    Source classes are isotropic Gaussian blobs whose centers sit on a circle in
    the first two coordinates. The target keeps classes ``0..n_target_classes-1``
    and maps their features through a rotation about the origin, a translation,
    and extra isotropic noise.
    """

    n_classes: int = 10
    n_target_classes: int = 5
    dim: int = 2
    radius: float = 12.0
    cluster_std: float = 1.2
    layout: str = "interleaved"
    rotation_deg: float = 11.0
    translation: list[float] = field(default_factory=lambda: [1.0, 0.0])
    noise: float = 0.3
    n_train_per_class: int = 200
    n_test_per_class: int = 100
    seed: int = 0

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ConfigError("need at least 2 source classes", "task.n_classes")
        if self.n_target_classes < 1:
            raise ConfigError("need at least 1 target class", "task.n_target_classes")
        if self.n_target_classes > self.n_classes:
            raise ConfigError(
                f"target classes ({self.n_target_classes}) exceed source classes ({self.n_classes})",
                "task.n_target_classes",
            )
        if self.dim < 2:
            raise ConfigError("dim must be at least 2", "task.dim")
        if self.n_train_per_class < 2 or self.n_test_per_class < 2:
            raise ConfigError("per-class counts must be at least 2", "task.n_train_per_class")
        if len(self.translation) != self.dim:
            raise ConfigError(f"translation must have {self.dim} entries", "task.translation")
        if self.layout not in ("interleaved", "sequential"):
            raise ConfigError(f"unknown layout {self.layout!r}", "task.layout")
        if self.cluster_std < 0 or self.noise < 0:
            raise ConfigError("spreads must be nonnegative", "task.noise")

    @property
    def target_classes(self) -> list[int]:
        return list(range(self.n_target_classes))


def class_centers(spec: PdaTaskSpec) -> np.ndarray:
    """Blob centers, one per class, on a circle of ``spec.radius``.

    ``sequential`` places class k at slot k. ``interleaved`` fills the even slots
    first and the odd slots second, so the low-index classes that a partial target
    keeps alternate around the circle with the ones it drops.
    """
    k = spec.n_classes
    if spec.layout == "sequential":
        slots = np.arange(k)
    else:
        half = (k + 1) // 2
        slots = np.array([2 * c if c < half else 2 * (c - half) + 1 for c in range(k)])
    angles = 2.0 * np.pi * slots / k
    centers = np.zeros((k, spec.dim))
    centers[:, 0] = spec.radius * np.cos(angles)
    centers[:, 1] = spec.radius * np.sin(angles)
    return centers


def apply_shift(x: np.ndarray, spec: PdaTaskSpec, rng: np.random.Generator) -> np.ndarray:
    theta = np.deg2rad(spec.rotation_deg)
    out = x.copy()
    c, s = np.cos(theta), np.sin(theta)
    out[:, 0] = c * x[:, 0] - s * x[:, 1]
    out[:, 1] = s * x[:, 0] + c * x[:, 1]
    out += np.asarray(spec.translation, dtype=np.float64)
    if spec.noise:
        out += rng.normal(0.0, spec.noise, size=out.shape)
    return out


def _sample(centers, classes, per_class, std, rng) -> tuple[np.ndarray, np.ndarray]:
    labels = np.repeat(np.asarray(classes, dtype=np.int64), per_class)
    x = centers[labels] + rng.normal(0.0, std, size=(labels.size, centers.shape[1]))
    return x, labels


def gen_blobs(spec: PdaTaskSpec):
    """Build ``((source_train, source_test), (target_train, target_test))``.

    Source and target draw from separate named streams of ``spec.seed``; the
    target stream does not depend on ``n_target_classes`` for the classes it keeps.
    """
    spec.validate()
    centers = class_centers(spec)
    src_rng = substream(spec.seed, "data.source")
    domains = []
    for split, per_class in (("train", spec.n_train_per_class), ("test", spec.n_test_per_class)):
        x, y = _sample(centers, range(spec.n_classes), per_class, spec.cluster_std, src_rng)
        domains.append(DomainDataset(x, y, spec.n_classes, split, "source"))
    source = tuple(domains)

    domains = []
    for split, per_class in (("train", spec.n_train_per_class), ("test", spec.n_test_per_class)):
        xs, ys = [], []
        for c in range(spec.n_target_classes):
            rng = substream(spec.seed, f"data.target.{split}.{c}")
            x, y = _sample(centers, [c], per_class, spec.cluster_std, rng)
            xs.append(apply_shift(x, spec, rng))
            ys.append(y)
        domains.append(
            DomainDataset(np.concatenate(xs), np.concatenate(ys), spec.n_classes, split, "target")
        )
    return source, tuple(domains)


# -- IDX ------------------------------------------------------------------------


def _read_idx(path: Path, magic: int) -> tuple[tuple[int, ...], bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    body = raw[header:]
    if len(body) < int(np.prod(dims)):
        raise FormatError(f"{path}: truncated payload ({len(body)} of {int(np.prod(dims))} bytes)")
    return dims, body[: int(np.prod(dims))]


def load_idx(
    images_path,
    labels_path,
    keep_classes=None,
    class_universe: int | None = None,
    split: str = "train",
    size: tuple[int, int] | None = None,
) -> DomainDataset:
    """Read an IDX image/label file pair into a flattened dataset scaled to [0, 1].

    Original label values are kept even when ``keep_classes`` filters rows.
    ``size=(h, w)`` resamples every image by nearest neighbour, so two domains
    with different native resolutions can feed the same network.
    """
    dims, pixels = _read_idx(Path(images_path), IDX_IMAGES_MAGIC)
    (n_labels,), raw_labels = _read_idx(Path(labels_path), IDX_LABELS_MAGIC)
    n, h, w = dims
    if n != n_labels:
        raise DataError(f"{n} images but {n_labels} labels")
    img = np.frombuffer(pixels, dtype=np.uint8).reshape(n, h, w)
    if size is not None and tuple(size) != (h, w):
        rows = (np.arange(size[0]) + 0.5) * h / size[0]
        cols = (np.arange(size[1]) + 0.5) * w / size[1]
        img = img[:, rows.astype(int)][:, :, cols.astype(int)]
        h, w = size
    x = img.reshape(n, h * w).astype(np.float64) / 255.0
    y = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    if keep_classes is not None:
        mask = np.isin(y, sorted(keep_classes))
        x, y = x[mask], y[mask]
    universe = class_universe if class_universe is not None else int(y.max()) + 1 if y.size else 1
    return DomainDataset(x, y, universe, split, Path(images_path).stem)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (n x h x w) and labels in IDX format. Used for fixtures."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())


# -- batching ---------------------------------------------------------------------


def paired_batches(
    source: DomainDataset,
    target: DomainDataset,
    batch_per_domain: int,
    seed: int,
    epoch: int,
) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(xs, ys, xt)`` mini-batches for one epoch.

    The epoch length is ``ceil(len(source) / batch_per_domain)``. Every source row
    appears once per epoch; a short final batch is topped up from the head of the
    same permutation so that every batch has exactly ``batch_per_domain`` rows per
    domain. The target side cycles through fresh permutations as often as needed.
    """
    if len(source) == 0 or len(target) == 0:
        raise DataError("both domains must be nonempty")
    if source.labels is None:
        raise DataError("source domain must be labeled")
    b = int(batch_per_domain)
    if b < 1 or b > len(source) or b > len(target):
        raise ConfigError(
            f"batch_per_domain={b} must be in [1, min domain size {min(len(source), len(target))}]",
            "schedule.batch_per_domain",
        )
    rng = substream(seed, f"shuffle.epoch{epoch}")
    src_perm = rng.permutation(len(source))
    n_steps = -(-len(source) // b)
    pad = n_steps * b - len(source)
    if pad:
        src_perm = np.concatenate([src_perm, src_perm[:pad]])

    tgt_perm = rng.permutation(len(target))
    cursor = 0
    for step in range(n_steps):
        si = src_perm[step * b : (step + 1) * b]
        if cursor + b > len(tgt_perm):
            tgt_perm = np.concatenate([tgt_perm[cursor:], rng.permutation(len(target))])
            cursor = 0
        ti = tgt_perm[cursor : cursor + b]
        cursor += b
        yield source.features[si], source.labels[si], target.features[ti]


def source_batches(
    source: DomainDataset, batch_size: int, seed: int, epoch: int
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Labeled source-only mini-batches with the same epoch convention as
    :func:`paired_batches`."""
    if len(source) == 0:
        raise DataError("source domain is empty")
    if source.labels is None:
        raise DataError("source domain must be labeled")
    b = int(batch_size)
    if b < 1 or b > len(source):
        raise ConfigError(
            f"batch_per_domain={b} must be in [1, {len(source)}]", "schedule.batch_per_domain"
        )
    perm = substream(seed, f"shuffle.epoch{epoch}").permutation(len(source))
    n_steps = -(-len(source) // b)
    pad = n_steps * b - len(source)
    if pad:
        perm = np.concatenate([perm, perm[:pad]])
    for step in range(n_steps):
        idx = perm[step * b : (step + 1) * b]
        yield source.features[idx], source.labels[idx]


@dataclass(frozen=True)
class DomainPair:
    """Train/test splits of a labeled source and a (label-held-out) target domain.

    Target labels are stored for evaluation only; training code reads
    ``target_train.features`` exclusively.
    """

    source_train: DomainDataset
    source_test: DomainDataset
    target_train: DomainDataset
    target_test: DomainDataset

    @property
    def n_classes(self) -> int:
        return self.source_train.class_universe

    @property
    def dim(self) -> int:
        return self.source_train.dim

    def true_target_distribution(self) -> np.ndarray:
        return self.target_train.label_distribution()

    def target_classes(self) -> list[int]:
        return sorted(set(self.target_train.labels.tolist()))


def make_blob_task(spec: PdaTaskSpec) -> DomainPair:
    (s_tr, s_te), (t_tr, t_te) = gen_blobs(spec)
    return DomainPair(s_tr, s_te, t_tr, t_te)
