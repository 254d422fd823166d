"""MLP classifiers, the two-network container, optimizers and checkpoints."""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, FormatError
from .tensor import Tensor, matmul, softmax_rows

CHECKPOINT_HEADER = "twins-checkpoint v1"


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for the named purpose ("init", "shuffle", "data", ...).

    Streams are keyed on the name rather than on draw order, so adding a consumer
    never perturbs another one.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


class MlpClassifier:
    """Affine + relu stack ending in an affine layer producing logits."""

    def __init__(
        self, widths: Sequence[int], rng: np.random.Generator | None = None, dropout: float = 0.0
    ):
        widths = list(widths)
        if not 0.0 <= dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {dropout}", "dropout")
        self.dropout = dropout
        if len(widths) < 2:
            raise ConfigError("need at least input and output width", "widths")
        for w in widths:
            if int(w) != w or w <= 0:
                raise ConfigError(f"widths must be positive integers, got {widths}", "widths")
        self.widths = [int(w) for w in widths]
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        rng = rng if rng is not None else np.random.default_rng(0)
        for i, (fan_in, fan_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            bound = math.sqrt(6.0 / fan_in)  # He-uniform
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.weights.append(Tensor(w, requires_grad=True, name=f"layer{i}.weight"))
            self.biases.append(Tensor(np.zeros(fan_out), requires_grad=True, name=f"layer{i}.bias"))

    @property
    def in_features(self) -> int:
        return self.widths[0]

    @property
    def n_classes(self) -> int:
        return self.widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(p.name, p) for p in self.parameters()]

    def _check_input(self, x: Tensor) -> None:
        if x.data.ndim != 2 or x.shape[1] != self.in_features:
            raise DimensionError(f"expected n x {self.in_features} input, got {x.shape}")

    def hidden(self, x: Tensor, layer_index: int) -> Tensor:
        """Post-relu activations after hidden layer ``layer_index`` (0-based)."""
        if not 0 <= layer_index < self.n_layers - 1:
            raise ConfigError(
                f"layer_index must be in [0, {self.n_layers - 2}], got {layer_index}", "layer_index"
            )
        self._check_input(x)
        h = x
        for w, b in zip(self.weights[: layer_index + 1], self.biases[: layer_index + 1]):
            h = (matmul(h, w) + b).relu()
        return h

    def logits(self, x: Tensor, dropout_rng: np.random.Generator | None = None) -> Tensor:
        """Raw class scores. Passing ``dropout_rng`` enables training-mode dropout
        in front of the final layer; evaluation callers leave it unset."""
        self._check_input(x)
        h = x
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if i == last and self.dropout and dropout_rng is not None:
                keep = dropout_rng.random(h.shape) >= self.dropout
                h = h * (keep / (1.0 - self.dropout))
            h = matmul(h, w) + b
            if i < last:
                h = h.relu()
        return h

    def __call__(self, x: Tensor) -> Tensor:
        return forward_probs(self, x)


def forward_probs(
    model: MlpClassifier, x: Tensor | np.ndarray, dropout_rng: np.random.Generator | None = None
) -> Tensor:
    """Softmax class probabilities ``p(y|x)`` for each row of ``x``."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    return softmax_rows(model.logits(x, dropout_rng))


@dataclass
class ClassifierPair:
    f1: MlpClassifier
    f2: MlpClassifier

    def __post_init__(self):
        if self.f1.widths != self.f2.widths:
            raise ConfigError("both networks must share one architecture", "widths")
        ids1 = {id(p.data) for p in self.f1.parameters()}
        if any(id(p.data) in ids1 for p in self.f2.parameters()):
            raise ContractError("networks of a pair must not share parameter storage")

    @property
    def n_classes(self) -> int:
        return self.f1.n_classes

    def parameters(self) -> list[Tensor]:
        return self.f1.parameters() + self.f2.parameters()

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"f1.{n}", p) for n, p in self.f1.named_parameters()] + [
            (f"f2.{n}", p) for n, p in self.f2.named_parameters()
        ]

    def state_bytes(self) -> bytes:
        return b"".join(p.data.tobytes() for p in self.parameters())

    def copy(self) -> "ClassifierPair":
        pair = init_pair(self.f1.widths, 0, self.f1.dropout)
        for (_, dst), (_, src) in zip(pair.named_parameters(), self.named_parameters()):
            dst.data = src.data.copy()
        return pair


def init_pair(widths: Sequence[int], seed: int, dropout: float = 0.0) -> ClassifierPair:
    """Two identically shaped MLPs drawn from distinct sub-seeds of ``seed``."""
    return ClassifierPair(
        MlpClassifier(widths, substream(seed, "init.f1"), dropout),
        MlpClassifier(widths, substream(seed, "init.f2"), dropout),
    )


# -- optimizers ----------------------------------------------------------------


class Optimizer:
    def __init__(self, params: Iterable[Tensor]):
        self.params = list(params)
        self.t = 0

    def _grads(self) -> list[np.ndarray]:
        grads = []
        for p in self.params:
            if p.grad is None:
                raise ContractError(f"parameter {p.name or p.node_id} has no gradient")
            grads.append(p.grad)
        return grads

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def reset(self) -> None:
        self.t = 0

    def step(self) -> None:
        raise NotImplementedError


class Adam(Optimizer):
    """Adam with L2 weight decay folded into the gradient (coupled, as in torch.optim.Adam)."""

    def __init__(self, params, lr=2e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=5e-4):
        super().__init__(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.reset()

    def reset(self) -> None:
        super().reset()
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        grads = self._grads()
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        self.zero_grad()


class SGD(Optimizer):
    """Momentum SGD with the annealed rate ``lr0 / (1 + alpha * p) ** gamma``."""

    def __init__(self, params, lr0=1e-3, alpha=1e-3, gamma=0.75, momentum=0.9, weight_decay=0.0):
        super().__init__(params)
        self.lr0 = lr0
        self.alpha = alpha
        self.gamma = gamma
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.progress = 0.0
        self.reset()

    def reset(self) -> None:
        super().reset()
        self.buf = [np.zeros_like(p.data) for p in self.params]

    @property
    def lr(self) -> float:
        return self.lr0 / (1.0 + self.alpha * self.progress) ** self.gamma

    def set_progress(self, p: float) -> None:
        if not 0.0 <= p <= 1.0:
            raise ContractError(f"progress must lie in [0, 1], got {p}")
        self.progress = float(p)

    def step(self) -> None:
        grads = self._grads()
        self.t += 1
        lr = self.lr
        for p, g, b in zip(self.params, grads, self.buf):
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            b *= self.momentum
            b += g
            p.data = p.data - lr * b
        self.zero_grad()


@dataclass
class OptimizerConfig:
    name: str = "adam"
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    alpha: float = 1e-3
    gamma: float = 0.75
    momentum: float = 0.9

    def build(self, params: Iterable[Tensor]) -> Optimizer:
        if self.name == "adam":
            return Adam(params, self.lr, (self.beta1, self.beta2), self.eps, self.weight_decay)
        if self.name == "sgd":
            return SGD(params, self.lr, self.alpha, self.gamma, self.momentum, self.weight_decay)
        raise ConfigError(f"unknown optimizer {self.name!r}", "schedule.optimizer.name")


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(pair: ClassifierPair, path: str | Path) -> None:
    """Text checkpoint: header line, widths line, then ``name<TAB>shape<TAB>values``."""
    lines = [CHECKPOINT_HEADER, "widths\t" + ",".join(map(str, pair.f1.widths))]
    for name, p in pair.named_parameters():
        shape = "x".join(map(str, p.shape))
        values = " ".join(repr(float(v)) for v in p.data.ravel())
        lines.append(f"{name}\t{shape}\t{values}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path: str | Path) -> ClassifierPair:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise FormatError(f"{path}: missing header {CHECKPOINT_HEADER!r}")
    try:
        tag, widths = lines[1].split("\t")
        if tag != "widths":
            raise ValueError
        pair = init_pair([int(w) for w in widths.split(",")], 0)
    except (IndexError, ValueError) as exc:
        raise FormatError(f"{path}: bad widths line") from exc
    params = dict(pair.named_parameters())
    seen = set()
    for line in lines[2:]:
        try:
            name, shape, values = line.split("\t")
            dims = tuple(int(d) for d in shape.split("x"))
            arr = np.array([float(v) for v in values.split()], dtype=np.float64).reshape(dims)
        except ValueError as exc:
            raise FormatError(f"{path}: malformed parameter line") from exc
        if name not in params or params[name].shape != arr.shape:
            raise FormatError(f"{path}: unexpected parameter {name} {arr.shape}")
        params[name].data = arr
        seen.add(name)
    if seen != set(params):
        raise FormatError(f"{path}: missing parameters {sorted(set(params) - seen)}")
    return pair
