"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation creates a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to parent gradients.
Nodes receive a strictly increasing ``node_id`` at creation, so creation
order is already a topological order of the tape; :meth:`Tensor.backward`
replays reachable nodes in descending id order, visiting each exactly once.
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

LOG_FLOOR = 1e-12

_ids = itertools.count()
_recording = True


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block (evaluation, weight estimation)."""
    global _recording
    prev, _recording = _recording, False
    try:
        yield
    finally:
        _recording = prev


def is_recording() -> bool:
    return _recording


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


GradFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "name", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: GradFn | None = None

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...], grad_fn: GradFn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.node_id = next(_ids)
        out.name = ""
        needs = _recording and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = parents if needs else ()
        out._grad_fn = grad_fn if needs else None
        return out

    @staticmethod
    def _wrap(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._grad_fn is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- elementwise arithmetic ----------------------------------------------
    def _binary_shape(self, other: "Tensor") -> None:
        try:
            np.broadcast_shapes(self.shape, other.shape)
        except ValueError as exc:
            raise DimensionError(f"cannot broadcast {self.shape} with {other.shape}") from exc

    def __add__(self, other) -> "Tensor":
        other = self._wrap(other)
        self._binary_shape(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._from_op(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = self._wrap(other)
        self._binary_shape(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._from_op(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
        )

    def __rsub__(self, other) -> "Tensor":
        return self._wrap(other) - self

    def __mul__(self, other) -> "Tensor":
        other = self._wrap(other)
        self._binary_shape(other)
        a, b = self.data, other.data
        return Tensor._from_op(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, scalar: float) -> "Tensor":
        if isinstance(scalar, Tensor):
            raise ContractError("division is only defined by a python scalar")
        return self * (1.0 / scalar)

    def __neg__(self) -> "Tensor":
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float) -> "Tensor":
        x = self.data
        return Tensor._from_op(x**exponent, (self,), lambda g: (g * exponent * x ** (exponent - 1),))

    # -- linear algebra -------------------------------------------------------
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    # -- nonlinearities -------------------------------------------------------
    def relu(self) -> "Tensor":
        x = self.data
        mask = x > 0
        return Tensor._from_op(np.where(mask, x, 0.0), (self,), lambda g: (g * mask,))

    def log(self, floor: float = LOG_FLOOR) -> "Tensor":
        """Natural log of ``max(x, floor)``; gradient is zero where the floor is active."""
        x = self.data
        active = x > floor
        clamped = np.where(active, x, floor)
        return Tensor._from_op(np.log(clamped), (self,), lambda g: (np.where(active, g / clamped, 0.0),))

    def exp(self) -> "Tensor":
        y = np.exp(self.data)
        return Tensor._from_op(y, (self,), lambda g: (g * y,))

    def abs(self) -> "Tensor":
        # sign(0) == 0 gives the zero subgradient at ties
        sign = np.sign(self.data)
        return Tensor._from_op(np.abs(self.data), (self,), lambda g: (g * sign,))

    # -- reductions -----------------------------------------------------------
    def sum(self, axis: int | None = None) -> "Tensor":
        shape = self.shape
        if axis is None:
            return Tensor._from_op(
                np.asarray(self.data.sum()), (self,), lambda g: (np.broadcast_to(g, shape).copy(),)
            )
        return Tensor._from_op(
            self.data.sum(axis=axis),
            (self,),
            lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),),
        )

    def mean(self, axis: int | None = None) -> "Tensor":
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis) * (1.0 / n)

    # -- backward -------------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if self.data.size != 1 or self.data.ndim > 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss is not connected to any tensor that requires grad")

        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node.node_id in nodes:
                continue
            nodes[node.node_id] = node
            stack.extend(p for p in node._parents if p.requires_grad)

        grads: dict[int, np.ndarray] = {self.node_id: np.ones_like(self.data)}
        for nid in sorted(nodes, reverse=True):
            node = nodes[nid]
            g = grads.pop(nid, None)
            if g is None:
                continue
            if node._grad_fn is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._grad_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent.node_id)
                grads[parent.node_id] = pg if prev is None else prev + pg


def tensor(data, requires_grad: bool = False, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    x, y = a.data, b.data
    return Tensor._from_op(x @ y, (a, b), lambda g: (g @ y.T, x.T @ g))


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of an ``n x K`` tensor, computed with max subtraction."""
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows expects n x K, got {x.shape}")
    if x.shape[1] < 1:
        raise DimensionError("softmax_rows needs at least one column")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax_rows received non-finite input")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return Tensor._from_op(s, (x,), grad_fn)


def argmax_rows(x: Tensor | np.ndarray) -> np.ndarray:
    """Per-row argmax; ``np.argmax`` already resolves ties to the lowest index."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.ndim != 2:
        raise DimensionError(f"argmax_rows expects n x K, got {data.shape}")
    return np.argmax(data, axis=1)


def relu(x: Tensor) -> Tensor:
    return x.relu()


def log(x: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    return x.log(floor)


def tabs(x: Tensor) -> Tensor:
    return x.abs()
