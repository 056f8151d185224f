"""Dense tensors with reverse-mode differentiation.

A ``Tensor`` wraps a numpy array. Operations on tensors that require
gradients record an ``OpRecord`` holding the parents and a closure mapping the
output gradient to one gradient per parent. ``backward`` sweeps the records in
reverse creation order.
"""

from __future__ import annotations

import contextlib
import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

from exceptions import ConfigurationError, DimensionError

logger = logging.getLogger(__name__)

_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_state = {"dtype": np.float32}
_sequence = itertools.count()

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]


def default_dtype():
    return _state["dtype"]


def set_precision(name: str) -> None:
    """Switch the global float width (``f32`` for training, ``f64`` for gradient checks)."""
    if name not in _PRECISIONS:
        raise ConfigurationError(f"unknown precision {name!r}, expected one of {sorted(_PRECISIONS)}")
    _state["dtype"] = _PRECISIONS[name]
    logger.debug("tensor precision set to %s", name)


def get_precision() -> str:
    return "f64" if _state["dtype"] is np.float64 else "f32"


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    previous = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


@dataclass(eq=False)
class OpRecord:
    name: str
    parents: tuple
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    seq: int = field(default_factory=lambda: next(_sequence))


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "op", "name")

    def __init__(
        self,
        values,
        requires_grad: bool = False,
        name: Optional[str] = None,
        op: Optional[OpRecord] = None,
    ):
        arr = np.asarray(values)
        if arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        self.values: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = op
        self.name = name

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        from tensor.ops import matmul

        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def make_result(values: np.ndarray, parents: Sequence[Tensor], backward, name: str) -> Tensor:
    """Wrap ``values`` and record the op when any parent needs a gradient."""
    needs_grad = any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    arr = np.asarray(values)
    if arr.dtype != default_dtype():
        arr = arr.astype(default_dtype())
    out.values = arr
    out.grad = None
    out.requires_grad = needs_grad
    out.name = None
    out.op = OpRecord(name, tuple(parents), backward) if needs_grad else None
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- graph and backward sweep ----------------------------------------------


@dataclass
class Graph:
    """Op-records reachable from a root, in forward creation order."""

    nodes: list
    leaves: list

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        nodes, leaves, seen = [], [], set()
        stack = [root]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node.op is None:
                if node.requires_grad:
                    leaves.append(node)
                continue
            nodes.append(node)
            stack.extend(p for p in node.op.parents if p.requires_grad)
        nodes.sort(key=lambda t: t.op.seq)
        return cls(nodes=nodes, leaves=leaves)

    def backward_order(self) -> list:
        return list(reversed(self.nodes))


def backward(loss: Tensor) -> Graph:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.values.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = Graph.trace(loss)
    if not loss.requires_grad:
        return graph
    grads = {id(loss): np.ones_like(loss.values)}
    if loss.op is None:
        loss.grad = grads[id(loss)] if loss.grad is None else loss.grad + grads[id(loss)]
        return graph
    for node in graph.backward_order():
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node.op.backward(g)
        for parent, pg in zip(node.op.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent.op is None:
                pg = np.asarray(pg, dtype=parent.values.dtype).reshape(parent.shape)
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
    return graph


# -- elementwise and structural primitives ---------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result(a.values + b.values, (a, b), grad_fn, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_result(a.values - b.values, (a, b), grad_fn, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        return unbroadcast(g * b.values, a.shape), unbroadcast(g * a.values, b.shape)

    return make_result(a.values * b.values, (a, b), grad_fn, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.values / b.values

    def grad_fn(g):
        ga = unbroadcast(g / b.values, a.shape)
        gb = unbroadcast(-g * out / b.values, b.shape)
        return ga, gb

    return make_result(out, (a, b), grad_fn, "div")


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.values, (a,), lambda g: (-g,), "neg")


def power(a: ArrayLike, exponent: float) -> Tensor:
    a = as_tensor(a)

    def grad_fn(g):
        return (g * exponent * a.values ** (exponent - 1),)

    return make_result(a.values**exponent, (a,), grad_fn, "power")


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.values)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return make_result(np.log(a.values), (a,), lambda g: (g / a.values,), "log")


def tabs(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return make_result(np.abs(a.values), (a,), lambda g: (g * np.sign(a.values),), "abs")


def reshape(a: ArrayLike, shape) -> Tensor:
    a = as_tensor(a)
    original = a.shape
    return make_result(a.values.reshape(shape), (a,), lambda g: (g.reshape(original),), "reshape")


def transpose(a: ArrayLike, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return make_result(
        np.transpose(a.values, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose"
    )


def _is_advanced(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (np.ndarray, list)) for p in parts)


def getitem(a: ArrayLike, index) -> Tensor:
    a = as_tensor(a)
    advanced = _is_advanced(index)

    def grad_fn(g):
        full = np.zeros_like(a.values)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return make_result(a.values[index], (a,), grad_fn, "getitem")


def tsum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(a.values.sum(axis=axis, keepdims=keepdims), (a,), grad_fn, "sum")


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    values = np.concatenate([t.values for t in tensors], axis=axis)
    return make_result(values, tensors, grad_fn, "concat")


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def grad_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    values = np.stack([t.values for t in tensors], axis=axis)
    return make_result(values, tensors, grad_fn, "stack")
