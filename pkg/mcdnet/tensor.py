"""
Reverse-mode tensor engine.

Every operator stores a closure mapping the output gradient to one gradient
per parent; backward() replays those closures in reverse topological order and
sums contributions for tensors consumed more than once.
"""
from __future__ import annotations

import logging
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import GraphError, NonFiniteError, ShapeError

logger = logging.getLogger("mcdnet.tensor")

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

# grad mode and checked mode are per thread so concurrent graphs never share state
_local = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


def is_checked() -> bool:
    return getattr(_local, "checked", False)


@contextmanager
def no_grad() -> Iterator[None]:
    """Run forward operators without recording a graph."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


@contextmanager
def checked_mode(enabled: bool = True) -> Iterator[None]:
    """Raise NonFiniteError as soon as any operator yields NaN or Inf."""
    prev = is_checked()
    _local.checked = enabled
    try:
        yield
    finally:
        _local.checked = prev


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return arr


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """N-d float array that can take part in a differentiation graph."""

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = ""
        self._retain = False
        self._consumed = False

    # ---- basic properties ----

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None and not self._consumed

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of a non-leaf tensor after backward()."""
        self._retain = True
        return self

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # ---- graph ----

    def _topo(self) -> list:
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self, grad: Optional[np.ndarray] = None, retain_graph: bool = False) -> None:
        """Populate .grad on every leaf that requires it."""
        if self._consumed:
            raise GraphError("graph already consumed; call backward(retain_graph=True) to reuse it")
        if not self.requires_grad:
            raise GraphError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise GraphError(f"backward() needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        topo = self._topo()
        for node in topo:
            if node._consumed:
                raise GraphError("graph already consumed; call backward(retain_graph=True) to reuse it")

        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None or node._retain:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=parent.dtype)
                if pg.shape != parent.shape:
                    raise GraphError(f"{node._op}: gradient shape {pg.shape} != input shape {parent.shape}")
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

        if not retain_graph:
            for node in topo:
                if node._backward is not None:
                    node._backward = None
                    node._parents = ()
                    node._consumed = True

    # ---- arithmetic ----

    def _lift(self, other: ArrayLike) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other: ArrayLike) -> "Tensor":
        other = self._lift(other)
        a, b = self, other

        def backward(g):
            return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                    _unbroadcast(g, b.shape) if b.requires_grad else None)

        return make_op(a.data + b.data, (a, b), backward, "add")

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return make_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return self + (-self._lift(other))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return self._lift(other) + (-self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        other = self._lift(other)
        a, b = self, other

        def backward(g):
            return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                    _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

        return make_op(a.data * b.data, (a, b), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        other = self._lift(other)
        a, b = self, other

        def backward(g):
            return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                    _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None)

        return make_op(a.data / b.data, (a, b), backward, "div")

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return self._lift(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise ShapeError("only scalar exponents are supported")
        x = self

        def backward(g):
            return (g * exponent * np.power(x.data, exponent - 1),)

        return make_op(np.power(x.data, exponent), (x,), backward, "pow")

    # ---- reductions and views ----

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        x = self

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).copy(),)

        return make_op(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        x = self
        return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")

    def __getitem__(self, index) -> "Tensor":
        x = self

        def backward(g):
            full = np.zeros_like(x.data)
            np.add.at(full, index, g)
            return (full,)

        return make_op(np.array(x.data[index], copy=True), (x,), backward, "getitem")

    # ---- elementwise ----

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return make_op(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        x = self
        return make_op(np.log(x.data), (x,), lambda g: (g / x.data,), "log")

    def relu(self) -> "Tensor":
        keep = self.data > 0
        return make_op(np.where(keep, self.data, 0).astype(self.dtype), (self,), lambda g: (g * keep,), "relu")


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, name: str) -> Tensor:
    """Wrap an operator result, recording it in the graph when any parent needs grad."""
    data = np.asarray(data)
    if is_checked() and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{name} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = name
    out._retain = False
    out._consumed = False
    out.requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def tensor(data: ArrayLike, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along an existing axis."""
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) if t.requires_grad else None
                     for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]))

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")
