"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array.  Every differentiable op records its
parents and a closure mapping the output gradient to parent gradients;
:meth:`Tensor.backward` walks the recorded graph in reverse topological order
and accumulates into the ``grad`` of every leaf that requires it.

There is deliberately no implicit broadcasting: elementwise binary ops demand
identical shapes, and the few places that need to spread a vector over an
image (channel biases, masks) go through explicitly named ops.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = ""

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # -- graph ------------------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every reachable leaf that requires it.

        Leaf gradients accumulate across calls; zero them between optimizer
        steps.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar root, got shape {self.shape}")
        # iterative post-order DFS: a node lands in `order` after all its inputs
        order: list[Tensor] = []
        visited = {id(self)}
        stack = [(self, iter(self._parents))]
        while stack:
            node, it = stack[-1]
            for p in it:
                if p.requires_grad and id(p) not in visited:
                    visited.add(id(p))
                    stack.append((p, iter(p._parents)))
                    break
            else:
                stack.pop()
                order.append(node)

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.data.shape:
                    raise RuntimeError(f"{node.op}: gradient shape {pg.shape} != {p.data.shape}")
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Tensor):
            _same_shape("add", self, other)
            return make(self.data + other.data, (self, other), lambda g: (g, g), "add")
        c = float(other)
        return make(self.data + c, (self,), lambda g: (g,), "add_scalar")

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            _same_shape("sub", self, other)
            return make(self.data - other.data, (self, other), lambda g: (g, -g), "sub")
        c = float(other)
        return make(self.data - c, (self,), lambda g: (g,), "sub_scalar")

    def __rsub__(self, other):
        c = float(other)
        return make(c - self.data, (self,), lambda g: (-g,), "rsub_scalar")

    def __neg__(self):
        return make(-self.data, (self,), lambda g: (-g,), "neg")

    def __mul__(self, other):
        if isinstance(other, Tensor):
            _same_shape("mul", self, other)
            a, b = self.data, other.data
            return make(a * b, (self, other), lambda g: (g * b, g * a), "mul")
        c = float(other)
        return make(self.data * c, (self,), lambda g: (g * c,), "mul_scalar")

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            _same_shape("div", self, other)
            a, b = self.data, other.data
            return make(a / b, (self, other), lambda g: (g / b, -g * a / (b * b)), "div")
        c = float(other)
        return make(self.data / c, (self,), lambda g: (g / c,), "div_scalar")

    def __pow__(self, p):
        p = float(p)
        x = self.data
        if p == 2.0:
            return make(x * x, (self,), lambda g: (2.0 * g * x,), "square")
        return make(x ** p, (self,), lambda g: (p * g * x ** (p - 1.0),), "pow")

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),), "reshape")

    def sum(self, axis=None) -> "Tensor":
        return reduce_sum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return reduce_mean(self, axis)


class Parameter(Tensor):
    """A trainable leaf.  ``trainable=False`` freezes it for optimizers."""

    __slots__ = ("trainable",)

    def __init__(self, data, trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.trainable = trainable


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no implicit broadcasting)")


def make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Create an op output, recording the graph edge when needed."""
    if not np.isfinite(np.sum(data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    out.op = op
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return make(np.sum(x.data, axis=axes), (x,), bw, "sum")


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = 1
    for a in axes:
        n *= x.shape[a]
    shape = x.shape

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axes) / n, shape).copy(),)

    return make(np.mean(x.data, axis=axes), (x,), bw, "mean")


def concat(xs: Iterable[Tensor], axis: int = 1) -> Tensor:
    xs = list(xs)
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs))
        )

    return make(np.concatenate([x.data for x in xs], axis=axis), xs, bw, "concat")


def stack(xs: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    xs = list(xs)

    def bw(g):
        return tuple(g[i] for i in range(len(xs)))

    return make(np.stack([x.data for x in xs]), xs, bw, "stack")


def index_batch(x: Tensor, idx) -> Tensor:
    """Select rows of the leading axis (a gather with scatter-add gradient)."""
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return make(x.data[idx], (x,), bw, "index_batch")
