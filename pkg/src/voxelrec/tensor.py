"""Dense tensors with a reverse-mode differentiation tape.

Every op takes and returns :class:`Tensor`. When any input requires a
gradient (and recording is enabled) the output keeps references to its
parents plus a closure mapping the upstream gradient to one gradient per
parent. :func:`backward` orders the recorded graph into a :class:`Tape`
and walks it once in reverse.

Kernels are dtype-agnostic: training runs in float32, gradient checks
instantiate the same code paths with float64 inputs.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

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
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self) -> Tensor:
        return reduce_sum(self)

    def mean(self) -> Tensor:
        return reduce_mean(self)

    def backward(self):
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def make_node(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    """Wrap ``data`` as an op output, recording ``grad_fn`` when needed.

    ``grad_fn(g)`` must return one array (or None) per parent.
    """
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    return out


# ---------------------------------------------------------------------------
# elementwise


def _check_same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return make_node(a.data + b, (a,), lambda g: (g,))
    _check_same_shape("add", a, b)
    return make_node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return make_node(a.data - b, (a,), lambda g: (g,))
    _check_same_shape("sub", a, b)
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, s) -> Tensor:
    s = float(s)
    return make_node(a.data * s, (a,), lambda g: (g * s,))


def neg(a: Tensor) -> Tensor:
    return make_node(-a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return make_node(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def elementwise(op: str, a: Tensor, b) -> Tensor:
    """Dispatch by name: ``add``, ``sub``, ``mul`` or ``scale``."""
    ops = {"add": add, "sub": sub, "mul": mul, "scale": scale}
    if op not in ops:
        raise ValueError(f"unknown elementwise op {op!r}")
    return ops[op](a, b)


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return make_node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return make_node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing; gradient scatters back into zeros."""
    src_shape, dt = a.shape, a.dtype

    def grad_fn(g):
        full = np.zeros(src_shape, dtype=dt)
        full[index] = g
        return (full,)

    return make_node(a.data[index], (a,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), grad_fn)


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(a: Tensor) -> Tensor:
    shape, dt = a.shape, a.dtype
    return make_node(np.asarray(a.data.sum(), dtype=dt), (a,), lambda g: (np.full(shape, g, dtype=dt),))


def reduce_mean(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ValueError("reduce_mean of an empty tensor")
    n, shape, dt = a.size, a.shape, a.dtype
    return make_node(
        np.asarray(a.data.sum() / n, dtype=dt),
        (a,),
        lambda g: (np.full(shape, g / n, dtype=dt),),
    )


# ---------------------------------------------------------------------------
# gradient routing


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


def mask_gradient(a: Tensor, mask: np.ndarray) -> Tensor:
    """Identity forward; backward multiplies the incoming gradient by ``mask``.

    ``mask`` broadcasts against ``a`` along leading axes (e.g. a per-slot
    vector for an ``N x L`` code).
    """
    m = np.asarray(mask, dtype=a.dtype)
    return make_node(a.data, (a,), lambda g: (g * m,))


# ---------------------------------------------------------------------------
# backward pass


@dataclass
class Tape:
    """Recorded ops reachable from a loss, in topological order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def run(self, loss: Tensor, retain_graph: bool = False):
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=parent.dtype, copy=True)
                else:
                    parent.grad = parent.grad + g
            if not retain_graph:
                node._parents = ()
                node._backward = None


def backward(loss: Tensor, retain_graph: bool = False):
    """Populate ``.grad`` on every tensor reachable from scalar ``loss``."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    Tape.from_loss(loss).run(loss, retain_graph=retain_graph)
