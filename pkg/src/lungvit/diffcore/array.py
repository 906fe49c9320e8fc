"""Dense array type with a reverse-mode differentiation graph."""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class DiffArray:
    """N-dimensional array that records the operations applied to it.

    ``data`` is a plain numpy array. Leaves created with ``requires_grad=True``
    accumulate gradients in ``grad``; intermediate results carry a backward
    closure and references to their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, DiffArray):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[DiffArray, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- basic properties ------------------------------------------------
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

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"DiffArray(shape={self.shape}, dtype={self.dtype}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def detach(self) -> DiffArray:
        return DiffArray(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None if self.grad is None else np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    # -- operator overloads ----------------------------------------------
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
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method aliases -----------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


ArrayLike = DiffArray | np.ndarray | float | int


def as_array(x, dtype=None) -> DiffArray:
    if isinstance(x, DiffArray):
        return x
    if dtype is None and not isinstance(x, np.ndarray):
        dtype = DEFAULT_DTYPE
    return DiffArray(np.asarray(x), dtype=dtype)


def make_op(value: np.ndarray, parents: Sequence[DiffArray], backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> DiffArray:
    """Wrap ``value`` as the output of an operation on ``parents``.

    ``backward_fn`` maps the output gradient to one gradient (or None) per
    parent. The graph is recorded only when a parent requires gradients.
    """
    out = DiffArray(value, dtype=value.dtype)
    if not _grad_enabled or not any(p.requires_grad for p in parents):
        return out
    parents = tuple(parents)
    out.requires_grad = True
    out._parents = parents

    def _bw(g: np.ndarray) -> None:
        grads = backward_fn(g)
        for p, pg in zip(parents, grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise RuntimeError(f"gradient shape {pg.shape} does not match operand shape {p.shape}")
            if p.grad is None:
                p.grad = np.array(pg, dtype=p.data.dtype, copy=True)
            else:
                p.grad += pg

    out._backward = _bw
    return out


def _topological(root: DiffArray) -> list[DiffArray]:
    order: list[DiffArray] = []
    seen: set[int] = set()
    stack: list[tuple[DiffArray, bool]] = [(root, False)]
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
    return order


def backward(loss: DiffArray) -> None:
    """Populate ``grad`` of every leaf reachable from the scalar ``loss``."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("backward called on a value that is detached from any recorded operation")
    order = _topological(loss)
    for node in order:
        if not node.is_leaf:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # intermediate buffers are not needed past this point
            node.grad = None


# ---------------------------------------------------------------------------
# helpers


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b) -> tuple[DiffArray, DiffArray]:
    if isinstance(a, DiffArray) and not isinstance(b, DiffArray):
        b = DiffArray(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, DiffArray) and not isinstance(a, DiffArray):
        a = DiffArray(np.asarray(a, dtype=b.dtype))
    return as_array(a), as_array(b)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> DiffArray:
    a, b = _pair(a, b)
    return make_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> DiffArray:
    a, b = _pair(a, b)
    return make_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> DiffArray:
    a, b = _pair(a, b)
    return make_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> DiffArray:
    a, b = _pair(a, b)
    out = a.data / b.data
    return make_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a: DiffArray) -> DiffArray:
    return make_op(-a.data, (a,), lambda g: (-g,))


def power(a: DiffArray, exponent: float) -> DiffArray:
    e = float(exponent)
    return make_op(a.data**e, (a,), lambda g: (g * e * a.data ** (e - 1.0),))


def exp(a: DiffArray) -> DiffArray:
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,))


def log(a: DiffArray) -> DiffArray:
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: DiffArray) -> DiffArray:
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: DiffArray) -> DiffArray:
    out = np.tanh(a.data)
    return make_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def absolute(a: DiffArray) -> DiffArray:
    return make_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def square(a: DiffArray) -> DiffArray:
    return make_op(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(a: DiffArray, axis=None, keepdims: bool = False) -> DiffArray:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return make_op(np.asarray(out, dtype=a.dtype), (a,), bw)


def mean(a: DiffArray, axis=None, keepdims: bool = False) -> DiffArray:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)
    scale = a.dtype.type(1.0 / count)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g * scale, a.shape),)

    return make_op(np.asarray(out, dtype=a.dtype), (a,), bw)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: DiffArray, shape: Sequence[int]) -> DiffArray:
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: DiffArray, axes: Sequence[int] | None = None) -> DiffArray:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_op(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def moveaxis(a: DiffArray, source: int, destination: int) -> DiffArray:
    order = list(range(a.ndim))
    src = source % a.ndim
    order.pop(src)
    order.insert(destination % a.ndim, src)
    return transpose(a, order)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def getitem(a: DiffArray, index) -> DiffArray:
    out = a.data[index]
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_op(np.array(out, dtype=a.dtype), (a,), bw)


def concat(arrays: Sequence[DiffArray], axis: int = 0) -> DiffArray:
    arrays = [as_array(x) for x in arrays]
    out = np.concatenate([x.data for x in arrays], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return make_op(out, arrays, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(arrays: Sequence[DiffArray], axis: int = 0) -> DiffArray:
    expanded = [reshape(x, x.shape[:axis % (x.ndim + 1)] + (1,) + x.shape[axis % (x.ndim + 1):]) for x in arrays]
    return concat(expanded, axis=axis)


def roll(a: DiffArray, shift: Sequence[int], axis: Sequence[int]) -> DiffArray:
    shift = tuple(shift)
    axis = tuple(axis)
    back = tuple(-s for s in shift)
    return make_op(np.roll(a.data, shift, axis), (a,), lambda g: (np.roll(g, back, axis),))


def matmul(a, b) -> DiffArray:
    a, b = _pair(a, b)
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_op(out, (a, b), bw)


def parameters_of(items: Iterable[DiffArray]) -> list[DiffArray]:
    return [p for p in items if p.requires_grad]
