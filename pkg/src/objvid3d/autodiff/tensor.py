"""Reverse-mode automatic differentiation over numpy arrays.

Every differentiable operation produces a :class:`Tensor` that remembers its
parents and an adjoint rule. Nodes are numbered in creation order, so the
reverse of that numbering is a valid topological order for the backward pass.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "ShapeError",
    "tensor",
    "as_tensor",
    "no_grad",
    "grad_enabled",
    "default_dtype",
    "get_default_dtype",
    "set_default_dtype",
    "inject_fault",
]

_ids = itertools.count()
_default_dtype = np.dtype(np.float32)
_grad_enabled = True
_faulty_ops: set[str] = set()


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    _default_dtype = np.dtype(dtype)


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used for new tensors (fp64 for gradient checks)."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def inject_fault(*op_names: str):
    """Flip the sign of the adjoint of the named ops. Used to validate grad checks."""
    _faulty_ops.update(op_names)
    try:
        yield
    finally:
        _faulty_ops.difference_update(op_names)


def _to_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    arr = np.asarray(data)
    if arr.dtype.kind == "f":
        return arr
    return arr.astype(_default_dtype)


class Tensor:
    """N-dimensional array with an optional gradient accumulator.

    Leaves are created with ``requires_grad=True``; results of operations on
    such leaves record an adjoint rule. ``backward`` on a scalar result fills
    ``grad`` of every contributing leaf, adding to whatever is already there.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_id")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _to_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._id = next(_ids)

    # -- basic properties -------------------------------------------------
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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every leaf that contributes to this scalar."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            return
        GradTape.from_root(self).run()

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


@dataclass
class GradTape:
    """Operations reachable from ``root``, in execution order."""

    root: Tensor
    ops: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> GradTape:
        seen: dict[int, Tensor] = {}
        stack = [root]
        while stack:
            node = stack.pop()
            if node._id in seen or not node.requires_grad:
                continue
            seen[node._id] = node
            stack.extend(node._parents)
        ops = sorted(seen.values(), key=lambda n: n._id)
        return cls(root, ops)

    def run(self, free: bool = True) -> None:
        grads: dict[int, np.ndarray] = {self.root._id: np.ones_like(self.root.data)}
        for node in reversed(self.ops):
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node._backward is None:
                g = g.astype(node.data.dtype, copy=False)
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    pg = _unbroadcast(pg, parent.shape)
                prev = grads.get(parent._id)
                grads[parent._id] = pg if prev is None else prev + pg
        if free:
            for node in self.ops:
                if node._backward is not None:
                    node._parents = ()
                    node._backward = None


# ---------------------------------------------------------------------------
# helpers


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype.kind != "f" or arr.ndim == 0:
        arr = arr.astype(_default_dtype)
    return Tensor(arr)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    out._id = next(_ids)
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        if op in _faulty_ops:
            inner = backward

            def backward(g, _inner=inner):
                return tuple(None if x is None else -x for x in _inner(g))

        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.data.dtype if isinstance(b, Tensor) else _default_dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    return a, b


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast dims {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return (g * bd if a.requires_grad else None, g * ad if b.requires_grad else None)

    return _node(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = g / bd if a.requires_grad else None
        gb = -g * out / bd if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), backward, "div")


def maximum(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "maximum")
    pick_a = a.data >= b.data
    return _node(np.maximum(a.data, b.data), (a, b), lambda g: (g * pick_a, g * ~pick_a), "maximum")


def minimum(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "minimum")
    pick_a = a.data <= b.data
    return _node(np.minimum(a.data, b.data), (a, b), lambda g: (g * pick_a, g * ~pick_a), "minimum")


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = _pair(a, b)
    out = np.where(cond, a.data, b.data)

    def backward(g):
        g = np.broadcast_to(g, out.shape)
        return np.where(cond, g, 0.0), np.where(cond, 0.0, g)

    return _node(out, (a, b), backward, "where")


# ---------------------------------------------------------------------------
# elementwise unary


def neg(x: Tensor) -> Tensor:
    return _node(-x.data, (x,), lambda g: (-g,), "neg")


def power(x: Tensor, p: float) -> Tensor:
    xd = x.data
    return _node(xd**p, (x,), lambda g: (g * p * xd ** (p - 1),), "power")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _node(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _node(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def tabs(x: Tensor) -> Tensor:
    xd = x.data
    return _node(np.abs(xd), (x,), lambda g: (g * np.sign(xd),), "abs")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def elu(x: Tensor) -> Tensor:
    xd = x.data
    neg_part = np.expm1(np.minimum(xd, 0.0))
    out = np.where(xd > 0, xd, neg_part)
    return _node(out, (x,), lambda g: (np.where(xd > 0, g, g * (neg_part + 1.0)),), "elu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    out[~pos] = e / (1.0 + e)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = np.logaddexp(0.0, xd)
    return _node(out, (x,), lambda g: (g * np.exp(xd - out),), "softplus")


def sin(x: Tensor) -> Tensor:
    xd = x.data
    return _node(np.sin(xd), (x,), lambda g: (g * np.cos(xd),), "sin")


def cos(x: Tensor) -> Tensor:
    xd = x.data
    return _node(np.cos(xd), (x,), lambda g: (-g * np.sin(xd),), "cos")


def atan2(y, x) -> Tensor:
    y, x = _pair(y, x)
    yd, xd = y.data, x.data
    r2 = xd * xd + yd * yd

    def backward(g):
        return g * xd / r2, -g * yd / r2

    return _node(np.arctan2(yd, xd), (y, x), backward, "atan2")


def clip(x: Tensor, lo=None, hi=None) -> Tensor:
    xd = x.data
    out = np.clip(xd, lo, hi)
    mask = np.ones(xd.shape, dtype=bool)
    if lo is not None:
        mask &= xd >= lo
    if hi is not None:
        mask &= xd <= hi
    return _node(out, (x,), lambda g: (g * mask,), "clip")


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dims disagree for {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if ad.ndim == 1 or bd.ndim == 1:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _node(ad @ bd, (a, b), backward, "matmul")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size / max(np.asarray(out).size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return _node(np.asarray(out, dtype=x.dtype), (x,), backward, "mean")


def cumsum(x: Tensor, axis: int) -> Tensor:
    def backward(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _node(np.cumsum(x.data, axis=axis), (x,), backward, "cumsum")


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view dims {src} as {tuple(shape)}") from None
    return _node(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = np.argsort(axes)
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(x: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        raise TypeError("index with numpy arrays, not tensors")
    shape, dtype = x.shape, x.dtype
    advanced = _is_advanced(index)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _node(x.data[index], (x,), backward, "getitem")


def take(x: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Gather along one axis; the adjoint scatters with accumulation."""
    indices = np.asarray(indices, dtype=np.intp)
    shape, dtype = x.shape, x.dtype

    def backward(g):
        if axis == 0 and indices.ndim == 1:
            return (_scatter_rows(indices, g, shape, dtype),)
        full = np.zeros(shape, dtype=dtype)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        return (full,)

    return _node(np.take(x.data, indices, axis=axis), (x,), backward, "take")


def _scatter_rows(indices: np.ndarray, rows: np.ndarray, shape, dtype) -> np.ndarray:
    """``out[indices[i]] += rows[i]`` via bincount, much faster than ``np.add.at``."""
    n = shape[0]
    flat = rows.reshape(len(indices), int(np.prod(shape[1:], dtype=np.int64)))
    out = np.empty((n, flat.shape[1]), dtype=dtype)
    for j in range(flat.shape[1]):
        out[:, j] = np.bincount(indices, weights=flat[:, j], minlength=n)
    return out.reshape(shape)


def scatter_add(values: Tensor, indices: np.ndarray, size: int) -> Tensor:
    """Sum rows of ``values`` into a zero array of ``size`` rows at ``indices``."""
    indices = np.asarray(indices, dtype=np.intp)
    out = _scatter_rows(indices, values.data, (size,) + values.shape[1:], values.dtype)
    return _node(out, (values,), lambda g: (g[indices],), "scatter_add")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: dims {t.shape} incompatible with {ref} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mismatched dims {sorted(shapes)}")

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(np.stack([t.data for t in tensors], axis=axis), tensors, backward, "stack")


def broadcast_to(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _node(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, src),), "broadcast")


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_default_dtype), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_default_dtype), requires_grad=requires_grad)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
