"""Dense float64 tensors with a reverse-mode tape.

Operations are recorded only while a :class:`Tape` is active and at least one
input requires a gradient. Outside a tape everything runs as plain numpy, which
is what inference uses.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

_local = threading.local()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class unchecked:
    """Skip the non-finite output check inside this block.

    Only for throwaway evaluations such as finite-difference probes, where a
    non-finite result is detected on the final scalar anyway.
    """

    def __enter__(self):
        self._prev = getattr(_local, "checks", True)
        _local.checks = False
        return self

    def __exit__(self, *exc):
        _local.checks = self._prev


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    Entries are appended as ops execute, so the list is already in
    topological order; backward walks it in reverse exactly once.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: "Tensor", parents: tuple["Tensor", ...], backward: Callable) -> None:
        out._tape = self
        out._index = len(self.nodes)
        self.nodes.append((out, parents, backward))

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, parents, fn in reversed(self.nodes[: loss._index + 1]):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, pg in zip(parents, fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                if p._tape is self:
                    key = id(p)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
                else:
                    p.grad += pg
        self.nodes.clear()


class Tensor:
    """n-dimensional float64 array node.

    ``grad`` is allocated for leaf tensors that require gradients; intermediate
    results keep their gradients on the tape only.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_index")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._tape = None
        self._index = -1

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        t._tape = None
        t._index = -1
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar constant is supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(data: np.ndarray) -> bool:
    with np.errstate(invalid="ignore", over="ignore"):
        total = np.add.reduce(data, axis=None)
    return math.isfinite(total) or np.isfinite(data).all()


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    # a single reduction catches any inf/nan; only then inspect elementwise
    if getattr(_local, "checks", True) and not _finite(data):
        raise NonFiniteError(f"non-finite output from {backward.__qualname__.split('.')[0]}")
    needs = any(p.requires_grad for p in parents)
    tape = current_tape() if needs else None
    out = Tensor._wrap(data, tape is not None)
    if tape is not None:
        tape.record(out, parents, backward)
    return out


def _suffix_shape(big: tuple, small: tuple) -> bool:
    return len(small) <= len(big) and tuple(big[len(big) - len(small):]) == tuple(small)


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not _suffix_shape(a.shape, b.shape):
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b; ``b`` may be a bias whose shape is a trailing suffix of ``a``."""
    _check_binary(a, b, "add")

    def backward(g):
        return g, _reduce_to(g, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "sub")

    def backward(g):
        return g, -_reduce_to(g, b.shape)

    return _result(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "mul")

    def backward(g):
        return g * b.data, _reduce_to(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        return (g * c,)

    return _result(a.data * c, (a,), backward)


def sum_squares(tensors: Sequence[Tensor]) -> Tensor:
    """sum_i ||t_i||_F^2 as one node (used for weight penalties)."""
    tensors = tuple(tensors)

    def backward(g):
        return tuple(2.0 * g * t.data for t in tensors)

    total = math.fsum(float(np.vdot(t.data, t.data)) for t in tensors)
    return _result(np.array(total), tensors, backward)


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("add_n of an empty list")
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeError(f"add_n: shapes {[t.shape for t in tensors]} differ")

    def backward(g):
        return (g,) * len(tensors)

    return _result(np.sum([t.data for t in tensors], axis=0), tensors, backward)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"slope must lie in (0, 1), got {slope}")
    def backward(g):
        return (np.where(x.data >= 0, g, g * slope),)

    # max(x, slope*x) equals the piecewise form because 0 < slope < 1
    return _result(np.maximum(x.data, x.data * slope), (x,), backward)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)) without overflow."""

    def backward(g):
        return (g * expit(x.data),)

    return _result(np.logaddexp(0.0, x.data), (x,), backward)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _result(out, (x,), backward)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log of a non-positive value")

    def backward(g):
        return (g / x.data,)

    return _result(np.log(x.data), (x,), backward)


def square(x: Tensor) -> Tensor:
    def backward(g):
        return (2.0 * g * x.data,)

    return _result(x.data * x.data, (x,), backward)


# ---------------------------------------------------------------------------
# reductions and normalisation


def sum_(x: Tensor, axis=None) -> Tensor:
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis)), (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    """Mean over ``axis`` (all axes when None)."""
    n = x.size if axis is None else x.shape[axis]

    def backward(g):
        if axis is None:
            return (np.full(x.shape, float(g) / n),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape) / n,)

    return _result(np.asarray(np.add.reduce(x.data, axis=axis) / n), (x,), backward)


mean_over_axis = mean


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a plain matrix applied to every leading index of ``a``, or
    a stack of matrices with exactly the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape} x {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        elif shared:
            k = a.shape[-1]
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from err

    def backward(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), backward)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)

    def backward(g):
        return (np.transpose(g, np.argsort(axes)),)

    return _result(np.transpose(x.data, axes), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat of an empty list")
    ax = axis % tensors[0].ndim
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError as err:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from err

    def backward(g):
        bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
        return tuple(np.split(g, bounds, axis=ax))

    return _result(out, tensors, backward)


def expand(x: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis of length ``n`` at ``axis`` by repetition."""

    def backward(g):
        return (g.sum(axis=axis),)

    out = np.repeat(np.expand_dims(x.data, axis), n, axis=axis)
    return _result(out, (x,), backward)


def gather_rows(table: Tensor, indices) -> Tensor:
    """Row lookup ``table[indices]``; backward scatter-adds into the table."""
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise TypeError("gather_rows needs integer indices")
    if table.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-d table, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        bad = int(idx.max()) if idx.max() >= table.shape[0] else int(idx.min())
        raise IndexError(f"row index {bad} out of range for table with {table.shape[0]} rows")

    def backward(g):
        # per-column bincount is a much faster scatter-add than np.add.at
        flat, rows = idx.reshape(-1), table.shape[0]
        g2 = g.reshape(-1, table.shape[1])
        return (np.stack([np.bincount(flat, weights=g2[:, c], minlength=rows) for c in range(g2.shape[1])], axis=1),)

    return _result(table.data[idx], (table,), backward)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf's ``grad``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ValueError("loss has no recorded history (was a Tape active?)")
    loss._tape.backward(loss)
