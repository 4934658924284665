"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation executed on a :class:`Tensor` that requires gradients is
recorded on the fly (a dynamic tape).  Calling :meth:`Tensor.backward` on a
scalar walks the recorded graph once in reverse topological order and
accumulates ``d loss / d leaf`` into ``leaf.grad``.

Broadcasting follows numpy semantics; gradients are summed back over the
broadcast axes before being handed to the operand.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class UsageError(RuntimeError):
    """The engine was driven in a way its contract does not allow."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward

    # ------------------------------------------------------------------
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
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    # ------------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of this scalar into every reachable leaf."""
        if grad is None:
            if self.data.size != 1 or self.data.ndim > 1:
                raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise UsageError("backward() called on a tensor that does not require grad")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar ----------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    parents = tuple(parents)
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, op=op)
    return Tensor(data, op=op)


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


def _binary(fn, a: Tensor, b: Tensor, op: str) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------------
# elementwise binary
# ----------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary(np.add, a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary(np.subtract, a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary(np.multiply, a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary(np.divide, a, b, "div")

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "div")


# ----------------------------------------------------------------------
# elementwise unary
# ----------------------------------------------------------------------
def neg(x) -> Tensor:
    x = as_tensor(x)
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def absolute(x) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def power(x, exponent: float) -> Tensor:
    x = as_tensor(x)
    out = x.data ** exponent

    def backward(g):
        return (g * exponent * x.data ** (exponent - 1),)

    return _make(out, (x,), backward, "pow")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def elu(x) -> Tensor:
    """ELU with alpha = 1."""
    x = as_tensor(x)
    positive = x.data > 0
    out = np.where(positive, x.data, np.expm1(np.minimum(x.data, 0.0)))

    def backward(g):
        return (g * np.where(positive, 1.0, out + 1.0),)

    return _make(out, (x,), backward, "elu")


def elementwise(op: str, *inputs) -> Tensor:
    """Dispatch one of the registered elementwise ops by name."""
    table = {
        "add": add, "sub": sub, "mul": mul, "div": div,
        "sigmoid": sigmoid, "tanh": tanh, "elu": elu, "exp": exp,
        "neg": neg, "abs": absolute,
    }
    try:
        fn = table[op]
    except KeyError:
        raise UsageError(f"unknown elementwise op {op!r}") from None
    return fn(*inputs)


# ----------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ----------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise DimensionError(f"matmul cannot broadcast batch axes: {a.shape} x {b.shape}") from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                # batch axes of a fold into a single GEMM
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def softmax_lastaxis(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax needs a non-empty last axis, got {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


# ----------------------------------------------------------------------
# structural
# ----------------------------------------------------------------------
def _check_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"{op}: axis {axis} out of range for rank {ndim}")
    return axis % ndim


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat of an empty sequence")
    ax = _check_axis(axis, ts[0].ndim, "concat")
    try:
        out = np.concatenate([t.data for t in ts], axis=ax)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) if t.requires_grad else None
            for i, t in enumerate(ts)
        )

    return _make(out, ts, backward, "concat")


def concat_lastaxis(tensors: Sequence) -> Tensor:
    return concat(tensors, axis=-1)


def reverse(x, axis: int) -> Tensor:
    x = as_tensor(x)
    ax = _check_axis(axis, x.ndim, "reverse")
    return _make(np.flip(x.data, axis=ax).copy(), (x,), lambda g: (np.flip(g, axis=ax).copy(),), "reverse")


def reverse_timeaxis(x) -> Tensor:
    """Flip the time axis, which is the second-to-last axis by convention."""
    return reverse(x, -2)


def swapaxes(x, axis1: int, axis2: int) -> Tensor:
    x = as_tensor(x)
    a1 = _check_axis(axis1, x.ndim, "swapaxes")
    a2 = _check_axis(axis2, x.ndim, "swapaxes")
    out = np.swapaxes(x.data, a1, a2)
    return _make(np.ascontiguousarray(out), (x,), lambda g: (np.swapaxes(g, a1, a2),), "swapaxes")


def transpose_last2(x) -> Tensor:
    return swapaxes(x, -1, -2)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    ax = _check_axis(axis, x.ndim, "slice")
    n = x.shape[ax]
    if not 0 <= start < stop <= n:
        raise DimensionError(f"slice [{start}:{stop}] out of range for extent {n} on axis {axis}")
    index = [slice(None)] * x.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        full[index] = g
        return (full,)

    return _make(x.data[index], (x,), backward, "slice")


def slice_timeaxis(x, start: int, stop: int) -> Tensor:
    return slice_axis(x, -2, start, stop)


def masked_fill(x, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by ``value``; no gradient flows there."""
    x = as_tensor(x)
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask).astype(bool)
    try:
        keep = ~np.broadcast_to(m, x.shape)
    except ValueError:
        raise DimensionError(f"masked_fill: mask {m.shape} does not broadcast to {x.shape}") from None
    out = np.where(keep, x.data, value)
    return _make(out, (x,), lambda g: (g * keep,), "masked_fill")


def structural(op: str, *args, **kwargs) -> Tensor:
    table = {
        "concat_lastaxis": concat_lastaxis,
        "reverse_timeaxis": reverse_timeaxis,
        "transpose_last2": transpose_last2,
        "reshape": reshape,
        "slice_timeaxis": slice_timeaxis,
        "masked_fill": masked_fill,
    }
    try:
        fn = table[op]
    except KeyError:
        raise UsageError(f"unknown structural op {op!r}") from None
    return fn(*args, **kwargs)


def dropout(x, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: scale kept units by 1/(1-rate) at train time."""
    x = as_tensor(x)
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise UsageError("dropout at train time needs a random generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)
