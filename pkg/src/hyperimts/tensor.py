"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation records itself on the output tensor together
with a closure that pushes the upstream gradient back to its inputs.  Calling
:meth:`Tensor.backward` on a scalar replays those records in reverse creation
order, each exactly once.

Leaf tensors (parameters) accumulate gradients across ``backward`` calls until
:func:`zero_grad` or :meth:`Tensor.zero_grad` resets them.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "ContractError",
    "NonFiniteError",
    "tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "sin",
    "elementwise",
    "softmax",
    "concat",
    "gather_rows",
    "take_cols",
    "transpose",
    "reshape",
    "add_bias",
    "linear",
    "sum_all",
    "rowsum",
    "square",
    "zero_grad",
    "set_debug",
    "debug_enabled",
    "no_grad",
]

_seq = itertools.count()
_DEBUG = False
_RECORD = True


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """An operation was called outside its precondition."""


class NonFiniteError(FloatingPointError):
    """A forward value became NaN or infinite while debug checks were on."""


def set_debug(flag: bool) -> None:
    """Toggle the finiteness sweep run after every forward operation."""
    global _DEBUG
    _DEBUG = bool(flag)


def debug_enabled() -> bool:
    return _DEBUG


@contextlib.contextmanager
def no_grad():
    """Run forward operations without recording them for backward."""
    global _RECORD
    prev, _RECORD = _RECORD, False
    try:
        yield
    finally:
        _RECORD = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._seq = next(_seq)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        """Propagate d(self)/d(input) to every reachable tensor that requires grad."""
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor that requires grad")

        tape: list[Tensor] = []
        seen: set[int] = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            tape.append(node)
            stack.extend(p for p in node._parents if p.requires_grad)
        tape.sort(key=lambda t: t._seq, reverse=True)

        for node in tape:
            if not node.is_leaf:
                node.grad = np.zeros_like(node.data)
        self.grad = self.grad + np.ones_like(self.data)
        for node in tape:
            if node._backward is not None:
                node._backward(node.grad)

    # operator sugar, strict shapes
    def __add__(self, other):
        return add(self, _wrap(other, self.shape))

    def __radd__(self, other):
        return add(_wrap(other, self.shape), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.shape))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _wrap(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=np.float64), shape))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise NonFiniteError("operation produced NaN or Inf")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out._seq = next(_seq)
    out.requires_grad = _RECORD and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out.grad = None
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.grad = None
        out._parents = ()
        out._backward = None
    return out


def _acc(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad += g


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a.grad += g @ b.data.T
        if b.requires_grad:
            b.grad += a.data.T @ g

    return _make(out_data, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)

    def backward(g):
        _acc(a, g)
        _acc(b, g)

    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)

    def backward(g):
        _acc(a, g)
        _acc(b, -g)

    return _make(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)

    def backward(g):
        _acc(a, g * b.data)
        _acc(b, g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        a.grad += g * c

    return _make(a.data * c, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        a.grad += g * mask

    return _make(np.where(mask, a.data, 0.0), (a,), backward)


def sin(a: Tensor) -> Tensor:
    def backward(g):
        a.grad += g * np.cos(a.data)

    return _make(np.sin(a.data), (a,), backward)


def square(a: Tensor) -> Tensor:
    def backward(g):
        a.grad += 2.0 * a.data * g

    return _make(a.data * a.data, (a,), backward)


_ELEMENTWISE = {"add": add, "mul": mul, "sub": sub, "relu": relu, "sin": sin, "square": square}


def elementwise(op: str, *inputs: Tensor) -> Tensor:
    """Dispatch a pointwise op by name: add, mul, sub take two operands; relu, sin, square one."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*inputs)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Stable softmax.  Entries where ``mask`` is False get weight exactly 0.

    A slice with no admissible entry yields all zeros.
    """
    if not -x.data.ndim <= axis < x.data.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != z.shape:
            raise DimensionError(f"softmax: mask shape {mask.shape} != input {z.shape}")
        z = np.where(mask, z, -np.inf)
    m = np.max(z, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    s = np.sum(e, axis=axis, keepdims=True)
    y = e / np.where(s > 0, s, 1.0)

    def backward(g):
        x.grad += y * (g - np.sum(g * y, axis=axis, keepdims=True))

    return _make(y, (x,), backward)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ContractError("concat needs at least one tensor")
    if len(parts) == 1:
        return parts[0]
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(
            d1 != d2 for i, (d1, d2) in enumerate(zip(ref, p.shape)) if i != ax
        ):
            raise DimensionError(f"concat: incompatible shapes {ref} and {p.shape} on axis {axis}")
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                p.grad += g[tuple(idx)]

    return _make(np.concatenate([p.data for p in parts], axis=ax), parts, backward)


def gather_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    n = x.shape[0]
    bad = idx[(idx < 0) | (idx >= n)]
    if bad.size:
        raise IndexError(f"gather_rows: index {int(bad[0])} out of range for {n} rows")

    def backward(g):
        np.add.at(x.grad, idx, g)

    return _make(x.data[idx], (x,), backward)


def take_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not 0 <= start <= stop <= x.shape[1]:
        raise DimensionError(f"take_cols: [{start}:{stop}] invalid for shape {x.shape}")

    def backward(g):
        x.grad[:, start:stop] += g

    return _make(x.data[:, start:stop].copy(), (x,), backward)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose: expected 2-D, got {x.shape}")

    def backward(g):
        x.grad += g.T

    return _make(x.data.T.copy(), (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")

    def backward(g):
        x.grad += g.reshape(x.shape)

    return _make(x.data.reshape(shape).copy(), (x,), backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-p bias vector to every row of an n x p matrix."""
    if x.data.ndim != 2 or b.shape != (x.shape[1],):
        raise DimensionError(f"add_bias: bias {b.shape} does not fit rows of {x.shape}")

    def backward(g):
        _acc(x, g)
        _acc(b, g.sum(axis=0))

    return _make(x.data + b.data, (x, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add_bias(out, bias)


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        x.grad += g.reshape(()) * np.ones_like(x.data)

    return _make(np.array(x.data.sum()), (x,), backward)


def rowsum(x: Tensor) -> Tensor:
    """Sum each row of a matrix into an n x 1 column."""
    if x.data.ndim != 2:
        raise DimensionError(f"rowsum: expected 2-D, got {x.shape}")

    def backward(g):
        x.grad += np.broadcast_to(g, x.shape)

    return _make(x.data.sum(axis=1, keepdims=True), (x,), backward)


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()
