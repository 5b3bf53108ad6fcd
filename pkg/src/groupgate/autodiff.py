"""Reverse-mode differentiation over 2-D arrays.

A deliberately small tape: every value is a 2-D float array (column and row
vectors are (n, 1) / (1, n)), and only the op kinds the routed-attention
models actually use are provided. Broadcasting is restricted to (1, n),
(m, 1) and (1, 1) operands against (m, n); anything fancier is a shape
error, not a silent numpy broadcast.

Graphs are plain DAGs of ``Tensor`` nodes built functionally; ``backward``
seeds a scalar root and accumulates vector-Jacobian products into leaf
``grad`` buffers in one topological sweep.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .linalg import NonFiniteError, ShapeError


class GraphError(RuntimeError):
    """The computation graph is malformed (cycle, non-scalar root)."""


class Tensor:
    """One node of the tape: a value, a grad slot, and upstream closures."""

    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_vjps")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        v = np.asarray(value, dtype=np.float64)
        if v.ndim == 0:
            v = v.reshape(1, 1)
        if v.ndim != 2:
            raise ShapeError(f"Tensor value must be 2-D, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise NonFiniteError(f"Tensor {name or ''} initialized with NaN/Inf")
        self.value = v
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple[Callable[[np.ndarray], np.ndarray], ...] = ()

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape  # type: ignore[return-value]

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.value[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = self.name or "tensor"
        return f"<{tag} {self.shape} grad={'yes' if self.requires_grad else 'no'}>"

    # Operator sugar; all arithmetic routes through the module-level ops.
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    """Coerce arrays/scalars to constant tensors; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def parameter(value, name: str) -> Tensor:
    """A named trainable leaf."""
    return Tensor(np.array(value, dtype=np.float64, copy=True), requires_grad=True, name=name)


def _node(value: np.ndarray, parents: Sequence[Tensor], vjps: Sequence[Callable]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.name = None
    tracked = tuple(p for p in parents if p.requires_grad)
    if tracked:
        out.requires_grad = True
        # Keep only the closures of tracked parents; constants need no VJP.
        out._parents = tracked
        out._vjps = tuple(v for p, v in zip(parents, vjps) if p.requires_grad)
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjps = ()
    return out


def _check_broadcast(a: tuple[int, int], b: tuple[int, int]) -> tuple[int, int]:
    rows = a[0] if b[0] in (1, a[0]) else (b[0] if a[0] == 1 else None)
    cols = a[1] if b[1] in (1, a[1]) else (b[1] if a[1] == 1 else None)
    if rows is None or cols is None:
        raise ShapeError(f"cannot broadcast {a} with {b}")
    return max(a[0], b[0]), max(a[1], b[1])


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    return _node(
        a.value + b.value,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    return _node(
        a.value - b.value,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    return _node(
        a.value * b.value,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.value, a.shape),
            lambda g: _unbroadcast(g * a.value, b.shape),
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = a.value / b.value
    if not np.isfinite(out).all():
        raise NonFiniteError("div produced NaN/Inf")
    return _node(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.value, a.shape),
            lambda g: _unbroadcast(-g * out / b.value, b.shape),
        ),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    return _node(
        a.value @ b.value,
        (a, b),
        (lambda g: g @ b.value.T, lambda g: a.value.T @ g),
    )


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.value.T.copy(), (a,), (lambda g: g.T,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    if not np.isfinite(out).all():
        raise NonFiniteError("exp overflow")
    return _node(out, (a,), (lambda g: g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.value)
    if not np.isfinite(out).all():
        raise NonFiniteError("log of non-positive value")
    return _node(out, (a,), (lambda g: g / a.value,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _node(out, (a,), (lambda g: g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _node(out, (a,), (lambda g: g * out * (1.0 - out),))


def pow_const(a, p: float) -> Tensor:
    a = as_tensor(a)
    out = a.value ** p
    if not np.isfinite(out).all():
        raise NonFiniteError(f"pow_const(p={p}) produced NaN/Inf")
    return _node(out, (a,), (lambda g: g * p * a.value ** (p - 1.0),))


def clamp_min(a, floor: float) -> Tensor:
    """Elementwise max(a, floor); gradient passes only where a > floor."""
    a = as_tensor(a)
    out = np.maximum(a.value, floor)
    keep = a.value > floor
    return _node(out, (a,), (lambda g: g * keep,))


def detach(a) -> Tensor:
    """Identity forward, zero backward (stop-gradient)."""
    a = as_tensor(a)
    return Tensor(a.value.copy())


def tsum(a, axis: int | None = None) -> Tensor:
    """Sum to (1,1), (1,n) for axis=0, or (m,1) for axis=1."""
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        out = a.value.sum().reshape(1, 1)
    elif axis in (0, 1):
        out = a.value.sum(axis=axis, keepdims=True)
    else:
        raise ShapeError(f"sum axis must be None, 0 or 1, got {axis}")
    return _node(out, (a,), (lambda g: np.broadcast_to(g, shape),))


def tmean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def gather_rows(a, idx: np.ndarray) -> Tensor:
    """Select rows by integer index (embedding lookup); backward scatter-adds."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather_rows expects a 1-D index array")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError("gather_rows index out of range")
    out = a.value[idx]

    def vjp(g: np.ndarray) -> np.ndarray:
        acc = np.zeros_like(a.value)
        np.add.at(acc, idx, g)
        return acc

    return _node(out, (a,), (vjp,))


def take_per_row(a, cols: np.ndarray) -> Tensor:
    """Pick one entry per row -> (m, 1) column (used by cross-entropy)."""
    a = as_tensor(a)
    cols = np.asarray(cols, dtype=np.intp)
    m = a.shape[0]
    if cols.shape != (m,):
        raise ShapeError(f"take_per_row needs {m} column indices, got {cols.shape}")
    if cols.size and (cols.min() < 0 or cols.max() >= a.shape[1]):
        raise ShapeError("take_per_row column index out of range")
    rows = np.arange(m)
    out = a.value[rows, cols].reshape(m, 1)

    def vjp(g: np.ndarray) -> np.ndarray:
        acc = np.zeros_like(a.value)
        acc[rows, cols] = g[:, 0]
        return acc

    return _node(out, (a,), (vjp,))


def slice_cols(a, j0: int, j1: int) -> Tensor:
    a = as_tensor(a)
    if not (0 <= j0 < j1 <= a.shape[1]):
        raise ShapeError(f"slice_cols [{j0}:{j1}] out of range for {a.shape}")

    def vjp(g: np.ndarray) -> np.ndarray:
        acc = np.zeros_like(a.value)
        acc[:, j0:j1] = g
        return acc

    return _node(a.value[:, j0:j1].copy(), (a,), (vjp,))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    rows = parts[0].shape[0]
    if any(p.shape[0] != rows for p in parts):
        raise ShapeError("concat_cols: row counts differ")
    widths = [p.shape[1] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(widths)])
    out = np.concatenate([p.value for p in parts], axis=1)

    def make_vjp(i: int):
        return lambda g: g[:, offsets[i] : offsets[i + 1]]

    return _node(out, parts, tuple(make_vjp(i) for i in range(len(parts))))


def masked_row_softmax_t(a, mask: np.ndarray, scale: float = 1.0) -> Tensor:
    """Differentiable row softmax over unmasked entries (masked outputs are 0)."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"mask shape {mask.shape} != value shape {a.shape}")
    if not mask.any(axis=1).all():
        raise ShapeError("masked_row_softmax_t: a row has no unmasked entry")
    z = np.where(mask, a.value * scale, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g: np.ndarray) -> np.ndarray:
        inner = (g * y).sum(axis=1, keepdims=True)
        return scale * y * (g - inner)

    return _node(y, (a,), (vjp,))


def logsumexp_rows_t(a, mask: np.ndarray | None = None) -> Tensor:
    """Differentiable per-row logsumexp -> (m, 1); rows must have an entry."""
    a = as_tensor(a)
    if mask is None:
        m = a.value.max(axis=1, keepdims=True)
        e = np.exp(a.value - m)
        s = e.sum(axis=1, keepdims=True)
        out = m + np.log(s)
        w = e / s
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape:
            raise ShapeError(f"mask shape {mask.shape} != value shape {a.shape}")
        if not mask.any(axis=1).all():
            raise ShapeError("logsumexp_rows_t: fully masked row (would be -inf)")
        z = np.where(mask, a.value, -np.inf)
        m = z.max(axis=1, keepdims=True)
        e = np.where(mask, np.exp(z - m), 0.0)
        s = e.sum(axis=1, keepdims=True)
        out = m + np.log(s)
        w = e / s
    return _node(out, (a,), (lambda g: g * w,))


def gelu(a) -> Tensor:
    """Smooth GELU (tanh form); smoothness keeps finite-difference checks clean."""
    a = as_tensor(a)
    c = 0.7978845608028654  # sqrt(2/pi)
    inner = mul(add(a, mul(pow_const(a, 3.0), 0.044715)), c)
    return mul(mul(a, add(tanh(inner), 1.0)), 0.5)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``.

    The root must be scalar. Each node is visited exactly once in reverse
    topological order; leaf grads accumulate across repeated calls (callers
    zero them between steps).
    """
    if root.value.size != 1:
        raise GraphError(f"backward root must be scalar, got shape {root.shape}")
    order = _toposort(root)
    if root.grad is None:
        root.grad = np.ones((1, 1))
    else:
        root.grad = root.grad + np.ones((1, 1))
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in zip(node._parents, node._vjps):
            contrib = vjp(g)
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.value)
            parent.grad += contrib


def _toposort(root: Tensor) -> list[Tensor]:
    WHITE, GRAY, BLACK = 0, 1, 2
    state: dict[int, int] = {}
    order: list[Tensor] = []
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            state[id(node)] = BLACK
            order.append(node)
            continue
        mark = state.get(id(node), WHITE)
        if mark == GRAY:
            raise GraphError("cycle detected in computation graph")
        if mark == BLACK:
            continue
        state[id(node)] = GRAY
        stack.append((node, True))
        for parent in node._parents:
            if state.get(id(parent), WHITE) != BLACK:
                stack.append((parent, False))
    return order
