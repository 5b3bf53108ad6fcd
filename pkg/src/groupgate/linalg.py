"""Dense matrix kernels shared by the routing, attention and inference code.

All public functions validate shapes, reject non-finite inputs, and run in
the dtype of their arguments (tests use float64 throughout; float32 is
available for benchmarking). Reductions rely on numpy's sequential kernels,
so identical inputs produce bit-identical outputs run to run.
"""

from __future__ import annotations

import numpy as np

NEG_INF = -np.inf


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf reached a public operation."""


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Validate and return ``x`` as a finite 2-D float array."""
    a = np.asarray(x)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.issubdtype(a.dtype, np.floating):
        a = a.astype(np.float64)
    if not np.isfinite(a).all():
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return a


def check_finite(a: np.ndarray, name: str = "result") -> np.ndarray:
    if not np.isfinite(a).all():
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product with explicit shape checking."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul output")


def row_softmax(x, scale: float = 1.0) -> np.ndarray:
    """Row-wise softmax of ``scale * x``, max-shifted for stability.

    Constant rows are fine (they come out uniform); overflow cannot occur
    because the per-row maximum is subtracted before exponentiation.
    """
    x = as_matrix(x, "x")
    z = x * float(scale)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def masked_row_softmax(x: np.ndarray, mask: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Row softmax over unmasked entries only; masked entries are exactly 0.

    Masked positions are excluded analytically (never fed to exp), so no
    -inf sentinel arithmetic happens. Rows with no unmasked entry raise.
    """
    x = as_matrix(x, "x")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"mask shape {mask.shape} != x shape {x.shape}")
    if not mask.any(axis=1).all():
        raise ShapeError("masked_row_softmax: a row has no unmasked entry")
    z = np.where(mask, x * float(scale), NEG_INF)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def logsumexp_rows(x, mask: np.ndarray | None = None) -> np.ndarray:
    """Per-row log-sum-exp as a (rows, 1) column, max-shifted.

    With a boolean ``mask``, only unmasked entries participate; fully masked
    rows return -inf and the caller must handle that explicitly.
    """
    x = as_matrix(x, "x")
    if mask is None:
        m = x.max(axis=1, keepdims=True)
        return m + np.log(np.exp(x - m).sum(axis=1, keepdims=True))
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"mask shape {mask.shape} != x shape {x.shape}")
    any_row = mask.any(axis=1, keepdims=True)
    z = np.where(mask, x, NEG_INF)
    m = z.max(axis=1, keepdims=True)
    m_safe = np.where(any_row, m, 0.0)
    e = np.where(mask, np.exp(z - m_safe), 0.0)
    s = e.sum(axis=1, keepdims=True)
    out = np.where(any_row, m_safe + np.log(np.where(any_row, s, 1.0)), NEG_INF)
    return out
