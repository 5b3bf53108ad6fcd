"""Training-time attention: full causal softmax, optionally group-gated.

The gate multiplies each scaled logit of a distant pair (i, j) by
sigmoid(lam * (g_i . g_j - gate_offset)); pairs inside the trailing local
window [i - w, i] always attend untouched. Everything runs on the autodiff
tape so the language-model gradient reaches the centroids and projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .routing import CentroidBank


@dataclass
class AttentionInputs:
    """Per-head Q, K, V (T x d_h each) plus the local window size.

    Attention is always causal. Values may be plain arrays or autodiff
    tensors; outputs follow the inputs.
    """

    q: object
    k: object
    v: object
    window: int

    def __post_init__(self) -> None:
        shapes = {np.shape(x.value if isinstance(x, ad.Tensor) else x) for x in (self.q, self.k, self.v)}
        if len(shapes) != 1:
            raise ValueError(f"Q, K, V shapes differ: {shapes}")
        ((t, _),) = shapes
        if t < 1:
            raise ValueError("empty sequence")
        if self.window < 1:
            raise ValueError("window must be >= 1")

    @property
    def T(self) -> int:
        q = self.q.value if isinstance(self.q, ad.Tensor) else self.q
        return int(np.shape(q)[0])

    @property
    def head_dim(self) -> int:
        q = self.q.value if isinstance(self.q, ad.Tensor) else self.q
        return int(np.shape(q)[1])


def causal_mask(T: int) -> np.ndarray:
    """Boolean (T, T): position i may read positions j <= i."""
    idx = np.arange(T)
    return idx[None, :] <= idx[:, None]


def local_window_mask(T: int, window: int) -> np.ndarray:
    """Boolean (T, T): true where 0 <= i - j <= window (diagonal included)."""
    diff = np.arange(T)[:, None] - np.arange(T)[None, :]
    return (diff >= 0) & (diff <= window)


def full_attention(inp: AttentionInputs) -> ad.Tensor:
    """Plain causal attention, softmax(Q K^T / sqrt(d_h)) V."""
    q, k, v = ad.as_tensor(inp.q), ad.as_tensor(inp.k), ad.as_tensor(inp.v)
    scale = 1.0 / np.sqrt(inp.head_dim)
    logits = ad.matmul(q, ad.transpose(k))
    weights = ad.masked_row_softmax_t(logits, causal_mask(inp.T), scale=scale)
    return ad.matmul(weights, v)


def gate_matrix(G, T: int, window: int, lam: float, gate_offset: float) -> ad.Tensor:
    """(T, T) multiplier: 1 inside the local window, gated sigmoid outside."""
    Gt = ad.as_tensor(G)
    aff = ad.matmul(Gt, ad.transpose(Gt))
    gated = ad.sigmoid(ad.mul(ad.sub(aff, gate_offset), lam))
    local = local_window_mask(T, window).astype(np.float64)
    return ad.add(local, ad.mul(gated, 1.0 - local))


def gated_scores(inp: AttentionInputs, G, lam: float, gate_offset: float) -> ad.Tensor:
    """Pre-softmax gated logits: (Q K^T / sqrt(d_h)) elementwise-scaled by the gate.

    The 1/sqrt(d_h) scale is applied before gating, so a fully saturated gate
    reproduces plain attention logits exactly.
    """
    q, k = ad.as_tensor(inp.q), ad.as_tensor(inp.k)
    scale = 1.0 / np.sqrt(inp.head_dim)
    logits = ad.mul(ad.matmul(q, ad.transpose(k)), scale)
    return ad.mul(logits, gate_matrix(G, inp.T, inp.window, lam, gate_offset))


def gated_attention_soft(inp: AttentionInputs, G, bank: CentroidBank) -> ad.Tensor:
    """Group-gated causal attention over all O(T^2) pairs (training path)."""
    scores = gated_scores(inp, G, bank.lam, bank.gate_offset)
    weights = ad.masked_row_softmax_t(scores, causal_mask(inp.T), scale=1.0)
    return ad.matmul(weights, ad.as_tensor(inp.v))
