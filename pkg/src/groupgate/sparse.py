"""Hard-mask sparse inference: disjoint pass decomposition with exact merge.

A token pair (i, j) is attended iff j <= i and (memberships intersect or
i - j <= window). Execution splits the attended pairs into disjoint sets:

* set A: same primary group, causal (computed segment-wise after a stable
  sort by primary group, which preserves causal order);
* set B: cross-primary pairs inside the local window;
* residual set (top-k >= 2 only): distant cross-primary pairs that share a
  non-primary group.

The sets are disjoint by construction and their union is exactly the mask,
so the per-query logsumexp merge reproduces masked full attention to
floating-point accuracy: no double-counting and no subtraction. Masked
entries are excluded analytically everywhere; -inf only ever appears as the
logsumexp of an empty set, never inside arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gated import AttentionInputs
from .linalg import ShapeError, logsumexp_rows, masked_row_softmax
from .routing import HardAssignment

_ROW_CHUNK = 1024  # bounds the (chunk, window) and (chunk, T) scratch buffers


class MergeError(RuntimeError):
    """A query had no attended key in any partial (invariant violation)."""


@dataclass(frozen=True)
class MaskSpec:
    """Sequence length, window and hard memberships defining the sparse mask."""

    T: int
    window: int
    assignment: HardAssignment

    def __post_init__(self) -> None:
        if self.T < 1 or self.window < 1:
            raise ValueError("need T >= 1 and window >= 1")
        if self.assignment.primary.shape != (self.T,):
            raise ShapeError(
                f"assignment covers {self.assignment.primary.shape[0]} tokens, spec says {self.T}"
            )

    @property
    def k(self) -> int:
        return self.assignment.k


@dataclass(frozen=True)
class GroupPermutation:
    """Stable sort of token indices by primary group.

    ``order[boundaries[g]:boundaries[g+1]]`` lists group g's tokens in
    ascending original position, so causal order survives the sort.
    """

    order: np.ndarray  # (T,) int
    boundaries: np.ndarray  # (K+1,) int segment offsets

    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.order)
        inv[self.order] = np.arange(self.order.shape[0])
        return inv


@dataclass
class PartialAttention:
    """One pass's output block with its per-query log-normalizers.

    Rows with ``coverage`` False carry O = 0 and L = -inf; they contribute
    nothing to a merge.
    """

    O: np.ndarray  # (T, d_h)
    L: np.ndarray  # (T,)
    coverage: np.ndarray  # (T,) bool


def group_permutation(primary: np.ndarray, num_groups: int) -> GroupPermutation:
    primary = np.asarray(primary)
    order = np.argsort(primary, kind="stable")
    counts = np.bincount(primary, minlength=num_groups)
    boundaries = np.concatenate([[0], np.cumsum(counts)])
    return GroupPermutation(order=order, boundaries=boundaries)


def build_mask(spec: MaskSpec) -> np.ndarray:
    """Boolean (T, T) attended-pair mask for the hard top-k assignment."""
    T = spec.T
    bits = spec.assignment.membership_bits()
    share = (bits[:, None] & bits[None, :]) != 0
    diff = np.arange(T)[:, None] - np.arange(T)[None, :]
    return (diff >= 0) & (share | (diff <= spec.window))


def fast_path_mask(spec: MaskSpec) -> np.ndarray:
    """Mask realized by the primary-only two-pass split (sets A and B)."""
    T = spec.T
    g = spec.assignment.primary
    same = g[:, None] == g[None, :]
    diff = np.arange(T)[:, None] - np.arange(T)[None, :]
    return (diff >= 0) & (same | (diff <= spec.window))


def split_pairs(spec: MaskSpec) -> tuple[set, set]:
    """Same-group causal pairs A and cross-group local pairs B (k = 1 only).

    Same-group local pairs land in A and never in B, so the two sets are
    disjoint and their union is exactly the attended mask.
    """
    if spec.k != 1:
        raise ValueError("split_pairs is the single-membership decomposition; use the generalized path for k >= 2")
    g = spec.assignment.primary
    diff = np.arange(spec.T)[:, None] - np.arange(spec.T)[None, :]
    causal = diff >= 0
    same = g[:, None] == g[None, :]
    a_mask = causal & same
    b_mask = causal & ~same & (diff <= spec.window)
    set_a = {(int(i), int(j)) for i, j in np.argwhere(a_mask)}
    set_b = {(int(i), int(j)) for i, j in np.argwhere(b_mask)}
    return set_a, set_b


def residual_mask(spec: MaskSpec) -> np.ndarray:
    """Distant cross-primary pairs that still share some membership (k >= 2)."""
    T = spec.T
    g = spec.assignment.primary
    bits = spec.assignment.membership_bits()
    share = (bits[:, None] & bits[None, :]) != 0
    diff = np.arange(T)[:, None] - np.arange(T)[None, :]
    return (diff > spec.window) & (g[:, None] != g[None, :]) & share


def group_pass(inp: AttentionInputs, perm: GroupPermutation) -> PartialAttention:
    """Causal attention inside each primary-group segment (set A).

    Segments are independent; each token's L is the logsumexp of its scaled
    logits over same-group keys at earlier-or-equal positions. Every token
    sits in exactly one segment and always attends itself, so coverage is
    total.
    """
    q, k, v = np.asarray(inp.q), np.asarray(inp.k), np.asarray(inp.v)
    T, d_h = q.shape
    scale = 1.0 / np.sqrt(d_h)
    O = np.zeros_like(v)
    L = np.full(T, -np.inf)
    for g in range(perm.boundaries.shape[0] - 1):
        idx = perm.order[perm.boundaries[g] : perm.boundaries[g + 1]]
        n = idx.shape[0]
        if n == 0:
            continue
        logits = (q[idx] @ k[idx].T) * scale
        causal = np.tril(np.ones((n, n), dtype=bool))
        weights = masked_row_softmax(logits, causal)
        O[idx] = weights @ v[idx]
        L[idx] = logsumexp_rows(logits, causal)[:, 0]
    return PartialAttention(O=O, L=L, coverage=np.ones(T, dtype=bool))


def local_pass(
    inp: AttentionInputs, spec: MaskSpec, include_same_group: bool = False
) -> PartialAttention:
    """Windowed attention over cross-primary pairs (set B).

    Gathers each query's trailing window of keys and analytically drops
    same-primary pairs (they belong to set A). ``include_same_group`` exists
    only for fault injection in the verification harness: it deliberately
    re-adds set-A local pairs, breaking disjointness.
    """
    q, k, v = np.asarray(inp.q), np.asarray(inp.k), np.asarray(inp.v)
    T, d_h = q.shape
    w = min(spec.window, T - 1)
    g = spec.assignment.primary
    scale = 1.0 / np.sqrt(d_h)
    O = np.zeros_like(v)
    L = np.full(T, -np.inf)
    coverage = np.zeros(T, dtype=bool)
    offsets = np.arange(w + 1)  # key j = i - offset
    for start in range(0, T, _ROW_CHUNK):
        stop = min(start + _ROW_CHUNK, T)
        rows = np.arange(start, stop)
        keys = rows[:, None] - offsets[None, :]
        valid = keys >= 0
        keys_safe = np.maximum(keys, 0)
        if not include_same_group:
            valid &= g[keys_safe] != g[rows][:, None]
        logits = np.einsum("cd,cod->co", q[rows], k[keys_safe]) * scale
        has_key = valid.any(axis=1)
        coverage[rows] = has_key
        if not has_key.any():
            continue
        sub = rows[has_key]
        lse = logsumexp_rows(logits[has_key], valid[has_key])[:, 0]
        weights = masked_row_softmax(logits[has_key], valid[has_key])
        O[sub] = np.einsum("co,cod->cd", weights, v[keys_safe[has_key]])
        L[sub] = lse
    return PartialAttention(O=O, L=L, coverage=coverage)


def residual_pass(inp: AttentionInputs, spec: MaskSpec) -> PartialAttention:
    """Attention over the residual set (shared non-primary memberships)."""
    q, k, v = np.asarray(inp.q), np.asarray(inp.k), np.asarray(inp.v)
    T, d_h = q.shape
    g = spec.assignment.primary
    bits = spec.assignment.membership_bits()
    scale = 1.0 / np.sqrt(d_h)
    O = np.zeros_like(v)
    L = np.full(T, -np.inf)
    coverage = np.zeros(T, dtype=bool)
    cols = np.arange(T)
    for start in range(0, T, _ROW_CHUNK):
        stop = min(start + _ROW_CHUNK, T)
        rows = np.arange(start, stop)
        diff = rows[:, None] - cols[None, :]
        mask = (diff > spec.window) & (g[rows][:, None] != g[None, :])
        mask &= (bits[rows][:, None] & bits[None, :]) != 0
        has_key = mask.any(axis=1)
        coverage[rows] = has_key
        if not has_key.any():
            continue
        sub = rows[has_key]
        logits = (q[sub] @ k.T) * scale
        L[sub] = logsumexp_rows(logits, mask[has_key])[:, 0]
        O[sub] = masked_row_softmax(logits, mask[has_key]) @ v
    return PartialAttention(O=O, L=L, coverage=coverage)


def merge_partials(parts: list[PartialAttention]) -> np.ndarray:
    """Exact softmax recombination of disjoint partial attentions.

    Weighting each pass's output by exp(L_p - max_p L_p) and renormalizing
    reproduces the softmax over the union of the passes' key sets exactly,
    provided the sets are disjoint. Max-shifted, so no overflow.
    """
    if not parts:
        raise MergeError("nothing to merge")
    cov = np.stack([p.coverage for p in parts])
    if not cov.any(axis=0).all():
        bad = int(np.flatnonzero(~cov.any(axis=0))[0])
        raise MergeError(f"query {bad} has no attended key in any partial")
    L = np.stack([p.L for p in parts])
    m = np.max(np.where(cov, L, -np.inf), axis=0)
    weights = np.where(cov, np.exp(np.where(cov, L, 0.0) - m[None, :]), 0.0)
    denom = weights.sum(axis=0)
    out = np.zeros_like(parts[0].O)
    for p_idx, p in enumerate(parts):
        out += weights[p_idx][:, None] * p.O
    return out / denom[:, None]


def merge(a: PartialAttention, b: PartialAttention) -> np.ndarray:
    """Two-pass exact merge: o = (e^{L_a} o_a + e^{L_b} o_b) / (e^{L_a} + e^{L_b})."""
    return merge_partials([a, b])


def sparse_attention(inp: AttentionInputs, spec: MaskSpec) -> np.ndarray:
    """Sparse execution of the hard mask, exactly equal to the masked oracle.

    k = 1 runs the two-pass split (group segments + cross-group local); for
    k >= 2 the residual pass covers distant pairs that share only
    non-primary memberships, keeping the pass union identical to the
    top-k mask while the passes stay pairwise disjoint.
    """
    perm = group_permutation(spec.assignment.primary, spec.assignment.num_groups)
    parts = [group_pass(inp, perm), local_pass(inp, spec)]
    if spec.k > 1:
        parts.append(residual_pass(inp, spec))
    return merge_partials(parts)


def masked_reference(inp: AttentionInputs, M: np.ndarray) -> np.ndarray:
    """Naive O(T^2) masked attention; ground truth for all exactness tests.

    Deliberately independent of the pass machinery: plain dense logits,
    max-shifted exp on attended entries, one normalization.
    """
    q, k, v = np.asarray(inp.q), np.asarray(inp.k), np.asarray(inp.v)
    M = np.asarray(M, dtype=bool)
    T, d_h = q.shape
    if M.shape != (T, T):
        raise ShapeError(f"mask must be ({T}, {T}), got {M.shape}")
    if not M.any(axis=1).all():
        raise ShapeError("masked_reference: a query row attends nothing")
    logits = (q @ k.T) / np.sqrt(d_h)
    shifted = np.where(M, logits, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.where(M, np.exp(shifted), 0.0)
    return (e / e.sum(axis=1, keepdims=True)) @ v


# ---------------------------------------------------------------------------
# Exact pair counting (no T x T materialization; used by the cost model)


def _signature_counts(assignment: HardAssignment) -> tuple[np.ndarray, np.ndarray]:
    bits = assignment.membership_bits()
    return np.unique(bits, return_counts=True)


def _count_causal_sharing(assignment: HardAssignment) -> int:
    """Causal pairs (diagonal included) whose membership sets intersect."""
    sigs, counts = _signature_counts(assignment)
    total = 0
    for a in range(sigs.shape[0]):
        na = int(counts[a])
        total += na * (na + 1) // 2  # same signature always shares
        for b in range(a + 1, sigs.shape[0]):
            if sigs[a] & sigs[b]:
                total += na * int(counts[b])
    return total


def pair_counts(spec: MaskSpec) -> dict[str, int]:
    """Exact sizes of the executed pass sets (and of the full mask).

    Set A counts same-primary causal pairs, set B cross-primary local pairs,
    and the residual set distant cross-primary sharing pairs; their sum is
    the number of attended pairs because the sets partition the mask.
    """
    T, w = spec.T, min(spec.window, spec.T - 1)
    g = spec.assignment.primary
    counts = np.bincount(g, minlength=spec.assignment.num_groups).astype(np.int64)
    pairs_a = int(np.sum(counts * (counts + 1) // 2))
    pairs_b = 0
    same_primary_local = T  # offset 0: every token matches itself
    for d in range(1, w + 1):
        same = g[d:] == g[:-d]
        pairs_b += int(np.sum(~same))
        same_primary_local += int(np.sum(same))
    pairs_residual = 0
    if spec.k > 1:
        bits = spec.assignment.membership_bits()
        share_causal = _count_causal_sharing(spec.assignment)
        share_local = T
        for d in range(1, w + 1):
            share_local += int(np.sum((bits[d:] & bits[:-d]) != 0))
        same_primary_distant = pairs_a - same_primary_local
        pairs_residual = share_causal - share_local - same_primary_distant
    return {
        "pairs_A": pairs_a,
        "pairs_B": pairs_b,
        "pairs_residual": pairs_residual,
        "attended_pairs": pairs_a + pairs_b + pairs_residual,
    }


def pair_cost(spec: MaskSpec) -> dict[str, float]:
    """Pair-count cost model: full causal pairs vs executed sparse pairs."""
    full_pairs = spec.T * (spec.T + 1) // 2
    focus_pairs = pair_counts(spec)["attended_pairs"]
    return {
        "full_pairs": full_pairs,
        "focus_pairs": focus_pairs,
        "ratio": full_pairs / focus_pairs,
    }


def closed_form_cost_model(spec: MaskSpec) -> float:
    """Predicted pair ratio: full / (sum_g n_g(n_g+1)/2 + ~T*w cross-group local)."""
    T, w, K = spec.T, spec.window, spec.assignment.num_groups
    counts = np.bincount(spec.assignment.primary, minlength=K).astype(np.int64)
    same_group = float(np.sum(counts * (counts + 1) // 2))
    local_cross = w * T * (K - 1) / K
    full_pairs = T * (T + 1) / 2
    return full_pairs / (same_group + local_cross)


def retained_distant_fraction(spec: MaskSpec) -> float:
    """Fraction of distant causal pairs (i - j > window) kept by the mask."""
    T, w = spec.T, spec.window
    if T - 1 <= w:
        return 1.0
    n = T - 1 - w
    total_distant = n * (n + 1) // 2
    bits = spec.assignment.membership_bits()
    kept = 0
    for d in range(w + 1, T):
        kept += int(np.sum((bits[d:] & bits[:-d]) != 0))
    return kept / total_distant
