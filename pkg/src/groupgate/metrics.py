"""Routing diagnostics: dominance, stability, balance, group contents.

These are the quantities used to tell balanced routing apart from collapse
and to inspect what the learned groups contain.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from .linalg import as_matrix
from .routing import HardAssignment, affinity_matrix

_EXHAUSTIVE_RELABEL_LIMIT = 8


@dataclass
class GroupReport:
    """Summary of a routing state; serializes straight to JSON."""

    dominance: float
    balance: list[float]
    confidence: float
    stability: float | None = None
    top_tokens: list[list[tuple[str, int]]] = field(default_factory=list)
    purity: list[float] | None = None

    def to_dict(self) -> dict:
        return {
            "dominance": self.dominance,
            "balance": self.balance,
            "confidence": self.confidence,
            "stability": self.stability,
            "top_tokens": [[(tok, int(cnt)) for tok, cnt in grp] for grp in self.top_tokens],
            "purity": self.purity,
        }


def argmax_groups(G) -> np.ndarray:
    """Per-token argmax group, ties to the lower group id (np.argmax's rule)."""
    Gv = as_matrix(G if isinstance(G, np.ndarray) else G.value, "G")
    return np.argmax(Gv, axis=1)


def dominance(G) -> float:
    """Fraction of tokens whose argmax lands in the largest group; in [1/K, 1]."""
    groups = argmax_groups(G)
    K = (G if isinstance(G, np.ndarray) else G.value).shape[1]
    counts = np.bincount(groups, minlength=K)
    return float(counts.max() / groups.shape[0])


def balance(G) -> np.ndarray:
    """Per-group soft mass, normalized to sum to 1."""
    Gv = as_matrix(G if isinstance(G, np.ndarray) else G.value, "G")
    mass = Gv.sum(axis=0)
    return mass / mass.sum()


def confidence(G) -> float:
    """Mean over tokens of the max assignment weight."""
    Gv = as_matrix(G if isinstance(G, np.ndarray) else G.value, "G")
    return float(Gv.max(axis=1).mean())


def stability(prev: HardAssignment, curr: HardAssignment) -> float:
    """Primary-group agreement after the best group relabeling.

    Group identities may permute between snapshots without any real routing
    change, so agreement is maximized over bijections of group ids
    (exhaustively for K <= 8, Hungarian beyond).
    """
    a, b = prev.primary, curr.primary
    if a.shape != b.shape:
        raise ValueError(f"snapshots cover different token counts: {a.shape} vs {b.shape}")
    K = max(prev.num_groups, curr.num_groups)
    overlap = np.zeros((K, K), dtype=np.int64)
    np.add.at(overlap, (a, b), 1)
    if K <= _EXHAUSTIVE_RELABEL_LIMIT:
        rows = np.arange(K)
        best = max(int(overlap[rows, perm].sum()) for perm in permutations(range(K)))
    else:
        from scipy.optimize import linear_sum_assignment

        r, c = linear_sum_assignment(-overlap)
        best = int(overlap[r, c].sum())
    return best / a.shape[0]


def group_contents(
    token_ids: np.ndarray,
    primary: np.ndarray,
    num_groups: int,
    decode=None,
    categories: dict[str, str] | None = None,
    top_n: int = 6,
) -> tuple[list[list[tuple[str, int]]], list[float] | None]:
    """Frequency-ranked token lists per group, with optional category purity.

    ``decode`` maps a token id to a display string (defaults to byte repr);
    ``categories`` maps a decoded token to a category label; purity is each
    group's dominant-category share among categorized occurrences.
    """
    token_ids = np.asarray(token_ids)
    primary = np.asarray(primary)
    if token_ids.shape != primary.shape:
        raise ValueError("token ids and assignments must align one-to-one")
    if decode is None:
        decode = lambda t: repr(bytes([t]))[2:-1] if 0 <= t < 256 else str(t)
    top_tokens: list[list[tuple[str, int]]] = []
    purity: list[float] | None = [] if categories is not None else None
    for g in range(num_groups):
        toks = token_ids[primary == g]
        counts = Counter(decode(int(t)) for t in toks)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        top_tokens.append(ranked[:top_n])
        if categories is not None:
            cat_counts = Counter(
                categories[tok] for tok in (decode(int(t)) for t in toks) if tok in categories
            )
            total = sum(cat_counts.values())
            purity.append(max(cat_counts.values()) / total if total else 0.0)
    return top_tokens, purity


def long_range_pairs(
    G, positions: np.ndarray, window: int, threshold: float
) -> list[tuple[int, int, int, float]]:
    """Distant pairs (|pos_i - pos_j| > window) with affinity >= threshold.

    Returns (i, j, distance, affinity) tuples sorted by distance descending
    (then by indices, for determinism).
    """
    positions = np.asarray(positions)
    aff = affinity_matrix(G)
    if positions.shape[0] != aff.shape[0]:
        raise ValueError("positions must align with assignment rows")
    out = []
    T = positions.shape[0]
    for i in range(T):
        for j in range(i + 1, T):
            dist = int(abs(int(positions[i]) - int(positions[j])))
            if dist > window and aff[i, j] >= threshold:
                out.append((i, j, dist, float(aff[i, j])))
    out.sort(key=lambda t: (-t[2], t[0], t[1]))
    return out


def report(G, prev: HardAssignment | None = None, curr: HardAssignment | None = None) -> GroupReport:
    """Bundle the scalar diagnostics for a soft assignment."""
    stab = stability(prev, curr) if prev is not None and curr is not None else None
    return GroupReport(
        dominance=dominance(G),
        balance=[float(x) for x in balance(G)],
        confidence=confidence(G),
        stability=stab,
    )
