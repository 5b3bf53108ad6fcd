"""Centroid routing: scores, balanced soft assignments, hard memberships.

Tokens are projected into a low-dimensional routing space and scored against
learnable centroids. Soft assignments are produced either by alternating
(Sinkhorn) normalization, which structurally balances group mass, or by the
plain row-softmax baseline, which is free to collapse. Hard top-k
memberships drive the sparse inference path.

``route_scores``, ``sinkhorn_normalize`` and ``softmax_normalize`` accept
either plain arrays (inference, diagnostics) or autodiff tensors (training,
where the normalization steps are unrolled onto the tape).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import linalg, tensorio

SINKHORN_FLOOR = 1e-30  # keeps extremely peaked kernels away from 0/0


def _val(x) -> np.ndarray:
    return x.value if isinstance(x, ad.Tensor) else np.asarray(x)


@dataclass
class CentroidBank:
    """Per-layer routing parameters.

    ``C`` is the (K, d_g) centroid matrix, ``W_g`` the (d, d_g) projection.
    ``gate_offset`` recenters the gate's sigmoid: the gate evaluates
    sigmoid(lam * (affinity - gate_offset)), so with the default offset 0.5
    orthogonal groups gate almost fully closed; offset 0 keeps the sigmoid
    centered at zero affinity instead.
    """

    K: int
    d_g: int
    d: int
    C: object  # (K, d_g) ndarray or autodiff Tensor
    W_g: object  # (d, d_g) ndarray or autodiff Tensor
    tau: float = 0.1
    lam: float = 10.0
    gate_offset: float = 0.5

    def __post_init__(self) -> None:
        if self.K < 2:
            raise ValueError(f"need K >= 2 groups, got {self.K}")
        if not (1 <= self.d_g <= self.d):
            raise ValueError(f"need 1 <= d_g <= d, got d_g={self.d_g}, d={self.d}")
        if self.tau <= 0 or self.lam <= 0:
            raise ValueError("tau and lam must be positive")
        if _val(self.C).shape != (self.K, self.d_g):
            raise linalg.ShapeError(f"C must be ({self.K}, {self.d_g})")
        if _val(self.W_g).shape != (self.d, self.d_g):
            raise linalg.ShapeError(f"W_g must be ({self.d}, {self.d_g})")

    def param_count(self) -> int:
        """Routing parameters added per layer: K*d_g centroids + d*d_g projection."""
        return self.K * self.d_g + self.d * self.d_g


def init_bank(
    d: int,
    K: int,
    d_g: int,
    rng: np.random.Generator,
    tau: float = 0.1,
    lam: float = 10.0,
    gate_offset: float = 0.5,
    scale: float = 0.02,
) -> CentroidBank:
    """Fresh bank with small-normal centroid and projection weights."""
    C = scale * rng.standard_normal((K, d_g))
    W_g = scale * rng.standard_normal((d, d_g))
    return CentroidBank(K=K, d_g=d_g, d=d, C=C, W_g=W_g, tau=tau, lam=lam, gate_offset=gate_offset)


@dataclass(frozen=True)
class HardAssignment:
    """Top-k group memberships per token; ``primary`` is topk[:, 0]."""

    topk: np.ndarray  # (T, k) int group ids, descending weight
    primary: np.ndarray  # (T,) int
    num_groups: int

    @property
    def k(self) -> int:
        return self.topk.shape[1]

    def membership_bits(self) -> np.ndarray:
        """Per-token bitmask of memberships (group g -> bit g); K <= 64."""
        bits = np.zeros(self.topk.shape[0], dtype=np.uint64)
        for col in range(self.topk.shape[1]):
            bits |= np.uint64(1) << self.topk[:, col].astype(np.uint64)
        return bits


def route_scores(H, bank: CentroidBank):
    """Raw routing scores S = (H @ W_g) @ C^T, untempered."""
    if isinstance(H, ad.Tensor) or isinstance(bank.W_g, ad.Tensor) or isinstance(bank.C, ad.Tensor):
        h = ad.as_tensor(H)
        proj = ad.matmul(h, ad.as_tensor(bank.W_g))
        return ad.matmul(proj, ad.transpose(ad.as_tensor(bank.C)))
    H = linalg.as_matrix(H, "H")
    if H.shape[1] != bank.d:
        raise linalg.ShapeError(f"H has {H.shape[1]} columns, bank expects d={bank.d}")
    return linalg.matmul(linalg.matmul(H, bank.W_g), np.asarray(bank.C).T)


def sinkhorn_normalize(S, tau: float, n_iters: int):
    """Alternating column/row normalization of exp(S / tau).

    Each iteration divides by column sums (token dimension) and then by row
    sums (group dimension); ending on the row pass leaves every token with a
    proper distribution while column sums approach T/K. The per-matrix max
    of S/tau is subtracted before exponentiation (the result is invariant to
    that shift), and entries are floored at 1e-30 so peaked low-temperature
    kernels cannot divide by zero.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if n_iters < 1:
        raise ValueError("need at least one normalization iteration")
    if isinstance(S, ad.Tensor):
        scaled = ad.div(S, float(tau))
        shift = float(np.max(scaled.value))  # constant shift; no gradient needed
        Q = ad.clamp_min(ad.exp(ad.sub(scaled, shift)), SINKHORN_FLOOR)
        for _ in range(n_iters):
            Q = ad.div(Q, ad.tsum(Q, axis=0))
            Q = ad.div(Q, ad.tsum(Q, axis=1))
        return Q
    S = linalg.as_matrix(S, "S")
    scaled = S / tau
    Q = np.exp(scaled - scaled.max())
    Q = np.maximum(Q, SINKHORN_FLOOR)
    for _ in range(n_iters):
        Q = Q / Q.sum(axis=0, keepdims=True)
        Q = Q / Q.sum(axis=1, keepdims=True)
    return linalg.check_finite(Q, "sinkhorn output")


def softmax_normalize(S, tau: float):
    """Per-row softmax of S / tau; no column constraint (collapse-prone baseline)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    if isinstance(S, ad.Tensor):
        ones = np.ones(S.shape, dtype=bool)
        return ad.masked_row_softmax_t(S, ones, scale=1.0 / tau)
    S = linalg.as_matrix(S, "S")
    return linalg.row_softmax(S, scale=1.0 / tau)


def harden(G, k: int) -> HardAssignment:
    """Top-k memberships by assignment weight; ties go to the lower group id."""
    Gv = linalg.as_matrix(_val(G), "G")
    K = Gv.shape[1]
    if not (1 <= k <= K):
        raise ValueError(f"need 1 <= k <= K={K}, got k={k}")
    # Stable sort on negated weights: equal weights keep ascending column
    # order, which is exactly the lower-index tie-break.
    order = np.argsort(-Gv, axis=1, kind="stable")
    topk = order[:, :k].copy()
    return HardAssignment(topk=topk, primary=topk[:, 0].copy(), num_groups=K)


def affinity(G, i: int, j: int) -> float:
    """Dot product of assignment rows i and j; in [0, 1] for distributions."""
    Gv = _val(G)
    T = Gv.shape[0]
    if not (0 <= i < T and 0 <= j < T):
        raise IndexError(f"token index out of range (T={T})")
    return float(Gv[i] @ Gv[j])


def affinity_matrix(G) -> np.ndarray:
    """All pairwise assignment dot products, G @ G^T."""
    Gv = linalg.as_matrix(_val(G), "G")
    return Gv @ Gv.T


def row_sum_error(G) -> float:
    """Max |row sum - 1| (soft assignments should be per-token distributions)."""
    Gv = _val(G)
    return float(np.abs(Gv.sum(axis=1) - 1.0).max())


def column_balance_deviation(G) -> float:
    """Max relative deviation of column sums from the balanced value T/K."""
    Gv = _val(G)
    target = Gv.shape[0] / Gv.shape[1]
    return float(np.abs(Gv.sum(axis=0) - target).max() / target)


def save_bank(bank: CentroidBank, prefix: str | Path, sinkhorn_iters: int = 10) -> None:
    """Write <prefix>.json plus centroid/projection tensor dumps."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    tensorio.write_tensor(prefix.with_suffix(".C.ftns"), _val(bank.C))
    tensorio.write_tensor(prefix.with_suffix(".Wg.ftns"), _val(bank.W_g))
    sidecar = {
        "K": bank.K,
        "d_g": bank.d_g,
        "d": bank.d,
        "tau": bank.tau,
        "lam": bank.lam,
        "gate_offset": bank.gate_offset,
        "sinkhorn_iters": sinkhorn_iters,
    }
    prefix.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")


def load_bank(prefix: str | Path) -> tuple[CentroidBank, int]:
    prefix = Path(prefix)
    sidecar = json.loads(prefix.with_suffix(".json").read_text())
    for key in ("K", "d_g", "d", "tau", "lam", "gate_offset", "sinkhorn_iters"):
        if key not in sidecar:
            raise ValueError(f"bank sidecar missing field '{key}'")
    bank = CentroidBank(
        K=int(sidecar["K"]),
        d_g=int(sidecar["d_g"]),
        d=int(sidecar["d"]),
        C=tensorio.read_tensor(prefix.with_suffix(".C.ftns")),
        W_g=tensorio.read_tensor(prefix.with_suffix(".Wg.ftns")),
        tau=float(sidecar["tau"]),
        lam=float(sidecar["lam"]),
        gate_offset=float(sidecar["gate_offset"]),
    )
    return bank, int(sidecar["sinkhorn_iters"])
