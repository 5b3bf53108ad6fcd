"""Group-gated sparse attention at desk scale.

Centroid routing with balanced (alternating-normalization) soft assignments,
a group-gated training attention path, an exactness-verified sparse
inference decomposition, collapse diagnostics, and a toy two-phase training
lab, all on a small deterministic numpy substrate.
"""

from .autodiff import Tensor, backward
from .gated import AttentionInputs, full_attention, gated_attention_soft
from .linalg import logsumexp_rows, matmul, row_softmax
from .metrics import confidence, dominance, long_range_pairs, stability
from .routing import (
    CentroidBank,
    HardAssignment,
    affinity,
    harden,
    init_bank,
    route_scores,
    sinkhorn_normalize,
    softmax_normalize,
)
from .sparse import (
    MaskSpec,
    PartialAttention,
    build_mask,
    masked_reference,
    merge,
    pair_cost,
    sparse_attention,
    split_pairs,
)
from .model import ToyModelConfig, balance_loss
from .train import TrainConfig, collapse_experiment, train_phase

__version__ = "0.1.0"

__all__ = [
    "AttentionInputs",
    "CentroidBank",
    "HardAssignment",
    "MaskSpec",
    "PartialAttention",
    "Tensor",
    "ToyModelConfig",
    "TrainConfig",
    "affinity",
    "backward",
    "balance_loss",
    "build_mask",
    "collapse_experiment",
    "confidence",
    "dominance",
    "full_attention",
    "gated_attention_soft",
    "harden",
    "init_bank",
    "logsumexp_rows",
    "long_range_pairs",
    "masked_reference",
    "matmul",
    "merge",
    "pair_cost",
    "route_scores",
    "row_softmax",
    "sinkhorn_normalize",
    "softmax_normalize",
    "sparse_attention",
    "split_pairs",
    "stability",
    "train_phase",
]
