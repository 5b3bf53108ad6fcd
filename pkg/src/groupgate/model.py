"""Character-level transformer with a routed, group-gated attention layer.

Small enough to finite-difference end to end, complete enough to show the
balance-vs-collapse dynamics: every attention layer routes its (normalized)
inputs through a centroid bank, normalizes the routing scores with either
the balanced alternating scheme or plain softmax, and gates distant
attention logits with the resulting group affinities.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import tensorio
from .gated import AttentionInputs, gated_attention_soft
from .routing import CentroidBank, route_scores, sinkhorn_normalize, softmax_normalize

SINKHORN = "sinkhorn"
SOFTMAX_BALANCE = "softmax_with_balance_loss"

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class ToyModelConfig:
    vocab: int = 256
    d: int = 64
    layers: int = 2
    heads: int = 2
    T: int = 128
    window: int = 128
    K: int = 8
    d_g: int = 16
    tau: float = 0.1
    lam: float = 10.0
    gate_offset: float = 0.5
    sinkhorn_iters: int = 10
    normalization: str = SINKHORN
    balance_weight: float = 0.01
    entropy_weight: float = 0.001
    balance_times5: bool = False
    ema_centroids: bool = False
    ema_decay: float = 0.99
    stop_gradient_inputs: bool = False
    recluster_every: int = 0
    init_scale: float = 0.02

    def __post_init__(self) -> None:
        if self.d % self.heads != 0:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.T < self.window:
            raise ValueError(f"need T >= window, got T={self.T}, window={self.window}")
        if self.normalization not in (SINKHORN, SOFTMAX_BALANCE):
            raise ValueError(f"unknown normalization '{self.normalization}'")
        if self.vocab < 2:
            raise ValueError("vocab must be at least 2")

    @classmethod
    def from_dict(cls, data: dict) -> "ToyModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


def init_params(cfg: ToyModelConfig, rng: np.random.Generator) -> dict[str, ad.Tensor]:
    """Fresh parameter set; routing parameters live under 'layer{i}.route.'."""
    s = cfg.init_scale
    p: dict[str, np.ndarray] = {
        "embed.tok": s * rng.standard_normal((cfg.vocab, cfg.d)),
        "embed.pos": s * rng.standard_normal((cfg.T, cfg.d)),
    }
    for i in range(cfg.layers):
        pre = f"layer{i}."
        p[pre + "ln1.g"] = np.ones((1, cfg.d))
        p[pre + "ln1.b"] = np.zeros((1, cfg.d))
        for name in ("wq", "wk", "wv", "wo"):
            p[pre + "attn." + name] = s * rng.standard_normal((cfg.d, cfg.d))
        p[pre + "route.C"] = s * rng.standard_normal((cfg.K, cfg.d_g))
        p[pre + "route.Wg"] = s * rng.standard_normal((cfg.d, cfg.d_g))
        p[pre + "ln2.g"] = np.ones((1, cfg.d))
        p[pre + "ln2.b"] = np.zeros((1, cfg.d))
        p[pre + "ffn.w1"] = s * rng.standard_normal((cfg.d, 4 * cfg.d))
        p[pre + "ffn.b1"] = np.zeros((1, 4 * cfg.d))
        p[pre + "ffn.w2"] = s * rng.standard_normal((4 * cfg.d, cfg.d))
        p[pre + "ffn.b2"] = np.zeros((1, cfg.d))
    p["final_ln.g"] = np.ones((1, cfg.d))
    p["final_ln.b"] = np.zeros((1, cfg.d))
    p["unembed"] = s * rng.standard_normal((cfg.d, cfg.vocab))
    return {name: ad.parameter(value, name) for name, value in p.items()}


def is_routing_param(name: str) -> bool:
    return ".route." in name


def _layernorm(x: ad.Tensor, g: ad.Tensor, b: ad.Tensor, eps: float = 1e-5) -> ad.Tensor:
    d = x.shape[1]
    mu = ad.mul(ad.tsum(x, axis=1), 1.0 / d)
    xc = ad.sub(x, mu)
    var = ad.mul(ad.tsum(ad.mul(xc, xc), axis=1), 1.0 / d)
    inv = ad.pow_const(ad.add(var, eps), -0.5)
    return ad.add(ad.mul(ad.mul(xc, inv), g), b)


def layer_bank(params: dict[str, ad.Tensor], cfg: ToyModelConfig, layer: int) -> CentroidBank:
    """View of layer's routing parameters as a CentroidBank (tensors inside)."""
    C = params[f"layer{layer}.route.C"]
    if cfg.ema_centroids:
        C = ad.detach(C)  # EMA mode: gradient never moves the centroids
    return CentroidBank(
        K=cfg.K,
        d_g=cfg.d_g,
        d=cfg.d,
        C=C,
        W_g=params[f"layer{layer}.route.Wg"],
        tau=cfg.tau,
        lam=cfg.lam,
        gate_offset=cfg.gate_offset,
    )


def normalize_scores(S, cfg: ToyModelConfig):
    if cfg.normalization == SINKHORN:
        return sinkhorn_normalize(S, cfg.tau, cfg.sinkhorn_iters)
    return softmax_normalize(S, cfg.tau)


def forward_hidden(
    params: dict[str, ad.Tensor], cfg: ToyModelConfig, ids: np.ndarray
) -> tuple[ad.Tensor, list]:
    """Transformer trunk over one sequence of token ids.

    Returns the final hidden states plus, per layer, the soft assignment G
    and the routing inputs it was computed from (the EMA and recluster
    variants need the latter)."""
    ids = np.asarray(ids, dtype=np.intp)
    t = ids.shape[0]
    if t < 2 or t > cfg.T:
        raise ValueError(f"sequence length {t} out of range [2, {cfg.T}]")
    h = ad.add(
        ad.gather_rows(params["embed.tok"], ids),
        ad.gather_rows(params["embed.pos"], np.arange(t)),
    )
    d_h = cfg.d // cfg.heads
    assignments = []
    for i in range(cfg.layers):
        pre = f"layer{i}."
        a_in = _layernorm(h, params[pre + "ln1.g"], params[pre + "ln1.b"])
        route_in = ad.detach(a_in) if cfg.stop_gradient_inputs else a_in
        bank = layer_bank(params, cfg, i)
        G = normalize_scores(route_scores(route_in, bank), cfg)
        assignments.append({"G": G, "route_in": route_in})
        q_all = ad.matmul(a_in, params[pre + "attn.wq"])
        k_all = ad.matmul(a_in, params[pre + "attn.wk"])
        v_all = ad.matmul(a_in, params[pre + "attn.wv"])
        head_outs = []
        for hd in range(cfg.heads):
            j0, j1 = hd * d_h, (hd + 1) * d_h
            inp = AttentionInputs(
                q=ad.slice_cols(q_all, j0, j1),
                k=ad.slice_cols(k_all, j0, j1),
                v=ad.slice_cols(v_all, j0, j1),
                window=cfg.window,
            )
            head_outs.append(gated_attention_soft(inp, G, bank))  # one G shared across heads
        att = ad.matmul(ad.concat_cols(head_outs), params[pre + "attn.wo"])
        h = ad.add(h, att)
        f_in = _layernorm(h, params[pre + "ln2.g"], params[pre + "ln2.b"])
        up = ad.gelu(ad.add(ad.matmul(f_in, params[pre + "ffn.w1"]), params[pre + "ffn.b1"]))
        h = ad.add(h, ad.add(ad.matmul(up, params[pre + "ffn.w2"]), params[pre + "ffn.b2"]))
    return _layernorm(h, params["final_ln.g"], params["final_ln.b"]), assignments


def sequence_loss(
    params: dict[str, ad.Tensor], cfg: ToyModelConfig, ids: np.ndarray
) -> tuple[ad.Tensor, list]:
    """Next-token cross-entropy for one sequence (inputs ids[:-1], targets ids[1:])."""
    ids = np.asarray(ids, dtype=np.intp)
    h, assignments = forward_hidden(params, cfg, ids[:-1])
    logits = ad.matmul(h, params["unembed"])
    lse = ad.logsumexp_rows_t(logits)
    picked = ad.take_per_row(logits, ids[1:])
    return ad.tmean(ad.sub(lse, picked)), assignments


def balance_loss(G, weight: float, entropy_weight: float = 0.001):
    """Auxiliary balance penalty for the softmax baseline.

    weight * K * sum_g (mass_g / T - 1/K)^2, plus an entropy bonus
    -entropy_weight * mean row entropy that discourages prematurely hard
    assignments. Works on arrays or tape tensors.
    """
    if isinstance(G, ad.Tensor):
        T, K = G.shape
        frac = ad.mul(ad.tsum(G, axis=0), 1.0 / T)
        dev = ad.sub(frac, 1.0 / K)
        sq = ad.tsum(ad.mul(dev, dev))
        term = ad.mul(sq, weight * K)
        safe = ad.clamp_min(G, 1e-12)
        row_entropy = ad.mul(ad.tsum(ad.mul(safe, ad.log(safe))), -1.0 / T)
        return ad.sub(term, ad.mul(row_entropy, entropy_weight))
    G = np.asarray(G)
    T, K = G.shape
    frac = G.sum(axis=0) / T
    term = weight * K * float(np.sum((frac - 1.0 / K) ** 2))
    safe = np.maximum(G, 1e-12)
    mean_entropy = float(-(safe * np.log(safe)).sum() / T)
    return term - entropy_weight * mean_entropy


def lm_loss(
    params: dict[str, ad.Tensor], cfg: ToyModelConfig, batch: np.ndarray
) -> tuple[ad.Tensor, list]:
    """Mean next-token loss over a (B, T) batch, plus each sequence's assignments.

    In softmax mode the balance/entropy auxiliary is added per layer (the
    structural scheme needs no auxiliary)."""
    batch = np.asarray(batch)
    if batch.ndim != 2:
        raise ValueError(f"batch must be (B, T), got {batch.shape}")
    losses = []
    all_assignments = []
    bw = cfg.balance_weight * (5.0 if cfg.balance_times5 else 1.0)
    for row in batch:
        loss, assignments = sequence_loss(params, cfg, row)
        if cfg.normalization == SOFTMAX_BALANCE:
            for layer_aux in assignments:
                loss = ad.add(loss, balance_loss(layer_aux["G"], bw, cfg.entropy_weight))
        losses.append(loss)
        all_assignments.append(assignments)
    total = losses[0]
    for extra in losses[1:]:
        total = ad.add(total, extra)
    return ad.mul(total, 1.0 / len(losses)), all_assignments


def save_checkpoint(path: str | Path, params: dict[str, ad.Tensor], cfg: ToyModelConfig, step: int) -> None:
    """Checkpoint = meta.json sidecar + one tensor dump per parameter."""
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    manifest = []
    for name, tensor in sorted(params.items()):
        fname = name.replace("/", "_") + ".ftns"
        tensorio.write_tensor(path / "params" / fname, tensor.value)
        manifest.append({"name": name, "file": fname, "shape": list(tensor.value.shape)})
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "step": step,
        "model_config": asdict(cfg),
        "params": manifest,
    }
    (path / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def load_checkpoint(path: str | Path) -> tuple[dict[str, ad.Tensor], ToyModelConfig, int]:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no checkpoint at {path} (missing meta.json)")
    meta = json.loads(meta_path.read_text())
    for key in ("format_version", "step", "model_config", "params"):
        if key not in meta:
            raise ValueError(f"corrupt checkpoint: meta.json missing field '{key}'")
    if meta["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"corrupt checkpoint: unsupported format_version {meta['format_version']}")
    cfg = ToyModelConfig.from_dict(meta["model_config"])
    params: dict[str, ad.Tensor] = {}
    for entry in meta["params"]:
        for key in ("name", "file", "shape"):
            if key not in entry:
                raise ValueError(f"corrupt checkpoint: param entry missing field '{key}'")
        arr = tensorio.read_tensor(path / "params" / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise ValueError(
                f"corrupt checkpoint: param '{entry['name']}' has shape {list(arr.shape)}, "
                f"manifest says {entry['shape']}"
            )
        params[entry["name"]] = ad.parameter(arr, entry["name"])
    return params, cfg, int(meta["step"])
