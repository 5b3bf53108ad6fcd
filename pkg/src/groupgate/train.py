"""Two-phase training protocol and the balance-vs-collapse experiment.

Phase 1 trains only the routing parameters with every original model weight
frozen; phase 2 fine-tunes everything. Runs log dominance / stability /
balance at a fixed cadence so the trajectory of a collapsing softmax run and
a structurally balanced run can be compared step for step.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import metrics as diag
from .model import (
    SINKHORN,
    SOFTMAX_BALANCE,
    ToyModelConfig,
    forward_hidden,
    init_params,
    is_routing_param,
    lm_loss,
)
from .rng import stream
from .routing import HardAssignment, column_balance_deviation, harden

CENTROID_ONLY = "centroid_only"
FULL_FT = "full_ft"

REPORT_FORMAT_VERSION = 1

# Reserved corpus symbols; everything above is filler vocabulary.
OPEN_TOKEN = 1
CLOSE_TOKEN = 2
ENTITY_TOKENS = tuple(range(3, 11))
FILLER_START = 11


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; the run is aborted with context."""


@dataclass
class TrainConfig:
    model: ToyModelConfig = field(default_factory=ToyModelConfig)
    seed: int = 0
    batch_size: int = 8
    phase1_steps: int = 2000
    phase2_steps: int = 1000
    eval_interval: int = 50
    corpus_sequences: int = 256
    # Learning rates are fixed per phase: adaptive steps on the routing
    # parameters first, then a gentler full fine-tune.
    lr_centroid: float = 3e-4
    lr_full: float = 1e-4

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        model = ToyModelConfig.from_dict(data.pop("model", {}))
        known = {f.name for f in fields(cls)} - {"model"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(model=model, **data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


@dataclass
class TrainState:
    cfg: TrainConfig
    params: dict[str, ad.Tensor]
    opt: AdamState
    corpus: np.ndarray
    eval_batch: np.ndarray
    batch_stream: np.random.Generator
    step: int = 0
    metrics: list[dict] = field(default_factory=list)
    prev_eval_hard: list[HardAssignment] | None = None


def make_corpus(cfg: ToyModelConfig, n_sequences: int, rng: np.random.Generator) -> np.ndarray:
    """Byte sequences with planted long-range dependencies.

    Filler follows a power law; each sequence plants entity echoes
    (marker ... same marker + copied payload at distance > window) and
    matched delimiter pairs with the same copy structure, so predicting the
    payload after the second marker rewards attending far beyond the local
    window."""
    if cfg.vocab <= FILLER_START + 4:
        raise ValueError(f"corpus needs vocab > {FILLER_START + 4}, got {cfg.vocab}")
    T = cfg.T
    filler = np.arange(FILLER_START, cfg.vocab)
    ranks = np.arange(1, filler.shape[0] + 1, dtype=np.float64)
    probs = (1.0 / ranks) / np.sum(1.0 / ranks)
    seqs = rng.choice(filler, size=(n_sequences, T), p=probs)
    min_gap = cfg.window + 2
    for row in seqs:
        n_plants = max(2, T // 24)
        for _ in range(n_plants):
            is_entity = rng.random() < 0.5
            if T - 4 <= min_gap:
                break
            gap = int(rng.integers(min_gap, T - 3))
            a = int(rng.integers(0, T - gap - 2))
            b = a + gap
            payload = int(rng.choice(filler, p=probs))
            if is_entity:
                marker = int(rng.choice(ENTITY_TOKENS))
                row[a], row[b] = marker, marker
            else:
                row[a], row[b] = OPEN_TOKEN, CLOSE_TOKEN
            row[a + 1], row[b + 1] = payload, payload
    return seqs.astype(np.intp)


def init_state(cfg: TrainConfig) -> TrainState:
    corpus = make_corpus(cfg.model, cfg.corpus_sequences + cfg.batch_size, stream(cfg.seed, "corpus"))
    params = init_params(cfg.model, stream(cfg.seed, "params"))
    return TrainState(
        cfg=cfg,
        params=params,
        opt=AdamState(),
        corpus=corpus[cfg.batch_size :],
        eval_batch=corpus[: cfg.batch_size],
        batch_stream=stream(cfg.seed, "batches"),
    )


def trainable_names(cfg: TrainConfig, phase: str) -> list[str]:
    if phase == CENTROID_ONLY:
        names = [n for n in sorted_param_names(cfg) if is_routing_param(n)]
    elif phase == FULL_FT:
        names = list(sorted_param_names(cfg))
    else:
        raise ValueError(f"unknown phase '{phase}'")
    if cfg.model.ema_centroids:
        names = [n for n in names if not n.endswith(".route.C")]
    return names


def sorted_param_names(cfg: TrainConfig) -> list[str]:
    names = ["embed.tok", "embed.pos", "final_ln.g", "final_ln.b", "unembed"]
    for i in range(cfg.model.layers):
        pre = f"layer{i}."
        names += [pre + "ln1.g", pre + "ln1.b", pre + "ln2.g", pre + "ln2.b"]
        names += [pre + "attn." + n for n in ("wq", "wk", "wv", "wo")]
        names += [pre + "route.C", pre + "route.Wg"]
        names += [pre + "ffn." + n for n in ("w1", "b1", "w2", "b2")]
    return sorted(names)


def adam_step(
    params: dict[str, ad.Tensor],
    names: list[str],
    opt: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Adam with decoupled weight decay fixed at 0. Untouched names keep
    their moments so phase switches do not reset optimizer memory."""
    opt.t += 1
    bc1 = 1.0 - beta1**opt.t
    bc2 = 1.0 - beta2**opt.t
    for name in names:
        g = params[name].grad
        if g is None:
            continue
        if name not in opt.m:
            opt.m[name] = np.zeros_like(params[name].value)
            opt.v[name] = np.zeros_like(params[name].value)
        opt.m[name] = beta1 * opt.m[name] + (1.0 - beta1) * g
        opt.v[name] = beta2 * opt.v[name] + (1.0 - beta2) * g * g
        update = (opt.m[name] / bc1) / (np.sqrt(opt.v[name] / bc2) + eps)
        params[name].value -= lr * update


def lm_forward(batch: np.ndarray, state: TrainState) -> float:
    """Batch loss value; aborts on non-finite loss."""
    loss, _ = lm_loss(state.params, state.cfg.model, batch)
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite loss at step {state.step}")
    return value


def _eval_assignments(state: TrainState) -> tuple[float, list[np.ndarray]]:
    """Eval-batch loss and per-layer stacked soft assignments (values only)."""
    cfg = state.cfg.model
    loss, per_seq = lm_loss(state.params, cfg, state.eval_batch)
    stacked = []
    for layer in range(cfg.layers):
        stacked.append(np.concatenate([seq[layer]["G"].value for seq in per_seq], axis=0))
    return loss.item(), stacked


def evaluate(state: TrainState, phase: str) -> dict:
    """Metrics row for the current step, from the fixed eval batch."""
    loss, per_layer = _eval_assignments(state)
    doms, stabs, bmm, col_devs, confs = [], [], [], [], []
    hard_now = []
    for layer, G in enumerate(per_layer):
        doms.append(diag.dominance(G))
        mass = diag.balance(G)
        bmm.append(float(mass.min() / mass.max()))
        col_devs.append(column_balance_deviation(G))
        confs.append(diag.confidence(G))
        hard = harden(G, 1)
        hard_now.append(hard)
        if state.prev_eval_hard is not None:
            stabs.append(diag.stability(state.prev_eval_hard[layer], hard))
    state.prev_eval_hard = hard_now
    row = {
        "step": state.step,
        "phase": phase,
        "loss": loss,
        "dominance": max(doms),
        "stability": float(np.mean(stabs)) if stabs else float("nan"),
        "balance_minmax": min(bmm),
        "column_deviation": max(col_devs),
        # overwritten with the logged step's training-batch deviation when a
        # training step follows this row (final row: no batch, stays nan)
        "column_deviation_train": float("nan"),
        "confidence": float(np.mean(confs)),
    }
    state.metrics.append(row)
    return row


def _ema_update_centroids(state: TrainState, batch: np.ndarray) -> None:
    """Move each centroid toward the mean projection of its argmax tokens."""
    cfg = state.cfg.model
    beta = 1.0 - cfg.ema_decay
    _, aux = forward_hidden(state.params, cfg, batch[0][:-1])
    for layer in range(cfg.layers):
        Wg = state.params[f"layer{layer}.route.Wg"].value
        proj = aux[layer]["route_in"].value @ Wg
        groups = np.argmax(aux[layer]["G"].value, axis=1)
        C = state.params[f"layer{layer}.route.C"].value
        for g in range(cfg.K):
            sel = groups == g
            if sel.any():
                C[g] = (1.0 - beta) * C[g] + beta * proj[sel].mean(axis=0)


def _recluster_centroids(state: TrainState) -> None:
    """Replace centroids with k-means centers of held-out batch projections."""
    cfg = state.cfg.model
    rng = stream(state.cfg.seed, f"recluster.{state.step}")
    _, aux = forward_hidden(state.params, cfg, state.eval_batch[0][:-1])
    for layer in range(cfg.layers):
        Wg = state.params[f"layer{layer}.route.Wg"].value
        points = aux[layer]["route_in"].value @ Wg
        C = state.params[f"layer{layer}.route.C"].value
        centers = points[rng.choice(points.shape[0], size=cfg.K, replace=False)].copy()
        for _ in range(10):
            d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            owner = np.argmin(d2, axis=1)
            for g in range(cfg.K):
                sel = owner == g
                if sel.any():
                    centers[g] = points[sel].mean(axis=0)
        C[:] = centers


def train_phase(state: TrainState, phase: str, steps: int) -> TrainState:
    """Run gradient steps for one phase, logging at the eval cadence.

    ``centroid_only`` updates only routing parameters; every other weight is
    bitwise untouched (frozen weights also drop off the tape, which keeps
    phase 1 cheap). ``full_ft`` updates everything."""
    cfg = state.cfg
    names = trainable_names(cfg, phase)
    tracked = set(names)
    for name, p in state.params.items():
        p.requires_grad = name in tracked
    lr = cfg.lr_centroid if phase == CENTROID_ONLY else cfg.lr_full
    for _ in range(steps):
        logged = state.step % cfg.eval_interval == 0
        if logged:
            evaluate(state, phase)
        batch_idx = state.batch_stream.integers(0, state.corpus.shape[0], size=cfg.batch_size)
        batch = state.corpus[batch_idx]
        loss, aux = lm_loss(state.params, cfg.model, batch)
        if logged:
            # the logged row also carries this step's training-batch balance:
            # per layer, column sums of the batch's stacked assignments
            devs = []
            for layer in range(cfg.model.layers):
                stacked = np.concatenate([seq_aux[layer]["G"].value for seq_aux in aux], axis=0)
                devs.append(column_balance_deviation(stacked))
            state.metrics[-1]["column_deviation_train"] = max(devs)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(
                f"non-finite loss at step {state.step} (phase {phase}); aborting run"
            )
        for p in state.params.values():
            p.zero_grad()
        ad.backward(loss)
        adam_step(state.params, names, state.opt, lr)
        if cfg.model.ema_centroids:
            _ema_update_centroids(state, batch)
        if cfg.model.recluster_every and state.step > 0 and state.step % cfg.model.recluster_every == 0:
            _recluster_centroids(state)
        state.step += 1
    for p in state.params.values():
        p.requires_grad = True
    return state


def pathway_flags(cfg: ToyModelConfig, phase: str) -> dict[str, bool]:
    """Which dominance escape routes are live: centroid drift (A),
    representational bypass (B, hidden states; full fine-tune only), and
    projection bypass (C, the routing projection)."""
    return {
        "A_centroid_drift": not cfg.ema_centroids,
        "B_representational_bypass": phase == FULL_FT and not cfg.stop_gradient_inputs,
        "C_projection_bypass": True,
    }


def run_training(cfg: TrainConfig, regime: str) -> TrainState:
    """One pipeline: either all-steps centroid-only, or phase 1 + full phase 2."""
    state = init_state(cfg)
    if regime == CENTROID_ONLY:
        train_phase(state, CENTROID_ONLY, cfg.phase1_steps + cfg.phase2_steps)
        final_phase = CENTROID_ONLY
    elif regime == FULL_FT:
        train_phase(state, CENTROID_ONLY, cfg.phase1_steps)
        train_phase(state, FULL_FT, cfg.phase2_steps)
        final_phase = FULL_FT
    else:
        raise ValueError(f"unknown regime '{regime}'")
    evaluate(state, final_phase)
    return state


def collapse_experiment(cfg: TrainConfig) -> dict:
    """2x2 grid {sinkhorn, softmax+balance} x {centroid-only, two-phase full}.

    All four runs share seed, corpus and initial parameters; the verdict
    table reports final dominance/stability per cell."""
    runs = {}
    verdict: dict[str, dict] = {}
    for norm in (SINKHORN, SOFTMAX_BALANCE):
        verdict[norm] = {}
        for regime in (CENTROID_ONLY, FULL_FT):
            model_cfg = ToyModelConfig.from_dict({**asdict(cfg.model), "normalization": norm})
            run_cfg = TrainConfig.from_dict({**cfg.to_dict(), "model": asdict(model_cfg)})
            state = run_training(run_cfg, regime)
            name = f"{norm}.{regime}"
            phases = [CENTROID_ONLY] if regime == CENTROID_ONLY else [CENTROID_ONLY, FULL_FT]
            runs[name] = {
                "normalization": norm,
                "regime": regime,
                "metrics": state.metrics,
                "pathways": {ph: pathway_flags(model_cfg, ph) for ph in phases},
            }
            final = state.metrics[-1]
            verdict[norm][regime] = {
                "dominance": final["dominance"],
                "stability": final["stability"],
            }
    return {
        "format_version": REPORT_FORMAT_VERSION,
        "config": cfg.to_dict(),
        "runs": runs,
        "verdict": verdict,
    }


def metrics_to_csv_rows(rows: list[dict]) -> list[list]:
    header = ["step", "loss", "dominance", "stability", "balance_minmax"]
    out = [header]
    for row in rows:
        out.append([row["step"], row["loss"], row["dominance"], row["stability"], row["balance_minmax"]])
    return out


def write_metrics_csv(rows: list[dict], path: str | Path) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerows(metrics_to_csv_rows(rows))


def summary_dict(state: TrainState) -> dict:
    return {
        "format_version": REPORT_FORMAT_VERSION,
        "config": state.cfg.to_dict(),
        "steps": state.step,
        "final": state.metrics[-1] if state.metrics else None,
        "metrics": state.metrics,
    }
