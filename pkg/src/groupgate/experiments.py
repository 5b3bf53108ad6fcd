"""Verification grid and cost benchmark behind the CLI.

``run_verify_grid`` sweeps sparse-execution configurations, checking the
decomposed path against the masked dense oracle (max-abs error, per-row
cosine) and brute-forcing the disjoint-cover property at small T. A fault
injection mode deliberately double-counts same-group local pairs to prove
the harness catches violations.
"""

from __future__ import annotations

import time

import numpy as np

from .gated import AttentionInputs
from .rng import stream
from .routing import harden, softmax_normalize
from .sparse import (
    MaskSpec,
    build_mask,
    closed_form_cost_model,
    fast_path_mask,
    group_pass,
    group_permutation,
    local_pass,
    masked_reference,
    merge_partials,
    pair_cost,
    pair_counts,
    residual_mask,
    residual_pass,
    retained_distant_fraction,
    sparse_attention,
)

REPORT_FORMAT_VERSION = 1

DEFAULT_T = (8, 16, 32, 64, 128, 256)
DEFAULT_K = (2, 4, 8)
DEFAULT_W = (1, 4, 16, 128)
DEFAULT_TOPK = ("1", "2", "K")

MAX_ABS_TOL = 1e-10
ROW_COSINE_TOL = 1e-9
DISJOINT_BRUTE_FORCE_T = 64

FAULT_DOUBLE_COUNT = "double_count_local"


def _random_case(T: int, K: int, w: int, k: int, rng: np.random.Generator):
    d_h = 16
    q = rng.standard_normal((T, d_h))
    kk = rng.standard_normal((T, d_h))
    v = rng.standard_normal((T, d_h))
    scores = rng.standard_normal((T, K))
    assignment = harden(softmax_normalize(scores, 1.0), k)
    return AttentionInputs(q=q, k=kk, v=v, window=w), MaskSpec(T=T, window=w, assignment=assignment)


def _row_cosines(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    num = (a * b).sum(axis=1)
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    return num / np.where(den == 0.0, 1.0, den)


def _pass_masks(spec: MaskSpec) -> list[np.ndarray]:
    """Boolean pair sets actually executed, for brute-force cover checks."""
    T = spec.T
    g = spec.assignment.primary
    diff = np.arange(T)[:, None] - np.arange(T)[None, :]
    causal = diff >= 0
    same = g[:, None] == g[None, :]
    masks = [causal & same, causal & ~same & (diff <= spec.window)]
    if spec.k > 1:
        masks.append(residual_mask(spec))
    return masks


def _sparse_with_fault(inp: AttentionInputs, spec: MaskSpec) -> np.ndarray:
    """The deliberately broken path: local pass keeps same-group pairs too."""
    perm = group_permutation(spec.assignment.primary, spec.assignment.num_groups)
    parts = [group_pass(inp, perm), local_pass(inp, spec, include_same_group=True)]
    if spec.k > 1:
        parts.append(residual_pass(inp, spec))
    return merge_partials(parts)


def run_verify_grid(
    Ts=DEFAULT_T,
    Ks=DEFAULT_K,
    ws=DEFAULT_W,
    topks=DEFAULT_TOPK,
    n_seeds: int = 10,
    seed: int = 0,
    inject_fault: str | None = None,
) -> dict:
    """Exactness sweep; the report carries per-case errors and a verdict."""
    cases = []
    violated: set[str] = set()
    for T in Ts:
        for K in Ks:
            k_values = sorted({K if spec == "K" else int(spec) for spec in topks})
            for w in ws:
                for k in k_values:
                    if k > K:
                        continue
                    for s in range(n_seeds):
                        rng = stream(seed, f"verify.{T}.{K}.{w}.{k}.{s}")
                        inp, spec = _random_case(T, K, w, k, rng)
                        mask = build_mask(spec)
                        reference = masked_reference(inp, mask)
                        if inject_fault == FAULT_DOUBLE_COUNT:
                            out = _sparse_with_fault(inp, spec)
                        elif inject_fault is None:
                            out = sparse_attention(inp, spec)
                        else:
                            raise ValueError(f"unknown fault mode '{inject_fault}'")
                        max_abs = float(np.abs(out - reference).max())
                        min_cos = float(_row_cosines(out, reference).min())
                        counts = pair_counts(spec)
                        case = {
                            "T": T,
                            "K": K,
                            "window": w,
                            "topk": k,
                            "seed": s,
                            "max_abs_err": max_abs,
                            "min_row_cosine": min_cos,
                            "pairs_A": counts["pairs_A"],
                            "pairs_B": counts["pairs_B"],
                            "pairs_residual": counts["pairs_residual"],
                            "fast_path_exact": bool((fast_path_mask(spec) == mask).all()),
                        }
                        if T <= DISJOINT_BRUTE_FORCE_T:
                            masks = _pass_masks(spec)
                            if inject_fault == FAULT_DOUBLE_COUNT:
                                masks[1] = masks[1] | (
                                    masks[0]
                                    & (
                                        np.arange(T)[:, None] - np.arange(T)[None, :]
                                        <= spec.window
                                    )
                                )
                            union = np.zeros_like(mask)
                            overlap = False
                            for m in masks:
                                overlap = overlap or bool((union & m).any())
                                union |= m
                            case["disjoint_ok"] = (not overlap) and bool((union == mask).all())
                        else:
                            case["disjoint_ok"] = None
                        exact_ok = max_abs < MAX_ABS_TOL and min_cos >= 1.0 - ROW_COSINE_TOL
                        cover_ok = case["disjoint_ok"] in (True, None)
                        case["passed"] = exact_ok and cover_ok
                        if not exact_ok:
                            violated.add("exactness")
                        if not cover_ok:
                            violated.add("disjoint_cover")
                        cases.append(case)
    failures = sum(1 for c in cases if not c["passed"])
    return {
        "format_version": REPORT_FORMAT_VERSION,
        "config": {
            "T": list(Ts),
            "K": list(Ks),
            "window": list(ws),
            "topk": list(topks),
            "seeds": n_seeds,
            "seed": seed,
            "inject_fault": inject_fault,
            "max_abs_tol": MAX_ABS_TOL,
            "row_cosine_tol": ROW_COSINE_TOL,
        },
        "cases": cases,
        "summary": {
            "cases": len(cases),
            "failures": failures,
            "all_pass": failures == 0,
            "violated_invariants": sorted(violated),
            "max_abs_err": max(c["max_abs_err"] for c in cases),
            "min_row_cosine": min(c["min_row_cosine"] for c in cases),
        },
    }


def _balanced_assignment(T: int, K: int, k: int, rng: np.random.Generator):
    scores = rng.standard_normal((T, K))
    return harden(softmax_normalize(scores, 1.0), k)


def run_bench(
    Ts=(1024, 4096, 16384, 65536),
    K: int = 8,
    k: int = 1,
    w: int = 128,
    seed: int = 0,
    dtype: str = "f64",
    oracle_limit: int = 8192,
    repeats: int = 3,
) -> tuple[dict, dict]:
    """Pair-count cost table plus measured CPU times where feasible.

    Returns (report, timings): the report is deterministic in (config,
    seed); wall-clock measurements live in the separate timings dict.
    """
    np_dtype = {"f32": np.float32, "f64": np.float64}[dtype]
    rows = []
    timing_rows = []
    for T in Ts:
        rng = stream(seed, f"bench.{T}.{K}.{k}.{w}")
        assignment = _balanced_assignment(T, K, k, rng)
        spec = MaskSpec(T=T, window=w, assignment=assignment)
        cost = pair_cost(spec)
        rows.append(
            {
                "T": T,
                "full_pairs": int(cost["full_pairs"]),
                "focus_pairs": int(cost["focus_pairs"]),
                "pair_ratio": cost["ratio"],
                "model_ratio": closed_form_cost_model(spec),
                "retained_distant_fraction": retained_distant_fraction(spec),
            }
        )
        d_h = 64
        q = rng.standard_normal((T, d_h)).astype(np_dtype)
        kk = rng.standard_normal((T, d_h)).astype(np_dtype)
        v = rng.standard_normal((T, d_h)).astype(np_dtype)
        inp = AttentionInputs(q=q, k=kk, v=v, window=w)
        timing = {"T": T, "reference_s": None, "sparse_s": None, "sort_fraction": None}
        sparse_times = []
        sort_times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            perm = group_permutation(assignment.primary, K)
            t1 = time.perf_counter()
            parts = [group_pass(inp, perm), local_pass(inp, spec)]
            if spec.k > 1:
                parts.append(residual_pass(inp, spec))
            merge_partials(parts)
            t2 = time.perf_counter()
            sort_times.append(t1 - t0)
            sparse_times.append(t2 - t0)
        timing["sparse_s"] = min(sparse_times)
        timing["sort_fraction"] = min(sort_times) / min(sparse_times)
        if T <= oracle_limit:
            ref_times = []
            mask = build_mask(spec)
            for _ in range(repeats):
                t0 = time.perf_counter()
                masked_reference(inp, mask)
                ref_times.append(time.perf_counter() - t0)
            timing["reference_s"] = min(ref_times)
        timing_rows.append(timing)
    report = {
        "format_version": REPORT_FORMAT_VERSION,
        "config": {"T": list(Ts), "K": K, "topk": k, "window": w, "seed": seed, "dtype": dtype},
        "rows": rows,
    }
    timings = {
        "format_version": REPORT_FORMAT_VERSION,
        "note": "wall-clock section; excluded from the byte-determinism contract",
        "rows": timing_rows,
    }
    return report, timings
