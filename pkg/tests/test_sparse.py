import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groupgate import sparse
from groupgate.gated import AttentionInputs, full_attention
from groupgate.linalg import ShapeError, logsumexp_rows
from groupgate.rng import stream
from groupgate.routing import HardAssignment, harden, softmax_normalize
from groupgate.sparse import (
    MaskSpec,
    build_mask,
    fast_path_mask,
    group_pass,
    group_permutation,
    local_pass,
    masked_reference,
    merge,
    merge_partials,
    pair_cost,
    pair_counts,
    residual_mask,
    residual_pass,
    retained_distant_fraction,
    sparse_attention,
    split_pairs,
)


def assignment_from_primary(primary, K):
    primary = np.asarray(primary)
    return HardAssignment(topk=primary[:, None].copy(), primary=primary.copy(), num_groups=K)


def random_case(T, K, w, k, seed):
    rng = stream(seed, f"case.{T}.{K}.{w}.{k}")
    inp = AttentionInputs(
        q=rng.standard_normal((T, 8)),
        k=rng.standard_normal((T, 8)),
        v=rng.standard_normal((T, 8)),
        window=w,
    )
    hard = harden(softmax_normalize(rng.standard_normal((T, K)), 1.0), k)
    return inp, MaskSpec(T=T, window=w, assignment=hard)


def brute_force_mask(spec):
    """Direct enumeration of the mask equation."""
    T = spec.T
    out = np.zeros((T, T), dtype=bool)
    for i in range(T):
        for j in range(T):
            share = bool(set(spec.assignment.topk[i]) & set(spec.assignment.topk[j]))
            out[i, j] = j <= i and (share or i - j <= spec.window)
    return out


def oracle_partial(inp, mask):
    """Masked attention plus per-query logsumexp, straight from the formulas."""
    q, k, v = np.asarray(inp.q), np.asarray(inp.k), np.asarray(inp.v)
    T, d = q.shape
    logits = (q @ k.T) / np.sqrt(d)
    coverage = mask.any(axis=1)
    O = np.zeros_like(v)
    L = np.full(T, -np.inf)
    for i in range(T):
        if not coverage[i]:
            continue
        sel = np.flatnonzero(mask[i])
        row = logits[i, sel]
        m = row.max()
        e = np.exp(row - m)
        L[i] = m + np.log(e.sum())
        O[i] = (e / e.sum()) @ v[sel]
    return sparse.PartialAttention(O=O, L=L, coverage=coverage)


class TestBuildMask:
    def test_k_equals_K_is_full_causal(self):
        _, spec = random_case(10, 4, 2, 4, seed=1)
        assert np.array_equal(build_mask(spec), np.tril(np.ones((10, 10), bool)))

    def test_window_covering_sequence_is_full_causal(self):
        _, spec = random_case(9, 4, 9, 1, seed=2)
        assert np.array_equal(build_mask(spec), np.tril(np.ones((9, 9), bool)))

    def test_frozen_enumeration(self):
        spec = MaskSpec(T=4, window=1, assignment=assignment_from_primary([0, 0, 1, 1], 2))
        pairs = {(int(i), int(j)) for i, j in np.argwhere(build_mask(spec))}
        assert pairs == {(0, 0), (1, 0), (1, 1), (2, 1), (2, 2), (3, 2), (3, 3)}

    @given(st.integers(0, 2**31 - 1), st.integers(2, 4), st.integers(1, 3))
    @settings(max_examples=25, deadline=None)
    def test_matches_brute_force_enumeration(self, seed, K, k):
        k = min(k, K)
        _, spec = random_case(12, K, 3, k, seed=seed)
        assert np.array_equal(build_mask(spec), brute_force_mask(spec))


class TestSplitPairs:
    def test_single_group_all_causal_in_A(self):
        spec = MaskSpec(T=5, window=2, assignment=assignment_from_primary([0] * 5, 3))
        A, B = split_pairs(spec)
        assert B == set()
        assert A == {(i, j) for i in range(5) for j in range(i + 1)}

    def test_frozen_spec_case(self):
        spec = MaskSpec(T=4, window=1, assignment=assignment_from_primary([0, 0, 1, 1], 2))
        A, B = split_pairs(spec)
        assert A == {(0, 0), (1, 0), (1, 1), (2, 2), (3, 2), (3, 3)}
        assert B == {(2, 1)}

    def test_alternating_groups_window_one(self):
        primary = [i % 2 for i in range(8)]
        spec = MaskSpec(T=8, window=1, assignment=assignment_from_primary(primary, 2))
        A, B = split_pairs(spec)
        assert B == {(i, i - 1) for i in range(1, 8)}
        assert A == {(i, j) for i in range(8) for j in range(i % 2, i + 1, 2)}

    def test_disjoint_and_cover(self):
        _, spec = random_case(24, 4, 3, 1, seed=5)
        A, B = split_pairs(spec)
        assert not (A & B)
        mask_pairs = {(int(i), int(j)) for i, j in np.argwhere(build_mask(spec))}
        assert (A | B) == mask_pairs

    def test_rejects_topk_memberships(self):
        _, spec = random_case(8, 4, 2, 2, seed=6)
        with pytest.raises(ValueError):
            split_pairs(spec)


class TestGroupPermutation:
    def test_positions_ascend_within_segments_and_inverse(self):
        rng = stream(7, "perm")
        primary = rng.integers(0, 5, size=40)
        perm = group_permutation(primary, 5)
        for g in range(5):
            seg = perm.order[perm.boundaries[g] : perm.boundaries[g + 1]]
            assert (np.diff(seg) > 0).all()
            assert (primary[seg] == g).all()
        assert np.array_equal(perm.order[perm.inverse()], np.arange(40))

    def test_empty_groups_allowed(self):
        perm = group_permutation(np.array([2, 2, 2]), 4)
        assert perm.boundaries.tolist() == [0, 0, 0, 3, 3]


class TestGroupPass:
    def test_single_group_equals_full_attention(self):
        inp, _ = random_case(10, 2, 2, 1, seed=8)
        perm = group_permutation(np.zeros(10, dtype=int), 2)
        part = group_pass(inp, perm)
        full = full_attention(inp).value
        assert np.abs(part.O - full).max() < 1e-12
        q, k = np.asarray(inp.q), np.asarray(inp.k)
        lse = logsumexp_rows((q @ k.T) / np.sqrt(8), np.tril(np.ones((10, 10), bool)))[:, 0]
        assert np.abs(part.L - lse).max() < 1e-12

    def test_singleton_groups_self_attention_only(self):
        T = 6
        inp, _ = random_case(T, 8, 2, 1, seed=9)
        perm = group_permutation(np.arange(T), T)
        part = group_pass(inp, perm)
        q, k, v = np.asarray(inp.q), np.asarray(inp.k), np.asarray(inp.v)
        assert np.abs(part.O - v).max() < 1e-12
        expected_L = np.array([float(q[i] @ k[i]) / np.sqrt(8) for i in range(T)])
        assert np.abs(part.L - expected_L).max() < 1e-12

    def test_matches_masked_oracle_on_set_A(self):
        inp, spec = random_case(16, 3, 2, 1, seed=10)
        perm = group_permutation(spec.assignment.primary, 3)
        part = group_pass(inp, perm)
        g = spec.assignment.primary
        diff = np.arange(16)[:, None] - np.arange(16)[None, :]
        a_mask = (diff >= 0) & (g[:, None] == g[None, :])
        oracle = oracle_partial(inp, a_mask)
        assert np.abs(part.O - oracle.O).max() < 1e-10
        assert np.abs(part.L - oracle.L).max() < 1e-10

    def test_invariant_under_group_relabeling(self):
        inp, spec = random_case(20, 4, 2, 1, seed=11)
        g = spec.assignment.primary
        relabel = np.array([2, 0, 3, 1])
        part1 = group_pass(inp, group_permutation(g, 4))
        part2 = group_pass(inp, group_permutation(relabel[g], 4))
        assert np.abs(part1.O - part2.O).max() < 1e-12
        assert np.abs(part1.L - part2.L).max() < 1e-12


class TestLocalPass:
    def test_single_group_has_no_coverage(self):
        inp, _ = random_case(8, 2, 3, 1, seed=12)
        spec = MaskSpec(T=8, window=3, assignment=assignment_from_primary([0] * 8, 2))
        part = local_pass(inp, spec)
        assert not part.coverage.any()
        assert (part.L == -np.inf).all() and (part.O == 0).all()

    def test_matches_masked_oracle_on_set_B(self):
        inp, spec = random_case(16, 3, 4, 1, seed=13)
        g = spec.assignment.primary
        diff = np.arange(16)[:, None] - np.arange(16)[None, :]
        b_mask = (diff >= 0) & (diff <= 4) & (g[:, None] != g[None, :])
        oracle = oracle_partial(inp, b_mask)
        part = local_pass(inp, spec)
        assert np.array_equal(part.coverage, oracle.coverage)
        assert np.abs(part.O - oracle.O).max() < 1e-10
        cov = oracle.coverage
        assert np.abs(part.L[cov] - oracle.L[cov]).max() < 1e-10

    def test_alternating_groups_window_one_attends_predecessor(self):
        T = 8
        inp, _ = random_case(T, 2, 1, 1, seed=14)
        primary = np.array([i % 2 for i in range(T)])
        spec = MaskSpec(T=T, window=1, assignment=assignment_from_primary(primary, 2))
        part = local_pass(inp, spec)
        v = np.asarray(inp.v)
        assert not part.coverage[0]
        for i in range(1, T):
            assert part.coverage[i]
            assert np.abs(part.O[i] - v[i - 1]).max() < 1e-12


class TestMerge:
    def test_equal_logsumexp_averages(self):
        rng = stream(15, "merge")
        O1, O2 = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        L = rng.standard_normal(4)
        cov = np.ones(4, dtype=bool)
        out = merge(
            sparse.PartialAttention(O=O1, L=L, coverage=cov),
            sparse.PartialAttention(O=O2, L=L.copy(), coverage=cov),
        )
        assert np.abs(out - 0.5 * (O1 + O2)).max() < 1e-12

    def test_uncovered_side_passthrough(self):
        rng = stream(16, "merge")
        O1 = rng.standard_normal((4, 3))
        a = sparse.PartialAttention(O=O1, L=rng.standard_normal(4), coverage=np.ones(4, bool))
        b = sparse.PartialAttention(
            O=np.zeros((4, 3)), L=np.full(4, -np.inf), coverage=np.zeros(4, bool)
        )
        assert np.abs(merge(a, b) - O1).max() < 1e-15

    def test_merged_passes_reproduce_masked_oracle(self):
        inp, spec = random_case(24, 4, 3, 1, seed=17)
        perm = group_permutation(spec.assignment.primary, 4)
        out = merge(group_pass(inp, perm), local_pass(inp, spec))
        reference = masked_reference(inp, build_mask(spec))
        assert np.abs(out - reference).max() < 1e-10
        num = (out * reference).sum(axis=1)
        den = np.linalg.norm(out, axis=1) * np.linalg.norm(reference, axis=1)
        assert (num / den).min() >= 1.0 - 1e-9

    def test_double_uncovered_query_aborts(self):
        empty = sparse.PartialAttention(
            O=np.zeros((2, 3)), L=np.full(2, -np.inf), coverage=np.zeros(2, bool)
        )
        with pytest.raises(sparse.MergeError):
            merge(empty, empty)

    def test_extreme_logsumexp_values_do_not_overflow(self):
        O1, O2 = np.ones((2, 2)), 2.0 * np.ones((2, 2))
        a = sparse.PartialAttention(O=O1, L=np.array([900.0, -900.0]), coverage=np.ones(2, bool))
        b = sparse.PartialAttention(O=O2, L=np.array([880.0, -880.0]), coverage=np.ones(2, bool))
        out = merge(a, b)
        assert np.isfinite(out).all()


class TestSparseAttention:
    def test_end_to_end_k1(self):
        inp, spec = random_case(48, 4, 8, 1, seed=18)
        out = sparse_attention(inp, spec)
        reference = masked_reference(inp, build_mask(spec))
        assert np.abs(out - reference).max() < 1e-10

    @given(
        seed=st.integers(0, 2**31 - 1),
        T=st.integers(2, 40),
        K=st.sampled_from([2, 4, 8]),
        w=st.sampled_from([1, 4, 16]),
        k=st.integers(1, 3),
    )
    @settings(max_examples=40, deadline=None)
    def test_exactness_property(self, seed, T, K, w, k):
        k = min(k, K)
        inp, spec = random_case(T, K, w, k, seed=seed)
        out = sparse_attention(inp, spec)
        reference = masked_reference(inp, build_mask(spec))
        assert np.abs(out - reference).max() < 1e-10

    def test_topk_residual_pass_covers_shared_non_primary(self):
        inp, spec = random_case(32, 4, 2, 2, seed=19)
        res = residual_mask(spec)
        part = residual_pass(inp, spec)
        oracle = oracle_partial(inp, res)
        assert np.array_equal(part.coverage, oracle.coverage)
        assert np.abs(part.O - oracle.O).max() < 1e-10
        # the fast primary-only mask under-covers whenever the residual is nonempty
        if res.any():
            assert not (fast_path_mask(spec) == build_mask(spec)).all()

    def test_causality(self):
        # perturbing V row j must leave every output row before j untouched
        inp, spec = random_case(20, 3, 2, 1, seed=20)
        out = sparse_attention(inp, spec)
        rng = stream(21, "perturb")
        for j in (5, 9, 15):
            v2 = np.asarray(inp.v).copy()
            v2[j] += rng.standard_normal(v2.shape[1])
            inp2 = AttentionInputs(q=inp.q, k=inp.k, v=v2, window=inp.window)
            out2 = sparse_attention(inp2, spec)
            assert np.array_equal(out[:j], out2[:j])


class TestMaskedReference:
    def test_full_causal_equals_full_attention(self):
        inp, _ = random_case(12, 2, 2, 1, seed=22)
        ref = masked_reference(inp, np.tril(np.ones((12, 12), bool)))
        assert np.abs(ref - full_attention(inp).value).max() < 1e-12

    def test_identity_mask_returns_values(self):
        inp, _ = random_case(7, 2, 2, 1, seed=23)
        ref = masked_reference(inp, np.eye(7, dtype=bool))
        assert np.abs(ref - np.asarray(inp.v)).max() < 1e-12

    def test_empty_row_rejected(self):
        inp, _ = random_case(4, 2, 2, 1, seed=24)
        M = np.tril(np.ones((4, 4), bool))
        M[2] = False
        with pytest.raises(ShapeError):
            masked_reference(inp, M)


class TestPairCost:
    def test_k_equals_K_ratio_is_one(self):
        _, spec = random_case(64, 4, 4, 4, seed=25)
        cost = pair_cost(spec)
        assert cost["ratio"] == 1.0
        assert cost["focus_pairs"] == 64 * 65 // 2

    def test_counts_match_mask_enumeration(self):
        for seed, k in ((26, 1), (27, 2), (28, 3)):
            _, spec = random_case(40, 4, 3, k, seed=seed)
            counts = pair_counts(spec)
            assert counts["attended_pairs"] == int(build_mask(spec).sum())
            g = spec.assignment.primary
            diff = np.arange(40)[:, None] - np.arange(40)[None, :]
            a_mask = (diff >= 0) & (g[:, None] == g[None, :])
            b_mask = (diff >= 0) & (diff <= 3) & (g[:, None] != g[None, :])
            assert counts["pairs_A"] == int(a_mask.sum())
            assert counts["pairs_B"] == int(b_mask.sum())
            assert counts["pairs_residual"] == int(residual_mask(spec).sum())

    def test_balanced_k1_ratio_tracks_closed_form(self):
        rng = stream(29, "cost")
        T, K, w = 8192, 8, 128
        primary = rng.integers(0, K, size=T)
        spec = MaskSpec(T=T, window=w, assignment=assignment_from_primary(primary, K))
        cost = pair_cost(spec)
        model = sparse.closed_form_cost_model(spec)
        assert abs(cost["ratio"] / model - 1.0) < 0.05

    def test_retained_distant_fraction_top2_of_4(self):
        # independent uniform 2-of-4 memberships: P(share) = 1 - 1/6 = 5/6
        rng = stream(30, "retain")
        T, K, w = 1024, 4, 8
        from itertools import combinations

        choices = np.array(list(combinations(range(K), 2)))
        picks = choices[rng.integers(0, len(choices), size=T)]
        hard = HardAssignment(topk=picks, primary=picks[:, 0].copy(), num_groups=K)
        spec = MaskSpec(T=T, window=w, assignment=hard)
        frac = retained_distant_fraction(spec)
        assert abs(frac - 5.0 / 6.0) < 0.02
