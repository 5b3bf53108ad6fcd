import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from groupgate import autodiff as ad
from groupgate import linalg, routing
from groupgate.rng import stream


def scripted_sinkhorn(S, tau, n_iters):
    """Independent reference loop (column pass then row pass, row pass last)."""
    Q = np.exp(S / tau - np.max(S / tau))
    Q = np.maximum(Q, 1e-30)
    for _ in range(n_iters):
        Q = Q / Q.sum(axis=0, keepdims=True)
        Q = Q / Q.sum(axis=1, keepdims=True)
    return Q


def make_bank(d=24, K=4, d_g=8, seed=0, **kw):
    return routing.init_bank(d=d, K=K, d_g=d_g, rng=stream(seed, "bank"), **kw)


class TestRouteScores:
    def test_zero_projection_gives_zero_scores(self):
        bank = make_bank()
        bank.W_g = np.zeros_like(bank.W_g)
        H = stream(1, "h").standard_normal((10, 24))
        assert np.array_equal(routing.route_scores(H, bank), np.zeros((10, 4)))

    def test_identity_routing(self):
        # d_g = d, identity projection, standard-basis centroids: scores are
        # just the first K coordinates of H
        K, d = 3, 5
        bank = routing.CentroidBank(K=K, d_g=d, d=d, C=np.eye(K, d), W_g=np.eye(d))
        H = stream(2, "h").standard_normal((7, d))
        assert np.abs(routing.route_scores(H, bank) - H[:, :K]).max() < 1e-15

    def test_matches_naive_per_token_oracle(self):
        bank = make_bank(seed=3)
        H = stream(3, "h").standard_normal((6, 24))
        S = routing.route_scores(H, bank)
        for i in range(6):
            proj = np.array([float(H[i] @ bank.W_g[:, a]) for a in range(bank.d_g)])
            for g in range(bank.K):
                want = float(proj @ np.asarray(bank.C)[g])
                assert abs(S[i, g] - want) < 1e-12

    def test_tensor_path_matches_numpy_path(self):
        bank = make_bank(seed=4)
        H = stream(4, "h").standard_normal((8, 24))
        S_np = routing.route_scores(H, bank)
        t_bank = routing.CentroidBank(
            K=bank.K, d_g=bank.d_g, d=bank.d,
            C=ad.Tensor(np.asarray(bank.C), requires_grad=True),
            W_g=ad.Tensor(np.asarray(bank.W_g), requires_grad=True),
        )
        S_t = routing.route_scores(H, t_bank)
        assert np.abs(S_np - S_t.value).max() < 1e-12


class TestSinkhorn:
    def test_constant_scores_give_uniform(self):
        G = routing.sinkhorn_normalize(np.full((6, 4), 2.5), tau=0.1, n_iters=10)
        assert np.abs(G - 0.25).max() < 1e-12

    def test_peaked_two_by_two_matches_scripted_oracle(self):
        S = np.array([[10.0, 0.0], [0.0, 10.0]])
        G = routing.sinkhorn_normalize(S, tau=1.0, n_iters=10)
        oracle = scripted_sinkhorn(S, 1.0, 10)
        assert np.abs(G - oracle).max() < 1e-12
        assert np.abs(G - np.eye(2)).max() < 1e-3

    def test_random_column_sums_near_balanced(self):
        S = stream(5, "s").standard_normal((8, 4))
        G = routing.sinkhorn_normalize(S, tau=1.0, n_iters=10)
        assert np.abs(G.sum(axis=0) - 2.0).max() / 2.0 < 0.02
        assert np.abs(G.sum(axis=1) - 1.0).max() < 1e-6

    def test_shift_invariance(self):
        S = stream(6, "s").standard_normal((12, 5))
        a = routing.sinkhorn_normalize(S, tau=0.3, n_iters=10)
        b = routing.sinkhorn_normalize(S + 7.3, tau=0.3, n_iters=10)
        assert np.abs(a - b).max() < 1e-9

    def test_column_deviation_monotone_in_iterations(self):
        S = 0.3 * stream(7, "s").standard_normal((64, 8))
        prev = None
        for n in range(1, 25):
            G = routing.sinkhorn_normalize(S, tau=0.1, n_iters=n)
            dev = routing.column_balance_deviation(G)
            if prev is not None:
                assert dev <= prev + 1e-12
            prev = dev

    def test_twenty_iterations_tighter_than_half_percent(self):
        rng = stream(8, "s")
        for _ in range(5):
            S = 0.1 * rng.standard_normal((64, 8))
            G = routing.sinkhorn_normalize(S, tau=0.1, n_iters=20)
            assert routing.column_balance_deviation(G) < 0.005

    def test_low_temperature_floor_keeps_result_finite(self):
        S = stream(9, "s").standard_normal((32, 8)) * 3.0
        G = routing.sinkhorn_normalize(S, tau=0.05, n_iters=10)
        assert np.isfinite(G).all() and (G >= 0).all()

    def test_tensor_path_matches_numpy_path(self):
        S = stream(10, "s").standard_normal((9, 4))
        G_np = routing.sinkhorn_normalize(S, tau=0.2, n_iters=10)
        G_t = routing.sinkhorn_normalize(ad.Tensor(S, requires_grad=True), tau=0.2, n_iters=10)
        assert np.abs(G_np - G_t.value).max() < 1e-12

    def test_rejects_bad_args(self):
        with pytest.raises(ValueError):
            routing.sinkhorn_normalize(np.zeros((2, 2)), tau=-1.0, n_iters=10)
        with pytest.raises(ValueError):
            routing.sinkhorn_normalize(np.zeros((2, 2)), tau=0.1, n_iters=0)


class TestSoftmaxNormalize:
    def test_constant_rows_uniform(self):
        G = routing.softmax_normalize(np.ones((5, 4)), tau=0.1)
        assert np.abs(G - 0.25).max() < 1e-12

    def test_dominant_column_collapse_signature(self):
        S = np.zeros((6, 4))
        S[:, 2] = 5.0
        G = routing.softmax_normalize(S, tau=0.1)
        assert (G[:, 2] > 1.0 - 1e-9).all()

    def test_matches_row_softmax_oracle(self):
        S = stream(11, "s").standard_normal((7, 5))
        G = routing.softmax_normalize(S, tau=0.25)
        assert np.abs(G - linalg.row_softmax(S, scale=4.0)).max() < 1e-12

    def test_tensor_path_matches_numpy_path(self):
        S = stream(12, "s").standard_normal((7, 5))
        G_t = routing.softmax_normalize(ad.Tensor(S, requires_grad=True), tau=0.25)
        assert np.abs(routing.softmax_normalize(S, tau=0.25) - G_t.value).max() < 1e-12


class TestHarden:
    def test_spec_row(self):
        G = np.array([[0.5, 0.3, 0.15, 0.05]])
        hard = routing.harden(G, 2)
        assert hard.topk.tolist() == [[0, 1]] and hard.primary.tolist() == [0]

    def test_all_equal_ties_to_group_zero(self):
        hard = routing.harden(np.full((3, 4), 0.25), 1)
        assert (hard.primary == 0).all()

    def test_k_equals_K_selects_everything(self):
        G = stream(13, "g").random((5, 4))
        hard = routing.harden(G, 4)
        assert all(sorted(row) == [0, 1, 2, 3] for row in hard.topk.tolist())

    def test_memberships_distinct(self):
        G = stream(14, "g").random((50, 6))
        hard = routing.harden(G, 3)
        assert all(len(set(row)) == 3 for row in hard.topk.tolist())

    @given(
        row=hnp.arrays(np.float64, (1, 6), elements=st.floats(0.01, 1.0)),
        factor=st.floats(0.1, 100.0),
    )
    @settings(max_examples=50, deadline=None)
    def test_scale_invariance(self, row, factor):
        a = routing.harden(row, 3)
        b = routing.harden(row * factor, 3)
        assert a.topk.tolist() == b.topk.tolist()

    def test_rejects_bad_k(self):
        with pytest.raises(ValueError):
            routing.harden(np.ones((2, 3)), 4)


class TestAffinity:
    def test_identical_one_hot(self):
        G = np.array([[1.0, 0.0], [1.0, 0.0]])
        assert routing.affinity(G, 0, 1) == 1.0

    def test_orthogonal_one_hot(self):
        G = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert routing.affinity(G, 0, 1) == 0.0

    def test_uniform_rows_k8(self):
        G = np.full((2, 8), 1.0 / 8.0)
        assert routing.affinity(G, 0, 1) == pytest.approx(0.125, abs=1e-15)

    @given(data=st.data())
    @settings(max_examples=40, deadline=None)
    def test_peaked_rows_affinity_tracks_argmax(self, data):
        # rows with max entry > 0.9: affinity > 0.8 iff same argmax group
        K = 5
        g1 = data.draw(st.integers(0, K - 1))
        g2 = data.draw(st.integers(0, K - 1))
        p1 = data.draw(st.floats(0.901, 0.999))
        p2 = data.draw(st.floats(0.901, 0.999))
        rows = []
        for g, p in ((g1, p1), (g2, p2)):
            row = np.full(K, (1.0 - p) / (K - 1))
            row[g] = p
            rows.append(row)
        G = np.stack(rows)
        aff = routing.affinity(G, 0, 1)
        assert (aff > 0.8) == (g1 == g2)


class TestBank:
    def test_param_count_matches_published_arithmetic(self):
        # d=768, d_g=16, K=8: 12 layers add ~148K routing parameters
        bank = routing.CentroidBank(
            K=8, d_g=16, d=768, C=np.zeros((8, 16)), W_g=np.zeros((768, 16))
        )
        assert bank.param_count() == 8 * 16 + 768 * 16 == 12416
        assert 12 * bank.param_count() == 148992

    def test_validation(self):
        with pytest.raises(ValueError):
            routing.CentroidBank(K=1, d_g=4, d=8, C=np.zeros((1, 4)), W_g=np.zeros((8, 4)))
        with pytest.raises(ValueError):
            routing.CentroidBank(K=2, d_g=9, d=8, C=np.zeros((2, 9)), W_g=np.zeros((8, 9)))
        with pytest.raises(ValueError):
            routing.CentroidBank(K=2, d_g=4, d=8, C=np.zeros((2, 4)), W_g=np.zeros((8, 4)), tau=0.0)

    def test_save_load_roundtrip(self, tmp_path):
        bank = make_bank(seed=15)
        routing.save_bank(bank, tmp_path / "bank", sinkhorn_iters=12)
        loaded, n = routing.load_bank(tmp_path / "bank")
        assert n == 12
        assert np.array_equal(np.asarray(loaded.C), np.asarray(bank.C))
        assert np.array_equal(np.asarray(loaded.W_g), np.asarray(bank.W_g))
        assert loaded.tau == bank.tau and loaded.lam == bank.lam

    def test_load_missing_field_names_it(self, tmp_path):
        bank = make_bank(seed=16)
        routing.save_bank(bank, tmp_path / "bank")
        import json

        sidecar = json.loads((tmp_path / "bank.json").read_text())
        del sidecar["tau"]
        (tmp_path / "bank.json").write_text(json.dumps(sidecar))
        with pytest.raises(ValueError, match="tau"):
            routing.load_bank(tmp_path / "bank")
