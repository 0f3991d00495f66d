"""Channel-token attention: identity init, a dense hand-set oracle, the
cross-modality mask, and finite-difference gradients over many seeds."""
import numpy as np
import pytest

from conftest import random_fusion
from vlsplat.errors import InvalidParameterError
from vlsplat.fusion import (
    ATTN_DIM_DEFAULT,
    AttentionWeights,
    fuse,
    fuse_backward,
    fuse_batch,
    fuse_backward_batch,
    init_attention_weights,
    make_fusion_model,
)

D = 6  # 3 color + 3 feature channels
DH = ATTN_DIM_DEFAULT


def zero_weights():
    return AttentionWeights(
        wq=np.zeros((D * DH, D)), bq=np.zeros(D * DH),
        wk=np.zeros((D * DH, D)), bk=np.zeros(D * DH),
        wv=np.zeros((D * DH, D)), bv=np.zeros(D * DH),
        wout=np.zeros((D, D * DH)), bout=np.zeros(D),
    )


class TestFuseForward:
    def test_zero_output_map_is_identity(self):
        rng = np.random.default_rng(0)
        w = init_attention_weights(3, 3, DH, rng)
        x = rng.normal(size=6)
        u = fuse(x[:3], x[3:], w)
        assert np.array_equal(u, x)

    def test_output_width(self):
        w = init_attention_weights(3, 3, DH, np.random.default_rng(1))
        assert fuse(np.ones(3), np.ones(3), w).shape == (6,)

    def test_hand_set_uniform_attention_oracle(self):
        # Wq = Wk = 0 makes every attention row softmax(0) = 1/D.
        # Wv embeds x into head column 0 (rows 4t of the stacked map pick
        # x_t), so A@V column 0 holds mean(x) in every token; Wout sums
        # column 0 back into each output channel: u = x + mean(x) * 1.
        w = zero_weights()
        for t in range(D):
            w.wv[t * DH + 0, t] = 1.0
        for t in range(D):
            w.wout[t, t * DH + 0] = 1.0
        x = np.array([0.3, -0.8, 1.1, 0.0, 0.5, -0.2])
        u = fuse(x[:3], x[3:], w)
        assert np.allclose(u, x + np.mean(x), atol=1e-12)

    def test_attention_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        model = random_fusion(rng=rng)
        x = rng.normal(size=(4, D))
        _, cache = fuse_batch(model, x)
        assert np.allclose(cache["attn"].sum(axis=2), 1.0, atol=1e-9)

    def test_batch_rows_independent(self):
        # per-row results agree with a lone-row call up to BLAS batching
        # round-off (a couple of ulp), and exactly under row permutation
        rng = np.random.default_rng(3)
        model = random_fusion(rng=rng)
        x = rng.normal(size=(5, D))
        u_all, _ = fuse_batch(model, x)
        for i in range(5):
            u_one, _ = fuse_batch(model, x[i : i + 1])
            assert np.allclose(u_all[i], u_one[0], atol=1e-12, rtol=0)

    def test_permutation_covariant_bitwise(self):
        rng = np.random.default_rng(13)
        model = random_fusion(rng=rng)
        x = rng.normal(size=(6, D))
        perm = rng.permutation(6)
        u, _ = fuse_batch(model, x)
        u_perm, _ = fuse_batch(model, x[perm])
        assert np.array_equal(u_perm, u[perm])

    def test_shape_mismatch_rejected(self):
        w = init_attention_weights(3, 3, DH, np.random.default_rng(4))
        with pytest.raises(InvalidParameterError):
            fuse(np.ones(2), np.ones(3), w)


class TestFusionKinds:
    def test_none_is_identity_with_no_parameters(self):
        model = make_fusion_model("none", 3, 3, DH, np.random.default_rng(5))
        x = np.random.default_rng(6).normal(size=(4, D))
        u, _ = fuse_batch(model, x)
        assert np.array_equal(u, x)
        assert model.parameters() == {}

    def test_mlp1_identity_init(self):
        model = make_fusion_model("mlp1", 3, 3, DH, np.random.default_rng(7))
        x = np.random.default_rng(8).normal(size=(3, D))
        u, _ = fuse_batch(model, x)
        assert np.allclose(u, x)
        assert set(model.parameters()) == {"fusion.mlp_weight", "fusion.mlp_bias"}

    def test_cross_masks_same_modality_attention(self):
        rng = np.random.default_rng(9)
        model = random_fusion(rng=rng, kind="cross")
        x = rng.normal(size=(2, D))
        _, cache = fuse_batch(model, x)
        attn = cache["attn"]
        # color tokens (0..2) must not attend to color tokens, nor feature
        # (3..5) to feature
        for i in range(3):
            assert np.all(attn[:, i, :3] == 0.0)
        for i in range(3, 6):
            assert np.all(attn[:, i, 3:] == 0.0)
        assert np.allclose(attn.sum(axis=2), 1.0, atol=1e-9)

    def test_unknown_kind_rejected(self):
        with pytest.raises(InvalidParameterError):
            make_fusion_model("bilstm", 3, 3, DH, np.random.default_rng(0))


class TestFuseBackward:
    def test_residual_only_when_wout_zero(self):
        rng = np.random.default_rng(10)
        w = init_attention_weights(3, 3, DH, rng)
        du = np.zeros(6)
        du[0] = 1.0
        dc, df, dw = fuse_backward(rng.normal(size=3), rng.normal(size=3), w, du)
        assert np.allclose(dc, [1.0, 0.0, 0.0]) and np.allclose(df, 0.0)
        # with Wout = 0 upstream, only Wout itself can carry gradient
        assert np.any(dw.wout != 0.0) or np.any(dw.bout != 0.0)
        assert np.allclose(dw.wq, 0.0) and np.allclose(dw.wk, 0.0) and np.allclose(dw.wv, 0.0)
        assert np.all(dw.wout[1:] == 0.0), "dWout rows beyond the first must be zero for du=e1"

    def test_zero_upstream_gives_zero_gradients(self):
        rng = np.random.default_rng(11)
        model = random_fusion(rng=rng)
        x = rng.normal(size=(3, D))
        _, cache = fuse_batch(model, x)
        dx, grads = fuse_backward_batch(model, cache, np.zeros((3, D)))
        assert np.all(dx == 0.0)
        assert all(np.all(g == 0.0) for g in grads.values())

    @pytest.mark.parametrize("kind", ["self", "cross", "mlp1"])
    def test_finite_differences_single_seed_per_kind(self, kind):
        self._check_seed(12345, kind, rel=1e-5, absolute=1e-8)

    def test_finite_differences_many_seeds(self):
        # spec-level property: parameter gradients match FD across 100 seeds
        for seed in range(100):
            self._check_seed(seed, "self", rel=1e-4, absolute=1e-7)

    @staticmethod
    def _check_seed(seed, kind, rel, absolute):
        rng = np.random.default_rng(seed)
        model = random_fusion(rng=rng, kind=kind)
        x = rng.normal(size=(2, D))
        du = rng.normal(size=(2, D))

        u, cache = fuse_batch(model, x)
        dx, grads = fuse_backward_batch(model, cache, du)

        def objective():
            out, _ = fuse_batch(model, x)
            return float(np.sum(du * out))

        eps = 1e-6
        targets = {"x": x}
        targets.update(model.parameters())
        analytic = {"x": dx}
        analytic.update(grads)
        for name, arr in targets.items():
            flat = arr.reshape(-1)
            aflat = np.asarray(analytic[name]).reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + eps
                hi = objective()
                flat[i] = keep - eps
                lo = objective()
                flat[i] = keep
                fd = (hi - lo) / (2 * eps)
                assert abs(aflat[i] - fd) <= absolute + rel * abs(fd), (
                    f"seed {seed} {kind} {name}[{i}]: analytic {aflat[i]} vs FD {fd}"
                )
