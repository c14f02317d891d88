"""Block-level behavior: sparse channel attention, mixed-scale FFN, expert
mixture, and the composed residual block."""

import numpy as np
import pytest

from derain import blocks, network, ops
from derain.autodiff import ConfigError, Tensor
from derain.blocks import keep_count


def rand(*shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape).astype(np.float32)


def brute_force_topk_rows(scores, k):
    """Independent oracle: per-row sort by (value desc, index asc)."""
    flat = scores.reshape(-1, scores.shape[-1])
    kept = np.zeros_like(flat, dtype=bool)
    for r in range(flat.shape[0]):
        order = sorted(range(flat.shape[1]), key=lambda j: (-flat[r, j], j))
        kept[r, order[:k]] = True
    return kept.reshape(scores.shape)


def make_attention(c, heads, ratios=(0.5, 2 / 3, 0.75, 0.8), seed=0,
                   bounds=(0.0, 1.0), logits=None):
    rng = np.random.default_rng(seed)

    def conv(co, ci, k):
        return blocks.ConvP(Tensor(rng.standard_normal((co, ci, k, k)).astype(np.float32) * 0.2),
                            Tensor(rng.standard_normal(co).astype(np.float32) * 0.05))

    logits = np.zeros(len(ratios), np.float32) if logits is None else np.asarray(logits, np.float32)
    return blocks.AttentionParams(
        qkv_point=conv(3 * c, c, 1),
        qkv_depth=blocks.ConvP(Tensor(rng.standard_normal((3 * c, 1, 3, 3)).astype(np.float32) * 0.2),
                               Tensor(np.zeros(3 * c, np.float32))),
        out_proj=conv(c, c, 1),
        heads=heads, ratios=tuple(ratios), ratio_logits=Tensor(logits),
        ratio_bounds=bounds)


class TestDenseChannelAttention:
    def test_single_channel_returns_value(self):
        q = Tensor(rand(1, 1, 6, seed=1))
        k = Tensor(rand(1, 1, 6, seed=2))
        v = Tensor(rand(1, 1, 6, seed=3))
        out = blocks.dense_channel_attention(q, k, v, 1.0)
        np.testing.assert_allclose(out.data, v.data, rtol=1e-6)

    def test_zero_scores_average_values(self):
        q = Tensor(np.zeros((1, 4, 5), np.float32))
        k = Tensor(np.zeros((1, 4, 5), np.float32))
        v = Tensor(rand(1, 4, 5, seed=4))
        out = blocks.dense_channel_attention(q, k, v, 2.0)
        np.testing.assert_allclose(out.data, np.broadcast_to(v.data.mean(axis=1, keepdims=True),
                                                             v.shape), rtol=1e-5)

    def test_matches_step_by_step_oracle(self):
        q, k, v = (Tensor(rand(2, 5, 7, seed=s)) for s in (5, 6, 7))
        lam = np.sqrt(5.0)
        out = blocks.dense_channel_attention(q, k, v, lam)
        scores = q.data @ k.data.transpose(0, 2, 1) / lam
        e = np.exp(scores - scores.max(-1, keepdims=True))
        attn = e / e.sum(-1, keepdims=True)
        np.testing.assert_allclose(out.data, attn @ v.data, rtol=1e-5, atol=1e-6)


class TestSparseAttention:
    def test_ratio_one_equals_dense(self):
        rng = np.random.default_rng(11)
        for trial in range(100):
            h = int(rng.integers(1, 4))
            chat = int(rng.integers(2, 33))
            hw = int(rng.integers(4, 65))
            q, k, v = (Tensor(rng.standard_normal((h, chat, hw)).astype(np.float32))
                       for _ in range(3))
            params = make_attention(chat * h, h, ratios=(1.0,), seed=trial)
            sparse = blocks.sparse_channel_attention(q, k, v, params)
            dense = blocks.dense_channel_attention(q, k, v, params.temperature)
            err = np.abs(sparse.data - dense.data).max() / max(1.0, np.abs(dense.data).max())
            assert err < 1e-6

    def test_nonzero_counts_per_row(self):
        rng = np.random.default_rng(12)
        chat = 4
        q, k, v = (Tensor(rng.standard_normal((1, chat, 16)).astype(np.float32))
                   for _ in range(3))
        params = make_attention(chat, 1, ratios=(0.5,), seed=1)
        scores = ops.scale(ops.matmul(q, ops.transpose_last2(k)), 1 / params.temperature)
        attn = ops.softmax_rows(ops.top_k_mask(scores, keep_count(0.5, chat)))
        counts = (attn.data > 0).sum(axis=-1)
        np.testing.assert_array_equal(counts, 2)
        np.testing.assert_allclose(attn.data.sum(-1), 1.0, atol=1e-6)

    def test_one_hot_mixing_degenerates_to_single_branch(self):
        rng = np.random.default_rng(13)
        chat = 8
        q, k, v = (Tensor(rng.standard_normal((2, chat, 12)).astype(np.float32))
                   for _ in range(3))
        logits = np.array([0.0, -1e9, -1e9, -1e9], np.float32)
        mixed = make_attention(chat * 2, 2, seed=2, logits=logits)
        single = make_attention(chat * 2, 2, ratios=(0.5,), seed=2)
        out_mixed = blocks.sparse_channel_attention(q, k, v, mixed)
        out_single = blocks.sparse_channel_attention(q, k, v, single)
        np.testing.assert_allclose(out_mixed.data, out_single.data, rtol=1e-6, atol=1e-7)

    @pytest.mark.parametrize("ratio", [0.5, 2 / 3, 0.75, 0.8])
    @pytest.mark.parametrize("chat", [8, 48, 64])
    def test_normalization_invariant(self, ratio, chat):
        rng = np.random.default_rng(hash((ratio, chat)) % 2**31)
        scores = Tensor((rng.standard_normal((2, chat, chat)) * 3).astype(np.float32))
        kk = keep_count(ratio, chat)
        attn = ops.softmax_rows(ops.top_k_mask(scores, kk))
        nz = np.count_nonzero(attn.data, axis=-1)
        np.testing.assert_array_equal(nz, kk)
        np.testing.assert_allclose(attn.data.sum(-1), 1.0, atol=1e-6)
        masked = attn.data[np.isneginf(ops.top_k_mask(scores, kk).data)]
        assert (masked == 0).all()

    def test_monotone_support(self):
        rng = np.random.default_rng(14)
        scores = Tensor(rng.standard_normal((3, 16, 16)).astype(np.float32))
        prev = None
        for ratio in (0.25, 0.5, 0.75, 1.0):
            kk = keep_count(ratio, 16)
            kept = ~np.isneginf(ops.top_k_mask(scores, kk).data)
            if prev is not None:
                assert (kept | ~prev).all(), "smaller-ratio support must be a subset"
                assert (prev <= kept).all()
            prev = kept

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(15)
        h, chat, hw = 2, 6, 10
        q, k, v = (rng.standard_normal((h, chat, hw)).astype(np.float32) for _ in range(3))
        params = make_attention(chat * h, h, seed=3)
        perm = rng.permutation(hw)
        base = blocks.sparse_channel_attention(Tensor(q), Tensor(k), Tensor(v), params)
        permuted = blocks.sparse_channel_attention(
            Tensor(q[..., perm]), Tensor(k[..., perm]), Tensor(v[..., perm]), params)
        np.testing.assert_allclose(base.data[..., perm], permuted.data, rtol=2e-5, atol=1e-6)

    def test_empty_ratio_set_rejected(self):
        with pytest.raises(ConfigError):
            make_attention(8, 2, ratios=())

    def test_ratio_outside_interval_rejected(self):
        with pytest.raises(ConfigError):
            make_attention(8, 2, ratios=(0.3,), bounds=(0.5, 0.8))


class TestTopKOracle:
    def test_thousand_random_matrices_with_duplicates(self):
        rng = np.random.default_rng(16)
        for trial in range(1000):
            cols = int(rng.integers(2, 12))
            rows = int(rng.integers(1, 6))
            k = int(rng.integers(1, cols + 1))
            m = rng.standard_normal((rows, cols)).astype(np.float32)
            if trial % 3 == 0:  # force duplicated values
                m = np.round(m * 2) / 2
            masked = ops.top_k_mask(Tensor(m), k)
            kept = ~np.isneginf(masked.data)
            np.testing.assert_array_equal(kept, brute_force_topk_rows(m, k),
                                          err_msg=f"trial {trial} k={k}")
            np.testing.assert_array_equal(masked.data[kept], m[kept])


class TestAttentionLayer:
    def test_shape_preserved(self):
        x = Tensor(rand(8, 16, 16, seed=21))
        params = make_attention(8, 2, seed=4)
        y = blocks.attention_forward(x, params)
        assert y.shape == (8, 16, 16)

    def test_ratio_one_matches_dense_reference_layer(self):
        x = Tensor(rand(2, 8, 12, 12, seed=22))
        params = make_attention(8, 2, ratios=(1.0,), seed=5)
        y = blocks.attention_forward(x, params)
        ref = blocks.dense_attention_forward(x, params)
        np.testing.assert_allclose(y.data, ref.data, rtol=1e-5, atol=1e-6)


class TestFeedForward:
    def test_zero_reduce_is_identity(self):
        c = 8
        cfg = network.NetworkConfig(base_channels=c, depths=(1, 1, 1, 1, 1),
                                    heads=(2, 2, 2, 2))
        model = network.build_model(cfg, seed=7)
        ffn = model.encoder[0][0].ffn
        ffn.reduce.w.data[:] = 0
        ffn.reduce.b.data[:] = 0
        x = Tensor(rand(c, 10, 10, seed=23))
        y = blocks.feed_forward(x, ffn)
        np.testing.assert_array_equal(y.data, x.data)

    def test_expanded_channels_rule(self):
        assert blocks.expanded_channels(48, 2.66) == 128
        assert blocks.expanded_channels(8, 2.66) == 22
        assert blocks.expanded_channels(96, 2.66) == 256

    def test_shape_preserved(self):
        c = 48
        cfg = network.NetworkConfig(base_channels=c, depths=(1, 1, 1, 1, 1),
                                    heads=(1, 2, 4, 8))
        model = network.build_model(cfg, seed=8)
        x = Tensor(rand(2, c, 8, 8, seed=24))
        y = blocks.feed_forward(x, model.encoder[0][0].ffn)
        assert y.shape == (2, c, 8, 8)
        assert model.encoder[0][0].ffn.expand.w.shape[0] == 128


class TestExpertMixture:
    def _mefc(self, c=8, seed=9, experts=8):
        cfg = network.NetworkConfig(base_channels=c, depths=(1, 1, 1, 1, 1),
                                    heads=(2, 2, 2, 2), mefc_experts=experts)
        model = network.build_model(cfg, seed)
        return model.mefc_pre[0]

    def test_zero_gate_zero_bias_is_identity(self):
        p = self._mefc()
        p.w2.data[:] = 0
        p.fuse.b.data[:] = 0
        x = Tensor(rand(8, 9, 9, seed=25))
        y = blocks.expert_mixture_forward(x, p)
        np.testing.assert_array_equal(y.data, x.data)

    def test_one_hot_pool_expert_matches_composition(self):
        p = self._mefc()
        x = Tensor(rand(2, 8, 9, 9, seed=26))
        gate = np.zeros((2, 8), np.float32)
        gate[:, 0] = 1.0  # average-pool expert

        pooled = ops.avg_pool2d(x, 3, 1, 1)
        expected = ops.add(ops.conv2d(pooled, p.fuse.w, p.fuse.b), x)

        outs = blocks.expert_outputs(x, p)
        mixed = ops.mix(outs, Tensor(gate))
        got = ops.add(ops.conv2d(mixed, p.fuse.w, p.fuse.b), x)
        np.testing.assert_allclose(got.data, expected.data, rtol=1e-6)

    def test_all_experts_shape_preserving(self):
        p = self._mefc()
        x = Tensor(rand(2, 8, 12, 10, seed=27))
        for out in blocks.expert_outputs(x, p):
            assert out.shape == x.shape
        y = blocks.expert_mixture_forward(x, p)
        assert y.shape == x.shape

    def test_gate_expert_count_mismatch_rejected(self):
        p = self._mefc()
        p.n_experts = 5
        with pytest.raises(Exception):
            blocks.ExpertMixtureParams(sep_depth=p.sep_depth, sep_point=p.sep_point,
                                       dil=p.dil, w1=p.w1, w2=p.w2, fuse=p.fuse,
                                       n_experts=5)

    def test_truncated_expert_menu(self):
        p1 = self._mefc(experts=1)
        x = Tensor(rand(8, 8, 8, seed=28))
        assert len(blocks.expert_outputs(x, p1)) == 1
        p4 = self._mefc(experts=4)
        assert len(blocks.expert_outputs(x, p4)) == 4


class TestBlock:
    def test_zeroed_projections_identity(self):
        cfg = network.NetworkConfig(base_channels=8, depths=(1, 1, 1, 1, 1),
                                    heads=(2, 2, 2, 2))
        model = network.build_model(cfg, seed=10)
        bp = model.encoder[0][0]
        bp.attn.out_proj.w.data[:] = 0
        bp.attn.out_proj.b.data[:] = 0
        bp.ffn.reduce.w.data[:] = 0
        bp.ffn.reduce.b.data[:] = 0
        x = Tensor(rand(8, 8, 8, seed=29))
        y = blocks.block_forward(x, bp)
        np.testing.assert_array_equal(y.data, x.data)

    def test_shape_preserved(self):
        cfg = network.NetworkConfig(base_channels=48, depths=(1, 1, 1, 1, 1),
                                    heads=(1, 2, 4, 8))
        model = network.build_model(cfg, seed=11)
        x = Tensor(rand(48, 32, 32, seed=30))
        y = blocks.block_forward(x, model.encoder[0][0])
        assert y.shape == (48, 32, 32)
