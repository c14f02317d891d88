"""Network assembly: shapes, the global residual, determinism, resampling,
checkpoint round trips and the analytic parameter/FLOP ledger."""

import numpy as np
import pytest

from derain import flops, network, ops
from derain.autodiff import ConfigError, ShapeError, Tensor
from derain.checkpoint import CheckpointError
from derain.network import NetworkConfig, build_model, forward, tiny_config


def rand_img(h, w, seed=0, batch=None):
    rng = np.random.default_rng(seed)
    shape = (3, h, w) if batch is None else (batch, 3, h, w)
    return Tensor(rng.random(shape).astype(np.float32))


class TestConfig:
    def test_defaults_match_training_protocol(self):
        cfg = NetworkConfig()
        assert cfg.base_channels == 48
        assert cfg.depths == (4, 4, 6, 6, 8)
        assert cfg.heads == (1, 2, 4, 8)
        assert cfg.ffn_ratio == 2.66
        assert cfg.mefc_experts == 8 and cfg.mefc_hidden == 32
        assert cfg.attn_ratios == (1 / 2, 2 / 3, 3 / 4, 4 / 5)
        assert cfg.ratio_bounds == (1 / 2, 4 / 5)

    def test_divisibility_validation(self):
        with pytest.raises(ConfigError):
            NetworkConfig(base_channels=6, heads=(4, 4, 4, 4))

    def test_depth_validation(self):
        with pytest.raises(ConfigError):
            NetworkConfig(depths=(0, 1, 1, 1, 1))

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown"):
            NetworkConfig.from_dict({"base_channels": 8, "bogus": 1})

    def test_round_trip_dict(self):
        cfg = tiny_config()
        assert NetworkConfig.from_dict(cfg.to_dict()) == cfg


class TestBuild:
    def test_tiny_smoke(self):
        model = build_model(tiny_config(), seed=0)
        out = forward(model, rand_img(32, 32))
        assert out.shape == (3, 32, 32)
        assert np.isfinite(out.data).all()

    def test_same_seed_bit_identical(self):
        a = build_model(tiny_config(), seed=5)
        b = build_model(tiny_config(), seed=5)
        assert list(a.params) == list(b.params)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)

    def test_different_seed_differs(self):
        a = build_model(tiny_config(), seed=5)
        b = build_model(tiny_config(), seed=6)
        assert any((a.params[n].data != b.params[n].data).any()
                   for n in a.params if a.params[n].size > 4)

    def test_unique_hierarchical_names(self):
        model = build_model(tiny_config(), seed=0)
        names = list(model.params)
        assert len(names) == len(set(names))
        assert all("." in n for n in names)

    def test_default_param_count_near_paper(self):
        cfg = NetworkConfig()
        analytic = flops.count_params(cfg)
        assert abs(analytic - 33.7e6) / 33.7e6 < 0.20

    def test_analytic_params_match_built_model(self):
        for cfg in (tiny_config(), NetworkConfig(base_channels=16,
                                                 depths=(2, 1, 1, 2, 1),
                                                 heads=(1, 2, 4, 8))):
            model = build_model(cfg, seed=0)
            assert model.param_count() == flops.count_params(cfg)


class TestForward:
    def test_global_residual_identity(self):
        model = build_model(tiny_config(), seed=1)
        model.out_proj.w.data[:] = 0
        model.out_proj.b.data[:] = 0
        x = rand_img(32, 48, seed=2)
        out = forward(model, x)
        np.testing.assert_array_equal(out.data, x.data)

    def test_shape_preservation(self):
        model = build_model(tiny_config(), seed=1)
        out = forward(model, rand_img(64, 96, seed=3))
        assert out.shape == (3, 64, 96)

    def test_batched_forward_matches_single(self):
        model = build_model(tiny_config(), seed=1)
        xb = rand_img(32, 32, seed=4, batch=2)
        yb = forward(model, xb)
        for i in range(2):
            yi = forward(model, Tensor(xb.data[i]))
            np.testing.assert_allclose(yb.data[i], yi.data, rtol=1e-5, atol=1e-6)

    def test_non_multiple_of_8_rejected_with_hint(self):
        model = build_model(tiny_config(), seed=1)
        with pytest.raises(ShapeError, match="multiple"):
            forward(model, rand_img(33, 32))

    def test_forward_deterministic(self):
        model = build_model(tiny_config(), seed=1)
        x = rand_img(32, 32, seed=5)
        a = forward(model, x).data.copy()
        b = forward(model, x).data
        np.testing.assert_array_equal(a, b)

    def test_channel_shape_ledger(self):
        cfg = tiny_config()
        model = build_model(cfg, seed=1)
        x = ops.conv2d(rand_img(32, 32, seed=6), model.patch_embed.w,
                       model.patch_embed.b, padding=1)
        assert x.shape == (8, 32, 32)
        d1 = network.downsample(x, model.downs[0])
        assert d1.shape == (16, 16, 16)
        d2 = network.downsample(d1, model.downs[1])
        assert d2.shape == (32, 8, 8)
        d3 = network.downsample(d2, model.downs[2])
        assert d3.shape == (64, 4, 4)
        u3 = network.upsample(d3, model.ups[0])
        assert u3.shape == (32, 8, 8)

    def test_default_channel_ledger(self):
        cfg = NetworkConfig()
        assert [cfg.level_channels(i) for i in (1, 2, 3, 4)] == [48, 96, 192, 384]


class TestResampling:
    def test_down_then_up_restores_shape(self):
        model = build_model(tiny_config(), seed=2)
        x = Tensor(np.random.default_rng(7).standard_normal((8, 16, 16)).astype(np.float32))
        y = network.upsample(network.downsample(x, model.downs[0]), model.ups[-1])
        assert y.shape == x.shape

    def test_skip_fuse_pass_through(self):
        model = build_model(tiny_config(), seed=2)
        c = 8
        fuse_w = np.zeros((c, 2 * c, 1, 1), np.float32)
        fuse_w[:, :c, 0, 0] = np.eye(c)
        fuse = network.ConvP(Tensor(fuse_w), Tensor(np.zeros(c, np.float32)))
        dec = Tensor(np.random.default_rng(8).standard_normal((c, 8, 8)).astype(np.float32))
        enc = Tensor(np.zeros((c, 8, 8), np.float32))
        out = network.skip_fuse(dec, enc, fuse)
        np.testing.assert_allclose(out.data, dec.data, rtol=1e-6)

    def test_skip_fuse_spatial_mismatch(self):
        model = build_model(tiny_config(), seed=2)
        with pytest.raises(ShapeError):
            network.skip_fuse(Tensor(np.zeros((8, 8, 8), np.float32)),
                              Tensor(np.zeros((8, 4, 4), np.float32)),
                              model.fuses[-1])


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = build_model(tiny_config(), seed=3)
        x = rand_img(32, 32, seed=9)
        before = forward(model, x).data.copy()
        path = tmp_path / "m.ckpt"
        network.save_checkpoint(model, path, iteration=17)
        loaded, header, opt = network.load_checkpoint(path)
        assert header["iteration"] == 17 and opt is None
        for name in model.params:
            np.testing.assert_array_equal(loaded.params[name].data,
                                          model.params[name].data)
        after = forward(loaded, x).data
        np.testing.assert_array_equal(before, after)

    def test_corrupt_magic_rejected(self, tmp_path):
        model = build_model(tiny_config(), seed=3)
        path = tmp_path / "m.ckpt"
        network.save_checkpoint(model, path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(raw)
        with pytest.raises(CheckpointError, match="magic"):
            network.load_checkpoint(path)

    def test_truncated_rejected(self, tmp_path):
        model = build_model(tiny_config(), seed=3)
        path = tmp_path / "m.ckpt"
        network.save_checkpoint(model, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:len(raw) // 2])
        with pytest.raises(CheckpointError, match="truncated"):
            network.load_checkpoint(path)

    def test_config_mismatch_rejected(self, tmp_path):
        model = build_model(tiny_config(), seed=3)
        path = tmp_path / "m.ckpt"
        network.save_checkpoint(model, path)
        other = NetworkConfig()
        with pytest.raises(CheckpointError, match="config"):
            network.load_checkpoint(path, expect_config=other)
        loaded, _, _ = network.load_checkpoint(path, expect_config=other, override=True)
        assert loaded.config == tiny_config()

    def test_optimizer_state_round_trip(self, tmp_path):
        model = build_model(tiny_config(), seed=3)
        ms = {n: np.full(t.shape, 0.25, np.float32) for n, t in model.params.items()}
        vs = {n: np.full(t.shape, 0.5, np.float32) for n, t in model.params.items()}
        path = tmp_path / "m.ckpt"
        network.save_checkpoint(model, path, iteration=5, optimizer=(5, ms, vs))
        _, header, opt = network.load_checkpoint(path)
        step, m2, v2 = opt
        assert step == 5
        np.testing.assert_array_equal(m2["patch_embed.weight"],
                                      ms["patch_embed.weight"])


class TestFlops:
    def test_pointwise_conv_definition(self):
        assert flops.conv_flops(16 * 16, 4, 8, 1) == 2 * 16 * 16 * 4 * 8

    def test_default_config_near_paper_flops(self):
        total = flops.count_flops(NetworkConfig(), 256, 256)
        assert abs(total - 242.9e9) / 242.9e9 < 0.20

    def test_hand_tallied_tiny_network(self):
        # single block everywhere, C=8, no compensators, 8x8 input
        cfg = NetworkConfig(base_channels=8, depths=(1, 1, 1, 1, 1),
                            heads=(1, 2, 4, 4), mefc_enabled=False)
        hw = [64, 16, 4, 1]

        def attn(c, h, px):
            chat = c // h
            return (2 * px * c * 3 * c + 2 * px * 3 * c * 9
                    + 2 * h * chat * chat * px * 2 + 2 * px * c * c)

        def ffn(c, px):
            e = 2 * round(2.66 * c / 2)
            return (2 * px * c * e + 2 * px * e * 9 + 2 * px * e * 25
                    + 2 * px * 2 * e * 9 + 2 * px * 2 * e * 25 + 2 * px * 4 * e * c)

        expected = 2 * 64 * 3 * 8 * 9                     # patch embed
        for level, (c, h) in enumerate([(8, 1), (16, 2), (32, 4)]):
            expected += 2 * (attn(c, h, hw[level]) + ffn(c, hw[level]))  # enc+dec
            expected += 2 * hw[level + 1] * 4 * c * 2 * c  # down
            expected += 2 * hw[level + 1] * 2 * c * 4 * c  # up
            expected += 2 * hw[level] * 2 * c * c          # fuse
        expected += attn(64, 4, 1) + ffn(64, 1)            # bottleneck
        expected += 2 * 64 * 8 * 3 * 9                     # output projection
        assert flops.count_flops(cfg, 8, 8) == expected

    def test_report_lists_components(self):
        text = flops.report(NetworkConfig(), 256, 256)
        for key in ("patch_embed", "bottleneck", "mefc_pre", "total"):
            assert key in text
