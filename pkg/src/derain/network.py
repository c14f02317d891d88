"""Four-level encoder-decoder assembly: patch embedding, stacked residual
transformer blocks per level, pixel-(un)shuffle resampling, skip fusion,
optional expert-mixture stages at the entry and exit, and the global
residual that turns the network into a correction predictor.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import blocks, ops
from .autodiff import ConfigError, ShapeError, Tensor
from .blocks import (AttentionParams, BlockParams, ConvP, ExpertMixtureParams,
                     FeedForwardParams, LayerNormP, DEFAULT_RATIO_BOUNDS,
                     DEFAULT_RATIOS, DILATED_RATES, SEPARABLE_KERNELS,
                     expanded_channels)

N_LEVELS = 4


@dataclass
class NetworkConfig:
    """Architecture hyperparameters.

    depths = (compensator count, level-1 .. level-4 block counts); level i
    runs at base_channels * channel_growth**(i-1) channels and spatial
    extents divided by 2**(i-1).
    """

    base_channels: int = 48
    depths: tuple = (4, 4, 6, 6, 8)
    heads: tuple = (1, 2, 4, 8)
    ffn_ratio: float = 2.66
    mefc_enabled: bool = True
    mefc_experts: int = 8
    mefc_hidden: int = 32
    ratio_bounds: tuple = DEFAULT_RATIO_BOUNDS
    attn_ratios: tuple = DEFAULT_RATIOS
    channel_growth: int = 2

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.heads = tuple(int(h) for h in self.heads)
        self.ratio_bounds = tuple(float(v) for v in self.ratio_bounds)
        self.attn_ratios = tuple(float(v) for v in self.attn_ratios)
        if len(self.depths) != N_LEVELS + 1:
            raise ConfigError(f"depths needs {N_LEVELS + 1} entries, got {self.depths}")
        if len(self.heads) != N_LEVELS:
            raise ConfigError(f"heads needs {N_LEVELS} entries, got {self.heads}")
        if any(d < 1 for d in self.depths):
            raise ConfigError(f"all depths must be >= 1, got {self.depths}")
        for i, h in enumerate(self.heads):
            if self.level_channels(i + 1) % h:
                raise ConfigError(
                    f"level {i + 1} channels {self.level_channels(i + 1)} "
                    f"not divisible by heads {h}")
        if not 1 <= self.mefc_experts <= blocks.N_EXPERTS:
            raise ConfigError(f"expert count must be in [1, {blocks.N_EXPERTS}]")
        lo, hi = self.ratio_bounds
        for r in self.attn_ratios:
            if not lo <= r <= hi:
                raise ConfigError(f"ratio {r} outside sparsity interval [{lo}, {hi}]")

    def level_channels(self, level):
        return self.base_channels * self.channel_growth ** (level - 1)

    def to_dict(self):
        return {
            "base_channels": self.base_channels,
            "depths": list(self.depths),
            "heads": list(self.heads),
            "ffn_ratio": self.ffn_ratio,
            "mefc_enabled": self.mefc_enabled,
            "mefc_experts": self.mefc_experts,
            "mefc_hidden": self.mefc_hidden,
            "ratio_bounds": list(self.ratio_bounds),
            "attn_ratios": list(self.attn_ratios),
            "channel_growth": self.channel_growth,
        }

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        kw = dict(d)
        for key in ("depths", "heads", "ratio_bounds", "attn_ratios"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


TINY_CONFIG = dict(base_channels=8, depths=(1, 1, 2, 2, 2), heads=(1, 2, 4, 4))


def tiny_config(**overrides):
    """Desk-scale configuration used by the smoke and training tests."""
    kw = dict(TINY_CONFIG)
    kw.update(overrides)
    return NetworkConfig(**kw)


@dataclass
class Model:
    config: NetworkConfig
    params: "OrderedDict[str, Tensor]"
    patch_embed: ConvP
    mefc_pre: list
    encoder: list               # levels 1..3: list of BlockParams
    downs: list                 # ConvP after pixel-unshuffle
    bottleneck: list
    ups: list                   # ConvP before pixel-shuffle
    fuses: list                 # skip-fusion 1x1 convs, deepest first
    decoder: list               # levels 3..1
    mefc_post: list
    out_proj: ConvP
    dtype: object = np.float32

    def param_count(self):
        return sum(int(t.size) for t in self.params.values())

    def set_requires_grad(self, flag):
        for t in self.params.values():
            t.requires_grad = flag


class _ParamFactory:
    """Creates named parameter tensors in deterministic construction order."""

    def __init__(self, seed, dtype):
        self.rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.dtype = dtype
        self.registry = OrderedDict()

    def _register(self, name, arr):
        if name in self.registry:
            raise ConfigError(f"duplicate parameter name {name}")
        t = Tensor(arr.astype(self.dtype), requires_grad=False)
        self.registry[name] = t
        return t

    def trunc_normal(self, name, shape, std=0.02):
        x = self.rng.standard_normal(shape)
        for _ in range(16):
            bad = np.abs(x) > 2.0
            if not bad.any():
                break
            x[bad] = self.rng.standard_normal(int(bad.sum()))
        return self._register(name, np.clip(x, -2.0, 2.0) * std)

    def zeros(self, name, shape):
        return self._register(name, np.zeros(shape))

    def ones(self, name, shape):
        return self._register(name, np.ones(shape))

    def conv(self, name, c_out, c_in_g, k):
        w = self.trunc_normal(f"{name}.weight", (c_out, c_in_g, k, k))
        b = self.zeros(f"{name}.bias", (c_out,))
        return ConvP(w, b)

    def layer_norm(self, name, c):
        return LayerNormP(self.ones(f"{name}.gamma", (c,)),
                          self.zeros(f"{name}.beta", (c,)))


def _build_attention(f, name, c, heads, cfg):
    return AttentionParams(
        qkv_point=f.conv(f"{name}.qkv_point", 3 * c, c, 1),
        qkv_depth=f.conv(f"{name}.qkv_depth", 3 * c, 1, 3),
        out_proj=f.conv(f"{name}.out_proj", c, c, 1),
        heads=heads,
        ratios=cfg.attn_ratios,
        ratio_logits=f.zeros(f"{name}.ratio_logits", (len(cfg.attn_ratios),)),
        ratio_bounds=cfg.ratio_bounds,
    )


def _build_ffn(f, name, c, ratio):
    e = expanded_channels(c, ratio)
    return FeedForwardParams(
        expand=f.conv(f"{name}.expand", e, c, 1),
        dw3_a=f.conv(f"{name}.dw3_a", e, 1, 3),
        dw5_a=f.conv(f"{name}.dw5_a", e, 1, 5),
        dw3_b=f.conv(f"{name}.dw3_b", 2 * e, 1, 3),
        dw5_b=f.conv(f"{name}.dw5_b", 2 * e, 1, 5),
        reduce=f.conv(f"{name}.reduce", c, 4 * e, 1),
        ratio=ratio,
    )


def _build_block(f, name, c, heads, cfg):
    return BlockParams(
        ln1=f.layer_norm(f"{name}.ln1", c),
        ln2=f.layer_norm(f"{name}.ln2", c),
        attn=_build_attention(f, f"{name}.attn", c, heads, cfg),
        ffn=_build_ffn(f, f"{name}.ffn", c, cfg.ffn_ratio),
    )


def expert_menu(n_experts):
    """(separable kernels, dilation rates) for the first n experts of the
    fixed menu: pool, sep 1/3/5/7, dilated 1/2/3."""
    if not 1 <= n_experts <= blocks.N_EXPERTS:
        raise ConfigError(f"expert count must be in [1, {blocks.N_EXPERTS}]")
    n_sep = min(len(SEPARABLE_KERNELS), n_experts - 1)
    n_dil = n_experts - 1 - n_sep
    return SEPARABLE_KERNELS[:n_sep], DILATED_RATES[:n_dil]

def _build_mefc(f, name, c, cfg):
    seps, dils = expert_menu(cfg.mefc_experts)
    sep_depth = [f.conv(f"{name}.sep{k}.depth", c, 1, k) for k in seps]
    sep_point = [f.conv(f"{name}.sep{k}.point", c, c, 1) for k in seps]
    dil = [f.conv(f"{name}.dil{r}", c, 1, 3) for r in dils]
    return ExpertMixtureParams(
        sep_depth=sep_depth,
        sep_point=sep_point,
        dil=dil,
        w1=f.trunc_normal(f"{name}.gate_w1", (cfg.mefc_hidden, c)),
        w2=f.trunc_normal(f"{name}.gate_w2", (cfg.mefc_experts, cfg.mefc_hidden)),
        fuse=f.conv(f"{name}.fuse", c, c, 1),
        n_experts=cfg.mefc_experts,
    )


def build_model(config, seed, dtype=np.float32):
    """Deterministically initialize all parameters from the seed.

    Conv and projection weights are truncated-normal (std 0.02, clipped at
    two sigma), biases zero, layer-norm scales one, ratio logits zero
    (uniform mixing over candidate ratios).
    """
    f = _ParamFactory(seed, dtype)
    cfg = config
    c = cfg.base_channels

    patch_embed = f.conv("patch_embed", c, 3, 3)
    mefc_pre = [_build_mefc(f, f"mefc_pre.{i}", c, cfg)
                for i in range(cfg.depths[0])] if cfg.mefc_enabled else []
    encoder, downs = [], []
    for level in (1, 2, 3):
        cl = cfg.level_channels(level)
        encoder.append([_build_block(f, f"encoder.l{level}.{j}", cl,
                                     cfg.heads[level - 1], cfg)
                        for j in range(cfg.depths[level])])
        downs.append(f.conv(f"down.l{level}", 2 * cl, 4 * cl, 1))
    c4 = cfg.level_channels(4)
    bottleneck = [_build_block(f, f"bottleneck.{j}", c4, cfg.heads[3], cfg)
                  for j in range(cfg.depths[4])]
    ups, fuses, decoder = [], [], []
    for level in (3, 2, 1):
        cl = cfg.level_channels(level)
        ups.append(f.conv(f"up.l{level}", 2 * cl * 2, 2 * cl, 1))
        fuses.append(f.conv(f"fuse.l{level}", cl, 2 * cl, 1))
        decoder.append([_build_block(f, f"decoder.l{level}.{j}", cl,
                                     cfg.heads[level - 1], cfg)
                        for j in range(cfg.depths[level])])
    mefc_post = [_build_mefc(f, f"mefc_post.{i}", c, cfg)
                 for i in range(cfg.depths[0])] if cfg.mefc_enabled else []
    out_proj = f.conv("out_proj", 3, c, 3)

    return Model(config=cfg, params=f.registry, patch_embed=patch_embed,
                 mefc_pre=mefc_pre, encoder=encoder, downs=downs,
                 bottleneck=bottleneck, ups=ups, fuses=fuses, decoder=decoder,
                 mefc_post=mefc_post, out_proj=out_proj, dtype=dtype)


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


def downsample(x, conv):
    """pixel-unshuffle by 2 (C -> 4C) then 1x1 conv to 2C."""
    return ops.conv2d(ops.pixel_unshuffle(x, 2), conv.w, conv.b)


def upsample(x, conv):
    """1x1 conv to 2C then pixel-shuffle by 2 (-> C/2)."""
    return ops.pixel_shuffle(ops.conv2d(x, conv.w, conv.b), 2)


def skip_fuse(decoder_feat, encoder_feat, conv):
    """Concatenate decoder and encoder features, reduce with a 1x1 conv."""
    if decoder_feat.shape[-2:] != encoder_feat.shape[-2:]:
        raise ShapeError(
            f"skip fusion spatial mismatch: {decoder_feat.shape} vs {encoder_feat.shape}")
    return ops.conv2d(ops.concat_channels([decoder_feat, encoder_feat]), conv.w, conv.b)


def forward(model, rainy):
    """Restore an image: encoder-decoder correction plus the input.

    rainy: Tensor (3,H,W) or (B,3,H,W) with H, W multiples of 8 and values
    in [0,1]. Output is not clamped; clamping happens at image export.
    """
    x = rainy
    h, w = x.shape[-2:]
    if h % 8 or w % 8:
        raise ShapeError(
            f"input extents {h}x{w} must be multiples of 8; pad (e.g. reflect) "
            "to the next multiple and crop the output")
    cfg = model.config
    feat = ops.conv2d(x, model.patch_embed.w, model.patch_embed.b, padding=1)
    for p in model.mefc_pre:
        feat = blocks.expert_mixture_forward(feat, p)
    skips = []
    for i, level_blocks in enumerate(model.encoder):
        for p in level_blocks:
            feat = blocks.block_forward(feat, p)
        skips.append(feat)
        feat = downsample(feat, model.downs[i])
    for p in model.bottleneck:
        feat = blocks.block_forward(feat, p)
    for i, level_blocks in enumerate(model.decoder):
        feat = upsample(feat, model.ups[i])
        feat = skip_fuse(feat, skips[-(i + 1)], model.fuses[i])
        for p in level_blocks:
            feat = blocks.block_forward(feat, p)
    for p in model.mefc_post:
        feat = blocks.expert_mixture_forward(feat, p)
    correction = ops.conv2d(feat, model.out_proj.w, model.out_proj.b, padding=1)
    return ops.add(correction, x)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_checkpoint(model, path, iteration=0, optimizer=None):
    """Write the model (and optional optimizer moments) to a checkpoint."""
    from . import checkpoint
    checkpoint.save(path, model.config.to_dict(), model.params,
                    iteration=iteration, optimizer=optimizer)


def load_checkpoint(path, expect_config=None, override=False):
    """Rebuild a model from a checkpoint, bit-exactly.

    expect_config: when given, its digest must match the stored one unless
    override is set. Returns (model, header, (step, m, v) or None).
    """
    from . import checkpoint
    header, records = checkpoint.load(path)
    stored = NetworkConfig.from_dict(header["config"])
    if expect_config is not None and not override:
        if checkpoint.config_digest(expect_config.to_dict()) != header["config_digest"]:
            raise checkpoint.CheckpointError(
                "checkpoint config does not match the requested config "
                "(pass override to load anyway)")
    params, ms, vs = checkpoint.split_optimizer(records)
    model = build_model(stored, seed=0)
    if set(params) != set(model.params):
        missing = sorted(set(model.params) - set(params))[:3]
        extra = sorted(set(params) - set(model.params))[:3]
        raise checkpoint.CheckpointError(
            f"parameter name mismatch (missing {missing}, unexpected {extra})")
    for name, arr in params.items():
        t = model.params[name]
        if t.data.shape != arr.shape:
            raise checkpoint.CheckpointError(
                f"{name}: stored shape {arr.shape} != model shape {t.data.shape}")
        t.data = arr
    opt = None
    if header.get("optimizer"):
        opt = (header.get("optimizer_step", 0), ms, vs)
    return model, header, opt
