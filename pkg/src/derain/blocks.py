"""Transformer building blocks: top-k sparse channel attention, the
mixed-scale feed-forward network, the convolutional expert mixture, and
their composition into one residual block.

Attention runs across channels: per head, the Q/K/V matrices have shape
(channels-per-head, H*W), giving a square channel-by-channel attention
matrix instead of a spatial one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autodiff import ConfigError, ShapeError, Tensor

DEFAULT_RATIOS = (1 / 2, 2 / 3, 3 / 4, 4 / 5)
DEFAULT_RATIO_BOUNDS = (1 / 2, 4 / 5)

# expert menu: 3x3 average pool, separable convs 1/3/5/7, and dilated 3x3
# depthwise convs with receptive fields 3/5/7
SEPARABLE_KERNELS = (1, 3, 5, 7)
DILATED_RATES = (1, 2, 3)
N_EXPERTS = 1 + len(SEPARABLE_KERNELS) + len(DILATED_RATES)


def round_half_up(x):
    return int(math.floor(x + 0.5))


def keep_count(ratio, chat):
    """Entries kept per attention row for a sparsity ratio."""
    return max(1, round_half_up(ratio * chat))


@dataclass
class ConvP:
    """One convolution's parameters."""
    w: Tensor
    b: Tensor | None = None


@dataclass
class LayerNormP:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-6


@dataclass
class AttentionParams:
    """Projection weights and sparsity configuration for one attention layer."""

    qkv_point: ConvP            # 1x1, C -> 3C
    qkv_depth: ConvP            # 3x3 depthwise over 3C channels
    out_proj: ConvP             # 1x1, C -> C
    heads: int
    ratios: tuple = DEFAULT_RATIOS          # candidate sparsity fractions
    ratio_logits: Tensor = None             # (len(ratios),) mixing logits
    ratio_bounds: tuple = DEFAULT_RATIO_BOUNDS

    def __post_init__(self):
        c = self.out_proj.w.shape[0]
        if c % self.heads:
            raise ConfigError(f"channels {c} not divisible by heads {self.heads}")
        if not self.ratios:
            raise ConfigError("attention needs at least one sparsity ratio")
        lo, hi = self.ratio_bounds
        for r in self.ratios:
            if not lo <= r <= hi:
                raise ConfigError(f"ratio {r} outside sparsity interval [{lo}, {hi}]")
        if self.ratio_logits is None or self.ratio_logits.shape != (len(self.ratios),):
            raise ConfigError("ratio_logits must have one entry per candidate ratio")

    @property
    def channels(self):
        return self.out_proj.w.shape[0]

    @property
    def temperature(self):
        return math.sqrt(self.channels / self.heads)


@dataclass
class FeedForwardParams:
    """Mixed-scale feed-forward weights; expanded width is round(r*C) even."""

    expand: ConvP               # 1x1, C -> E
    dw3_a: ConvP                # 3x3 depthwise on E
    dw5_a: ConvP                # 5x5 depthwise on E
    dw3_b: ConvP                # 3x3 depthwise on 2E
    dw5_b: ConvP                # 5x5 depthwise on 2E
    reduce: ConvP               # 1x1, 4E -> C
    ratio: float = 2.66


def expanded_channels(c, ratio):
    """round(ratio*C) snapped to the nearest even count."""
    return 2 * round_half_up(ratio * c / 2)


@dataclass
class ExpertMixtureParams:
    """Gated bank of shape-preserving convolutional experts."""

    sep_depth: list              # ConvP per separable kernel
    sep_point: list
    dil: list                    # ConvP per dilated depthwise conv
    w1: Tensor                   # (T, C)
    w2: Tensor                   # (O, T)
    fuse: ConvP                  # 1x1, C -> C
    n_experts: int = N_EXPERTS

    def __post_init__(self):
        if self.w2.shape[0] != self.n_experts:
            raise ConfigError(
                f"gate produces {self.w2.shape[0]} coefficients for {self.n_experts} experts")


@dataclass
class BlockParams:
    """One residual transformer block (norm -> attention, norm -> FFN)."""

    ln1: LayerNormP
    ln2: LayerNormP
    attn: AttentionParams
    ffn: FeedForwardParams


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def dense_channel_attention(q, k, v, temperature):
    """softmax(q @ k.T / temperature) @ v over the trailing two axes."""
    scores = ops.scale(ops.matmul(q, ops.transpose_last2(k)), 1.0 / temperature)
    return ops.matmul(ops.softmax_rows(scores), v)


def sparse_channel_attention(q, k, v, params):
    """Convex combination of top-k masked attention branches.

    Each candidate ratio keeps max(1, round(ratio*chat)) scores per row;
    branch attention maps are mixed with softmax(ratio_logits) before the
    value product (the product is linear, so mixing maps or mixing branch
    outputs is the same).
    """
    chat = q.shape[-2]
    scores = ops.scale(ops.matmul(q, ops.transpose_last2(k)), 1.0 / params.temperature)
    maps = [ops.softmax_rows(ops.top_k_mask(scores, keep_count(r, chat)))
            for r in params.ratios]
    if len(maps) == 1:
        attn = maps[0]
    else:
        weights = ops.softmax_rows(params.ratio_logits)
        attn = ops.mix(maps, weights)
    return ops.matmul(attn, v)


def _split_heads(t, heads):
    lead = t.shape[:-3]
    c, h, w = t.shape[-3:]
    return ops.reshape(t, lead + (heads, c // heads, h * w))


def attention_forward(x, params):
    """Top-k sparse channel attention layer: qkv encoding, per-head sparse
    attention, head merge and output projection. Shape preserving."""
    had_batch = x.ndim == 4
    lead = x.shape[:-3]
    c, h, w = x.shape[-3:]
    if c != params.channels:
        raise ShapeError(f"attention built for {params.channels} channels, got {c}")
    y = ops.conv2d(x, params.qkv_point.w, params.qkv_point.b)
    y = ops.conv2d(y, params.qkv_depth.w, params.qkv_depth.b, groups=3 * c, padding=1)
    q = _split_heads(ops.slice_channels(y, 0, c), params.heads)
    k = _split_heads(ops.slice_channels(y, c, 2 * c), params.heads)
    v = _split_heads(ops.slice_channels(y, 2 * c, 3 * c), params.heads)
    out = sparse_channel_attention(q, k, v, params)
    out = ops.reshape(out, lead + (c, h, w))
    return ops.conv2d(out, params.out_proj.w, params.out_proj.b)


def dense_attention_forward(x, params):
    """Reference layer: identical wiring but dense (keep-all) attention."""
    c, h, w = x.shape[-3:]
    lead = x.shape[:-3]
    y = ops.conv2d(x, params.qkv_point.w, params.qkv_point.b)
    y = ops.conv2d(y, params.qkv_depth.w, params.qkv_depth.b, groups=3 * c, padding=1)
    q = _split_heads(ops.slice_channels(y, 0, c), params.heads)
    k = _split_heads(ops.slice_channels(y, c, 2 * c), params.heads)
    v = _split_heads(ops.slice_channels(y, 2 * c, 3 * c), params.heads)
    out = dense_channel_attention(q, k, v, params.temperature)
    out = ops.reshape(out, lead + (c, h, w))
    return ops.conv2d(out, params.out_proj.w, params.out_proj.b)


# ---------------------------------------------------------------------------
# feed-forward
# ---------------------------------------------------------------------------


def _feed_forward_core(x, params):
    """Expansion, two interleaved depthwise scales with cross-concatenation,
    and reduction; no normalization, no residual."""
    y = ops.conv2d(x, params.expand.w, params.expand.b)
    e = y.shape[-3]
    p1 = ops.relu(ops.conv2d(y, params.dw3_a.w, params.dw3_a.b, groups=e, padding=1))
    s1 = ops.relu(ops.conv2d(y, params.dw5_a.w, params.dw5_a.b, groups=e, padding=2))
    c1 = ops.concat_channels([p1, s1])
    c2 = ops.concat_channels([s1, p1])
    p2 = ops.relu(ops.conv2d(c1, params.dw3_b.w, params.dw3_b.b, groups=2 * e, padding=1))
    s2 = ops.relu(ops.conv2d(c2, params.dw5_b.w, params.dw5_b.b, groups=2 * e, padding=2))
    return ops.conv2d(ops.concat_channels([p2, s2]), params.reduce.w, params.reduce.b)


def feed_forward(x, params):
    """Mixed-scale feed-forward network with its residual connection.

    Inside a block the normalization is applied by the caller; this
    standalone form operates on the raw input.
    """
    return ops.add(_feed_forward_core(x, params), x)


# ---------------------------------------------------------------------------
# expert mixture
# ---------------------------------------------------------------------------


def expert_outputs(x, params):
    """Evaluate the expert bank; every output matches the input shape."""
    outs = [ops.avg_pool2d(x, kernel=3, stride=1, padding=1)]
    for dw, pw in zip(params.sep_depth, params.sep_point):
        outs.append(ops.separable_conv2d(x, dw.w, pw.w, dw.b, pw.b))
    c = x.shape[-3]
    for rate, p in zip(DILATED_RATES, params.dil):
        outs.append(ops.conv2d(x, p.w, p.b, dilation=rate, groups=c, padding=rate))
    return outs


def expert_gate(x, params):
    """Per-sample expert coefficients from the global channel descriptor."""
    had_batch = x.ndim == 4
    z = ops.global_avg_channels(x)
    if not had_batch:
        z = ops.reshape(z, (1, z.shape[0]))
    hidden = ops.relu(ops.linear(z, params.w1))
    return ops.linear(hidden, params.w2)


def expert_mixture_forward(x, params):
    """Gate-weighted sum of expert outputs, fused by a 1x1 conv, plus the
    residual input."""
    had_batch = x.ndim == 4
    gate = expert_gate(x, params)
    outs = expert_outputs(x, params)
    if gate.shape[0] != params.n_experts and gate.shape[-1] != params.n_experts:
        raise ShapeError("gate width disagrees with expert count")
    if not had_batch:
        outs = [ops.reshape(o, (1,) + o.shape) for o in outs]
        mixed = ops.mix(outs, gate)
        mixed = ops.reshape(mixed, mixed.shape[1:])
    else:
        mixed = ops.mix(outs, gate)
    fused = ops.conv2d(mixed, params.fuse.w, params.fuse.b)
    return ops.add(fused, x)


# ---------------------------------------------------------------------------
# full block
# ---------------------------------------------------------------------------


def block_forward(x, params):
    """Residual block: x + attn(LN(x)), then + ffn-core(LN(.))."""
    a = ops.layer_norm(x, params.ln1.gamma, params.ln1.beta, params.ln1.eps)
    x1 = ops.add(x, attention_forward(a, params.attn))
    b = ops.layer_norm(x1, params.ln2.gamma, params.ln2.beta, params.ln2.eps)
    return ops.add(x1, _feed_forward_core(b, params.ffn))
