"""Analytic parameter and FLOP accounting.

FLOPs are multiply-accumulates times two, counted over convolutions,
matrix products, and the attention score/value products, mirroring the
layers the builder creates. Pooling, normalization, activations, and
softmax are not counted.
"""

from __future__ import annotations

from .blocks import DILATED_RATES, SEPARABLE_KERNELS, expanded_channels
from .network import expert_menu


def conv_flops(hw, c_in, c_out, k, groups=1):
    return 2 * hw * c_out * (c_in // groups) * k * k


def conv_params(c_in, c_out, k, groups=1, bias=True):
    return c_out * (c_in // groups) * k * k + (c_out if bias else 0)


def _attention_counts(c, heads, hw):
    chat = c // heads
    flops = conv_flops(hw, c, 3 * c, 1)          # qkv pointwise
    flops += conv_flops(hw, 3 * c, 3 * c, 3, groups=3 * c)
    flops += 2 * heads * chat * chat * hw        # scores Q K^T
    flops += 2 * heads * chat * chat * hw        # combined map times V
    flops += conv_flops(hw, c, c, 1)             # output projection
    params = conv_params(c, 3 * c, 1) + conv_params(3 * c, 3 * c, 3, groups=3 * c)
    params += conv_params(c, c, 1)
    return flops, params


def _ffn_counts(c, ratio, hw):
    e = expanded_channels(c, ratio)
    flops = conv_flops(hw, c, e, 1)
    flops += conv_flops(hw, e, e, 3, groups=e) + conv_flops(hw, e, e, 5, groups=e)
    flops += conv_flops(hw, 2 * e, 2 * e, 3, groups=2 * e)
    flops += conv_flops(hw, 2 * e, 2 * e, 5, groups=2 * e)
    flops += conv_flops(hw, 4 * e, c, 1)
    params = conv_params(c, e, 1)
    params += conv_params(e, e, 3, groups=e) + conv_params(e, e, 5, groups=e)
    params += conv_params(2 * e, 2 * e, 3, groups=2 * e)
    params += conv_params(2 * e, 2 * e, 5, groups=2 * e)
    params += conv_params(4 * e, c, 1)
    return flops, params


def _block_counts(c, heads, ratio, hw, n_ratios):
    fa, pa = _attention_counts(c, heads, hw)
    ff, pf = _ffn_counts(c, ratio, hw)
    params = pa + pf + 4 * c + n_ratios  # two layer norms + ratio logits
    return fa + ff, params


def _mefc_counts(cfg, hw):
    c = cfg.base_channels
    seps, dils = expert_menu(cfg.mefc_experts)
    flops = params = 0
    for k in seps:
        flops += conv_flops(hw, c, c, k, groups=c) + conv_flops(hw, c, c, 1)
        params += conv_params(c, c, k, groups=c) + conv_params(c, c, 1)
    for _ in dils:
        flops += conv_flops(hw, c, c, 3, groups=c)
        params += conv_params(c, c, 3, groups=c)
    flops += 2 * (cfg.mefc_hidden * c + cfg.mefc_experts * cfg.mefc_hidden)  # gate
    params += cfg.mefc_hidden * c + cfg.mefc_experts * cfg.mefc_hidden
    flops += conv_flops(hw, c, c, 1)
    params += conv_params(c, c, 1)
    return flops, params


def count_model(config, height=256, width=256):
    """Per-component {name: (flops, params)} plus totals.

    Spatial extents follow the level arithmetic: level i runs at
    (H, W) / 2**(i-1).
    """
    cfg = config
    nr = len(cfg.attn_ratios)
    hw = [height * width // 4 ** i for i in range(4)]
    comp = {}
    comp["patch_embed"] = (conv_flops(hw[0], 3, cfg.base_channels, 3),
                           conv_params(3, cfg.base_channels, 3))
    if cfg.mefc_enabled:
        f, p = _mefc_counts(cfg, hw[0])
        comp["mefc_pre"] = (f * cfg.depths[0], p * cfg.depths[0])
        comp["mefc_post"] = comp["mefc_pre"]
    for level in (1, 2, 3):
        c = cfg.level_channels(level)
        f, p = _block_counts(c, cfg.heads[level - 1], cfg.ffn_ratio, hw[level - 1], nr)
        comp[f"encoder.l{level}"] = (f * cfg.depths[level], p * cfg.depths[level])
        comp[f"decoder.l{level}"] = comp[f"encoder.l{level}"]
        comp[f"down.l{level}"] = (conv_flops(hw[level], 4 * c, 2 * c, 1),
                                  conv_params(4 * c, 2 * c, 1))
        comp[f"up.l{level}"] = (conv_flops(hw[level], 2 * c, 4 * c, 1),
                                conv_params(2 * c, 4 * c, 1))
        comp[f"fuse.l{level}"] = (conv_flops(hw[level - 1], 2 * c, c, 1),
                                  conv_params(2 * c, c, 1))
    c4 = cfg.level_channels(4)
    f, p = _block_counts(c4, cfg.heads[3], cfg.ffn_ratio, hw[3], nr)
    comp["bottleneck"] = (f * cfg.depths[4], p * cfg.depths[4])
    comp["output_proj"] = (conv_flops(hw[0], cfg.base_channels, 3, 3),
                           conv_params(cfg.base_channels, 3, 3))
    total_flops = sum(f for f, _ in comp.values())
    total_params = sum(p for _, p in comp.values())
    return comp, total_flops, total_params


def count_flops(config, height, width):
    """Total analytic FLOPs of one forward pass at the given extents."""
    _, flops, _ = count_model(config, height, width)
    return flops


def count_params(config):
    """Total learnable parameter count implied by the configuration."""
    _, _, params = count_model(config)
    return params


def report(config, height=256, width=256):
    """Human-readable per-component breakdown."""
    comp, flops, params = count_model(config, height, width)
    lines = [f"{'component':<16}{'GFLOPs':>12}{'params':>14}"]
    for name, (f, p) in comp.items():
        lines.append(f"{name:<16}{f / 1e9:>12.3f}{p:>14,}")
    lines.append(f"{'total':<16}{flops / 1e9:>12.3f}{params:>14,}")
    return "\n".join(lines)
