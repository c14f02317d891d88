"""Synthetic rain-streak degradation and clean-image synthesis.

Streaks are anti-aliased capsule segments accumulated additively, blurred,
and added to the clean image (so rainy >= clean pixel-wise before the
[0,1] clamp). Everything is deterministic given the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass
class RainParams:
    density_per_kpx: float = 2.0        # streaks per 1000 pixels
    length_range: tuple = (8.0, 18.0)   # pixels
    angle_range_deg: tuple = (-20.0, 20.0)  # from vertical
    width_range: tuple = (1.0, 2.0)     # pixels
    intensity_range: tuple = (0.15, 0.45)
    blur_sigma: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.density_per_kpx <= 0:
            raise ValueError("streak density must be positive")
        for name in ("length_range", "angle_range_deg", "width_range", "intensity_range"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ValueError(f"{name} is degenerate: ({lo}, {hi})")


PRESETS = {
    "light": RainParams(density_per_kpx=2.0, length_range=(8.0, 16.0),
                        angle_range_deg=(-18.0, 18.0), width_range=(1.0, 1.8),
                        intensity_range=(0.15, 0.40), blur_sigma=0.45),
    "heavy": RainParams(density_per_kpx=5.0, length_range=(12.0, 26.0),
                        angle_range_deg=(-25.0, 25.0), width_range=(1.0, 2.6),
                        intensity_range=(0.30, 0.65), blur_sigma=0.6),
}


def preset(name, seed=0):
    if name not in PRESETS:
        raise ValueError(f"unknown rain preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], seed=seed)


def _gauss_blur(layer, sigma):
    if sigma <= 0:
        return layer
    radius = max(1, int(np.ceil(3 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs ** 2) / (2 * sigma ** 2))
    k /= k.sum()
    padded = np.pad(layer, ((radius, radius), (0, 0)))
    out = np.zeros_like(layer)
    for i, kv in enumerate(k):
        out += kv * padded[i:i + layer.shape[0], :]
    padded = np.pad(out, ((0, 0), (radius, radius)))
    out2 = np.zeros_like(layer)
    for i, kv in enumerate(k):
        out2 += kv * padded[:, i:i + layer.shape[1]]
    return out2


def render_streak_layer(height, width, params, rng):
    """Additive streak intensity layer (H, W) >= 0."""
    layer = np.zeros((height, width), dtype=np.float64)
    count = int(round(params.density_per_kpx * height * width / 1000.0))
    for _ in range(count):
        cy = rng.uniform(0, height)
        cx = rng.uniform(0, width)
        angle = np.deg2rad(rng.uniform(*params.angle_range_deg))
        length = rng.uniform(*params.length_range)
        half_w = rng.uniform(*params.width_range) / 2.0
        intensity = rng.uniform(*params.intensity_range)
        dy, dx = np.cos(angle), np.sin(angle)
        y0, x0 = cy - dy * length / 2, cx - dx * length / 2
        y1, x1 = cy + dy * length / 2, cx + dx * length / 2
        lo_y = max(0, int(np.floor(min(y0, y1) - half_w - 1)))
        hi_y = min(height, int(np.ceil(max(y0, y1) + half_w + 2)))
        lo_x = max(0, int(np.floor(min(x0, x1) - half_w - 1)))
        hi_x = min(width, int(np.ceil(max(x0, x1) + half_w + 2)))
        if lo_y >= hi_y or lo_x >= hi_x:
            continue
        yy, xx = np.mgrid[lo_y:hi_y, lo_x:hi_x]
        # distance from each pixel center to the segment
        py, px = yy + 0.5 - y0, xx + 0.5 - x0
        t = np.clip((py * (y1 - y0) + px * (x1 - x0)) / (length ** 2 + 1e-12), 0.0, 1.0)
        dist = np.hypot(py - t * (y1 - y0), px - t * (x1 - x0))
        coverage = np.clip(half_w + 0.5 - dist, 0.0, 1.0)
        layer[lo_y:hi_y, lo_x:hi_x] += intensity * coverage
    return _gauss_blur(layer, params.blur_sigma)


def synth_rain(clean, params, rng=None):
    """Degrade a clean [0,1] (H,W,3) image with additive rain streaks."""
    clean = np.asarray(clean, dtype=np.float32)
    if rng is None:
        rng = np.random.default_rng(params.seed)
    layer = render_streak_layer(clean.shape[0], clean.shape[1], params, rng)
    rainy = clean + layer[:, :, None].astype(np.float32)
    return np.clip(rainy, 0.0, 1.0)


def _bilinear_upscale(grid, height, width):
    gh, gw = grid.shape[:2]
    ys = np.linspace(0, gh - 1, height)
    xs = np.linspace(0, gw - 1, width)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    return ((grid[y0][:, x0] * (1 - fy) * (1 - fx)) + (grid[y0][:, x1] * (1 - fy) * fx)
            + (grid[y1][:, x0] * fy * (1 - fx)) + (grid[y1][:, x1] * fy * fx))


def random_clean_image(height, width, rng):
    """Structured synthetic content: smooth background, soft shapes, faint
    texture; no streak-like structures."""
    base = _bilinear_upscale(rng.uniform(0.15, 0.85, size=(5, 5, 3)), height, width)
    yy, xx = np.mgrid[0:height, 0:width]
    for _ in range(int(rng.integers(3, 7))):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        ry = rng.uniform(height * 0.08, height * 0.4)
        rx = rng.uniform(width * 0.08, width * 0.4)
        theta = rng.uniform(0, np.pi)
        color = rng.uniform(0.05, 0.95, size=3)
        dy, dx = (yy + 0.5 - cy), (xx + 0.5 - cx)
        u = dy * np.cos(theta) + dx * np.sin(theta)
        v = -dy * np.sin(theta) + dx * np.cos(theta)
        d = (u / ry) ** 2 + (v / rx) ** 2
        alpha = np.clip(1.5 - 1.5 * d, 0.0, 1.0)[..., None]
        base = base * (1 - alpha) + color[None, None, :] * alpha
    texture = rng.standard_normal((height, width, 1)) * 0.015
    return np.clip(base + texture, 0.0, 1.0).astype(np.float32)
