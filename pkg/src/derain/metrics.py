"""Luma-plane fidelity metrics.

Both metrics convert to the BT.601 Y channel of YCbCr as used in
deraining evaluation: Y = 65.481 R + 128.553 G + 24.966 B + 16 on [0, 1]
inputs, giving Y in [16, 235] on the 8-bit scale.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_L = 255.0


def rgb_to_y(img):
    """(H, W, 3) floats in [0, 1] -> BT.601 luma on the 0-255 scale."""
    img = np.asarray(img, dtype=np.float64)
    return (65.481 * img[..., 0] + 128.553 * img[..., 1]
            + 24.966 * img[..., 2] + 16.0)


def _check_pair(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"metric inputs must be equal-shape (H,W,3), got {a.shape} vs {b.shape}")
    return a, b


def psnr_y(a, b):
    """Peak signal-to-noise ratio on the Y plane, in dB (capped at 100)."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((rgb_to_y(a) - rgb_to_y(b)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(255.0 ** 2 / mse))


def _gaussian_kernel(size, sigma):
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(plane, kern):
    win = sliding_window_view(plane, kern.shape)
    return np.tensordot(win, kern, axes=([2, 3], [0, 1]))


def ssim_y(a, b):
    """Single-scale SSIM on the Y plane.

    11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, L=255, averaged
    over valid (fully inside) window positions only.
    """
    a, b = _check_pair(a, b)
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    ya, yb = rgb_to_y(a), rgb_to_y(b)
    kern = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    mu_a = _filter_valid(ya, kern)
    mu_b = _filter_valid(yb, kern)
    sa = _filter_valid(ya * ya, kern) - mu_a ** 2
    sb = _filter_valid(yb * yb, kern) - mu_b ** 2
    sab = _filter_valid(ya * yb, kern) - mu_a * mu_b
    c1 = (SSIM_K1 * SSIM_L) ** 2
    c2 = (SSIM_K2 * SSIM_L) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (sa + sb + c2)
    return float(np.mean(num / den))
