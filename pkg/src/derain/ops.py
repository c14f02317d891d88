"""Differentiable tensor operations.

Every public function takes and returns ``Tensor`` values, records itself
on the active tape (see ``derain.autodiff``), and never mutates its
inputs. The canonical feature layout is (C, H, W) with an optional leading
batch extent; 3-D inputs are promoted to a singleton batch internally.

Reduction order is fixed: convolutions accumulate kernel taps in row-major
(ky, kx) order and matrix products go through BLAS with a fixed blocking,
so identical inputs give bit-identical outputs across runs. Output buffers
come from a recycling pool (see ``derain._pool``) and are always fully
overwritten before use.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels
from ._pool import pool
from .autodiff import ConfigError, ShapeError, Tensor, tape_put

NEG_INF = float("-inf")


def _as4d(a):
    """Promote (C,H,W) to (1,C,H,W); returns (array, had_batch)."""
    if a.ndim == 3:
        return a[None], False
    if a.ndim == 4:
        return a, True
    raise ShapeError(f"expected 3-D or 4-D feature tensor, got shape {a.shape}")


def _restore(y, had_batch):
    return y if had_batch else y[0]


def _contig(a):
    return np.ascontiguousarray(a)


def _pad_hw(a, p):
    """Zero padding of the two trailing axes through the buffer pool."""
    if p == 0:
        return a
    b, c, h, w = a.shape
    out = pool.take((b, c, h + 2 * p, w + 2 * p), a.dtype)
    out[:, :, :p, :] = 0
    out[:, :, h + p:, :] = 0
    out[:, :, p:h + p, :p] = 0
    out[:, :, p:h + p, w + p:] = 0
    out[:, :, p:-p, p:-p] = a
    return out


# ---------------------------------------------------------------------------
# convolution family
# ---------------------------------------------------------------------------


def _conv_out_size(n, k, stride, dilation, pad):
    return (n + 2 * pad - (k - 1) * dilation - 1) // stride + 1


def _grouped_forward_raw(x, w, stride, dilation, groups, pad):
    """General grouped correlation via im2col. x (B,Cin,H,W)."""
    cout, cin_g, kh, kw = w.shape
    x = _pad_hw(x, pad)
    eh = (kh - 1) * dilation + 1
    ew = (kw - 1) * dilation + 1
    win = sliding_window_view(x, (eh, ew), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, ::dilation, ::dilation]
    b, _, ho, wo = win.shape[:4]
    if groups == 1:
        # (B,HO,WO, Cin*kh*kw) columns, then one GEMM against the kernel
        cols = pool.take((b, ho, wo, cin_g, kh, kw), x.dtype)
        np.copyto(cols, win.transpose(0, 2, 3, 1, 4, 5))
        cols = cols.reshape(b * ho * wo, cin_g * kh * kw)
        yt = pool.take((b * ho * wo, cout), x.dtype)
        np.matmul(cols, w.reshape(cout, -1).T, out=yt)
        y = pool.take((b, cout, ho, wo), x.dtype)
        y.reshape(b, cout, ho * wo)[:] = yt.reshape(b, ho * wo, cout).transpose(0, 2, 1)
        return y
    win = win.reshape(b, groups, cin_g, ho, wo, kh, kw)
    wg = w.reshape(groups, cout // groups, cin_g, kh, kw)
    y = pool.take((b, groups, cout // groups, ho, wo), x.dtype)
    np.einsum("bgchwuv,gocuv->bgohw", win, wg, out=y, optimize=True)
    return y.reshape(b, cout, ho, wo)


def _depthwise_raw(x, w, stride, dilation, pad):
    c = x.shape[1]
    ho = _conv_out_size(x.shape[2], w.shape[1], stride, dilation, pad)
    wo = _conv_out_size(x.shape[3], w.shape[2], stride, dilation, pad)
    out = pool.zeros((x.shape[0], c, ho, wo), x.dtype)
    if stride == 1:
        # pre-pad so the kernel's branch-free full-width rows apply
        kernels.depthwise_forward(_pad_hw(_contig(x), pad), _contig(w), out,
                                  1, dilation, 0)
    else:
        kernels.depthwise_forward(_contig(x), _contig(w), out, stride, dilation, pad)
    return out


def _conv_forward_raw(x, w, stride, dilation, groups, pad):
    b, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    if kh == 1 and kw == 1 and groups == 1 and stride == 1 and pad == 0:
        y = pool.take((b, cout, h, wd), x.dtype)
        np.matmul(w.reshape(cout, cin), x.reshape(b, cin, h * wd),
                  out=y.reshape(b, cout, h * wd))
        return y
    if groups == cin and cout == cin and cin_g == 1:
        return _depthwise_raw(x, w.reshape(cin, kh, kw), stride, dilation, pad)
    return _grouped_forward_raw(x, w, stride, dilation, groups, pad)


def conv2d(x, weight, bias=None, stride=1, dilation=1, groups=1, padding=0):
    """2-D correlation with grouping and dilation.

    x: (C_in,H,W) or (B,C_in,H,W); weight: (C_out, C_in/groups, kH, kW);
    bias: (C_out,) or None. With stride 1 and padding = dilation*(k-1)/2
    the spatial extents are preserved.
    """
    xd, had_batch = _as4d(x.data)
    w = weight.data
    if w.ndim != 4:
        raise ShapeError(f"conv weight must be 4-D (C_out,C_in/groups,kH,kW), got {w.shape}")
    cout, cin_g, kh, kw = w.shape
    cin = xd.shape[1]
    if cin % groups != 0 or cout % groups != 0:
        raise ShapeError(f"channels ({cin}->{cout}) not divisible by groups={groups}")
    if cin_g != cin // groups:
        raise ShapeError(
            f"weight expects {cin_g}*{groups} input channels, input has {cin} "
            f"(input {xd.shape}, weight {w.shape})")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"kernel extents must be odd, got {kh}x{kw}")
    yd = _conv_forward_raw(xd, w, stride, dilation, groups, padding)
    if bias is not None:
        yd += bias.data[None, :, None, None]
    out = Tensor(_restore(yd, had_batch))

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        g4 = g if g.ndim == 4 else g[None]
        if stride != 1:
            raise ConfigError("conv2d backward supports stride 1 only")
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g4.sum(axis=(0, 2, 3))
        if kh == 1 and kw == 1 and groups == 1 and padding == 0:
            b_, _, h_, w_ = g4.shape
            g2 = g4.reshape(b_, cout, h_ * w_)
            x2 = xd.reshape(b_, cin, h_ * w_)
            if x.requires_grad:
                gx = pool.take(xd.shape, xd.dtype)
                np.matmul(w.reshape(cout, cin).T, g2, out=gx.reshape(b_, cin, h_ * w_))
            if weight.requires_grad:
                gw = np.matmul(g2, x2.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        elif groups == cin and cout == cin and cin_g == 1:
            if x.requires_grad:
                pad2 = dilation * (kh - 1) - padding
                wf = _contig(w.reshape(cin, kh, kw)[:, ::-1, ::-1])
                gx = _depthwise_raw(_contig(g4), wf, 1, dilation, pad2)
            if weight.requires_grad:
                gw = np.zeros((cin, kh, kw), dtype=w.dtype)
                kernels.depthwise_grad_weight(_pad_hw(_contig(xd), padding),
                                              _contig(g4), gw, 1, dilation, 0)
                gw = gw.reshape(w.shape)
        else:
            if x.requires_grad:
                pad2 = dilation * (kh - 1) - padding
                wt = _contig(w.reshape(groups, cout // groups, cin_g, kh, kw)
                             .transpose(0, 2, 1, 3, 4)[..., ::-1, ::-1])
                wt = wt.reshape(cin, cout // groups, kh, kw)
                gx = _grouped_forward_raw(g4, wt, 1, dilation, groups, pad2)
            if weight.requires_grad:
                gw = _grouped_grad_weight(xd, g4, kh, kw, dilation, groups, padding)
        if gx is not None and not had_batch:
            gx = gx[0]
        return (gx, gw) if bias is None else (gx, gw, gb)

    tape_put(out, inputs, bwd)
    return out


def _grouped_grad_weight(x, gout, kh, kw, dilation, groups, pad):
    b, cin, _, _ = x.shape
    cout = gout.shape[1]
    x = _pad_hw(x, pad)
    eh = (kh - 1) * dilation + 1
    ew = (kw - 1) * dilation + 1
    win = sliding_window_view(x, (eh, ew), axis=(2, 3))[..., ::dilation, ::dilation]
    ho, wo = gout.shape[2:]
    win = win[:, :, :ho, :wo]
    if groups == 1:
        cols = pool.take((b, ho, wo, cin, kh, kw), x.dtype)
        np.copyto(cols, win.transpose(0, 2, 3, 1, 4, 5))
        cols = cols.reshape(b * ho * wo, cin * kh * kw)
        gw = np.matmul(gout.transpose(1, 0, 2, 3).reshape(cout, b * ho * wo), cols)
        return gw.reshape(cout, cin, kh, kw)
    win = win.reshape(b, groups, cin // groups, ho, wo, kh, kw)
    gg = gout.reshape(b, groups, cout // groups, ho, wo)
    gw = np.einsum("bgohw,bgchwuv->gocuv", gg, win, optimize=True)
    return gw.reshape(cout, cin // groups, kh, kw)


def separable_conv2d(x, depthwise_weight, pointwise_weight,
                     depthwise_bias=None, pointwise_bias=None, dilation=1):
    """Depthwise k x k (spatial-size preserving) followed by a 1x1 conv."""
    k = depthwise_weight.data.shape[-1]
    if k not in (1, 3, 5, 7):
        raise ConfigError(f"separable conv kernel must be one of 1,3,5,7, got {k}")
    c = depthwise_weight.data.shape[0]
    pad = dilation * (k - 1) // 2
    y = conv2d(x, depthwise_weight, depthwise_bias, dilation=dilation,
               groups=c, padding=pad)
    return conv2d(y, pointwise_weight, pointwise_bias)


def avg_pool2d(x, kernel=3, stride=1, padding=1):
    """Window mean over the zero-padded input; divisor is always kernel**2."""
    xd, had_batch = _as4d(x.data)
    k = kernel
    inv = 1.0 / (k * k)
    xp = _pad_hw(xd, padding)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    yd = pool.take(win.shape[:4], xd.dtype)
    np.sum(win, axis=(-2, -1), out=yd)
    yd *= inv
    out = Tensor(_restore(yd, had_batch))

    def bwd(g):
        if stride != 1:
            raise ConfigError("avg_pool2d backward supports stride 1 only")
        g4 = g if g.ndim == 4 else g[None]
        gp = _pad_hw(g4, (k - 1) - padding)
        wing = sliding_window_view(gp, (k, k), axis=(2, 3))
        gx = pool.take(xd.shape, xd.dtype)
        np.sum(wing, axis=(-2, -1), out=gx)
        gx *= inv
        return (gx if had_batch else gx[0],)

    tape_put(out, (x,), bwd)
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Batched matrix product (...,m,n) @ (...,n,p); leading extents must agree."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"inner extents disagree: {ad.shape} @ {bd.shape}")
    if ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"batch extents disagree: {ad.shape} @ {bd.shape}")
    yd = pool.take(ad.shape[:-1] + (bd.shape[-1],), ad.dtype)
    np.matmul(ad, bd, out=yd)
    out = Tensor(yd)

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = pool.take(ad.shape, ad.dtype)
            np.matmul(g, bd.swapaxes(-1, -2), out=ga)
        if b.requires_grad:
            gb = pool.take(bd.shape, bd.dtype)
            np.matmul(ad.swapaxes(-1, -2), g, out=gb)
        return ga, gb

    tape_put(out, (a, b), bwd)
    return out


def transpose_last2(x):
    out = Tensor(x.data.swapaxes(-1, -2))

    def bwd(g):
        return (g.swapaxes(-1, -2),)

    tape_put(out, (x,), bwd)
    return out


def reshape(x, shape):
    shape = tuple(shape)
    out = Tensor(np.reshape(x.data, shape))

    def bwd(g):
        return (np.reshape(g, x.data.shape),)

    tape_put(out, (x,), bwd)
    return out


def linear(x, w):
    """y = x @ w.T with x (B,n) and w (m,n) -> (B,m)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"linear expects (B,n) @ (m,n).T, got {x.data.shape}, {w.data.shape}")
    out = Tensor(np.matmul(x.data, w.data.T))

    def bwd(g):
        gx = np.matmul(g, w.data) if x.requires_grad else None
        gw = np.matmul(g.T, x.data) if w.requires_grad else None
        return gx, gw

    tape_put(out, (x, w), bwd)
    return out


# ---------------------------------------------------------------------------
# normalization and activations
# ---------------------------------------------------------------------------


def softmax_rows(x):
    """Numerically stable softmax over the last axis (rows of (...,r,c))."""
    xd = x.data
    m = np.max(xd, axis=-1, keepdims=True)
    yd = pool.take(xd.shape, xd.dtype)
    np.subtract(xd, m, out=yd)
    np.exp(yd, out=yd)
    s = yd.sum(axis=-1, keepdims=True)
    np.divide(yd, s, out=yd)
    out = Tensor(yd)

    def bwd(g):
        dot = np.sum(g * yd, axis=-1, keepdims=True)
        gx = pool.take(xd.shape, xd.dtype)
        np.subtract(g, dot, out=gx)
        np.multiply(gx, yd, out=gx)
        return (gx,)

    tape_put(out, (x,), bwd)
    return out


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalize over the channel extent at each spatial position.

    x: (B,C,H,W) or (C,H,W); gamma/beta: (C,).
    """
    xd, had_batch = _as4d(x.data)
    c = xd.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"layer_norm affine params must have shape ({c},)")
    mu = xd.mean(axis=1, keepdims=True)
    xhat = pool.take(xd.shape, xd.dtype)
    np.subtract(xd, mu, out=xhat)
    var = np.mean(np.square(xhat), axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=xd.dtype))
    inv = inv.astype(xd.dtype, copy=False)
    xhat *= inv
    yd = pool.take(xd.shape, xd.dtype)
    np.multiply(xhat, gamma.data[None, :, None, None], out=yd)
    yd += beta.data[None, :, None, None]
    out = Tensor(_restore(yd, had_batch))

    def bwd(g):
        g4 = g if g.ndim == 4 else g[None]
        gx = ggamma = gbeta = None
        if beta.requires_grad:
            gbeta = g4.sum(axis=(0, 2, 3))
        if gamma.requires_grad:
            ggamma = (g4 * xhat).sum(axis=(0, 2, 3))
        if x.requires_grad:
            dxhat = pool.take(xd.shape, xd.dtype)
            np.multiply(g4, gamma.data[None, :, None, None], out=dxhat)
            t1 = dxhat.sum(axis=1, keepdims=True)
            t2 = (dxhat * xhat).sum(axis=1, keepdims=True)
            gx = pool.take(xd.shape, xd.dtype)
            np.multiply(xhat, t2, out=gx)
            np.subtract(c * dxhat, gx, out=gx)
            gx -= t1
            gx *= inv / c
            if not had_batch:
                gx = gx[0]
        return gx, ggamma, gbeta

    tape_put(out, (x, gamma, beta), bwd)
    return out


def relu(x):
    xd = x.data
    yd = pool.take(xd.shape, xd.dtype)
    np.maximum(xd, 0, out=yd)
    out = Tensor(yd)

    def bwd(g):
        mask = pool.take(xd.shape, np.bool_)
        np.greater(xd, 0, out=mask)
        gx = pool.take(xd.shape, xd.dtype)
        np.multiply(g, mask, out=gx)
        return (gx,)

    tape_put(out, (x,), bwd)
    return out


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def add(x, y):
    if x.data.shape != y.data.shape:
        raise ShapeError(f"add requires equal shapes, got {x.data.shape} vs {y.data.shape}")
    yd = pool.take(x.data.shape, x.data.dtype)
    np.add(x.data, y.data, out=yd)
    out = Tensor(yd)

    def bwd(g):
        return g, g

    tape_put(out, (x, y), bwd)
    return out


def mul(x, y):
    if x.data.shape != y.data.shape:
        raise ShapeError(f"mul requires equal shapes, got {x.data.shape} vs {y.data.shape}")
    yd = pool.take(x.data.shape, x.data.dtype)
    np.multiply(x.data, y.data, out=yd)
    out = Tensor(yd)

    def bwd(g):
        gx = g * y.data if x.requires_grad else None
        gy = g * x.data if y.requires_grad else None
        return gx, gy

    tape_put(out, (x, y), bwd)
    return out


def scale(x, c):
    """Multiply by a python scalar constant."""
    c = float(c)
    yd = pool.take(x.data.shape, x.data.dtype)
    np.multiply(x.data, np.asarray(c, dtype=x.data.dtype), out=yd)
    out = Tensor(yd)

    def bwd(g):
        gx = pool.take(g.shape, g.dtype)
        np.multiply(g, np.asarray(c, dtype=g.dtype), out=gx)
        return (gx,)

    tape_put(out, (x,), bwd)
    return out


def concat_channels(xs):
    """Stack along the channel extent; spatial extents must agree."""
    datas = [t.data for t in xs]
    ndims = {d.ndim for d in datas}
    if len(ndims) != 1 or ndims.pop() not in (3, 4):
        raise ShapeError("concat_channels expects uniform 3-D or 4-D inputs")
    spatial = {d.shape[-2:] for d in datas}
    lead = {d.shape[:-3] for d in datas}
    if len(spatial) != 1 or len(lead) != 1:
        raise ShapeError(f"concat_channels extents disagree: {[d.shape for d in datas]}")
    sizes = [d.shape[-3] for d in datas]
    bounds = np.cumsum([0] + sizes)
    shape = list(datas[0].shape)
    shape[-3] = int(bounds[-1])
    yd = pool.take(shape, datas[0].dtype)
    for i, d in enumerate(datas):
        yd[..., bounds[i]:bounds[i + 1], :, :] = d
    out = Tensor(yd)

    def bwd(g):
        return tuple(g[..., bounds[i]:bounds[i + 1], :, :] for i in range(len(xs)))

    tape_put(out, tuple(xs), bwd)
    return out


def slice_channels(x, start, stop):
    xd = x.data
    if not (0 <= start < stop <= xd.shape[-3]):
        raise ShapeError(f"channel slice [{start}:{stop}] out of range for {xd.shape}")
    shape = list(xd.shape)
    shape[-3] = stop - start
    yd = pool.take(shape, xd.dtype)
    np.copyto(yd, xd[..., start:stop, :, :])
    out = Tensor(yd)

    def bwd(g):
        gx = pool.zeros(xd.shape, xd.dtype)
        gx[..., start:stop, :, :] = g
        return (gx,)

    tape_put(out, (x,), bwd)
    return out


def _unshuffle_write(out, a, f):
    b, c, h, w = a.shape
    out.reshape(b, c, f, f, h // f, w // f)[:] = (
        a.reshape(b, c, h // f, f, w // f, f).transpose(0, 1, 3, 5, 2, 4))


def _shuffle_write(out, a, f):
    b, c, h, w = a.shape
    out.reshape(b, c // (f * f), h, f, w, f)[:] = (
        a.reshape(b, c // (f * f), f, f, h, w).transpose(0, 1, 4, 2, 5, 3))


def pixel_unshuffle(x, factor):
    """(C,H,W) -> (C*f*f, H/f, W/f); exact inverse of pixel_shuffle."""
    xd, had_batch = _as4d(x.data)
    f = factor
    b, c, h, w = xd.shape
    if h % f or w % f:
        raise ShapeError(f"spatial extents {(h, w)} not divisible by factor {f}")
    yd = pool.take((b, c * f * f, h // f, w // f), xd.dtype)
    _unshuffle_write(yd, xd, f)
    out = Tensor(_restore(yd, had_batch))

    def bwd(g):
        g4 = g if g.ndim == 4 else g[None]
        gx = pool.take(xd.shape, xd.dtype)
        _shuffle_write(gx, g4, f)
        return (gx if had_batch else gx[0],)

    tape_put(out, (x,), bwd)
    return out


def pixel_shuffle(x, factor):
    """(C,H,W) -> (C/f/f, H*f, W*f); exact inverse of pixel_unshuffle."""
    xd, had_batch = _as4d(x.data)
    f = factor
    b, c, h, w = xd.shape
    if c % (f * f):
        raise ShapeError(f"channel extent {c} not divisible by factor^2 {f * f}")
    yd = pool.take((b, c // (f * f), h * f, w * f), xd.dtype)
    _shuffle_write(yd, xd, f)
    out = Tensor(_restore(yd, had_batch))

    def bwd(g):
        g4 = g if g.ndim == 4 else g[None]
        gx = pool.take(xd.shape, xd.dtype)
        _unshuffle_write(gx, g4, f)
        return (gx if had_batch else gx[0],)

    tape_put(out, (x,), bwd)
    return out


def global_avg_channels(x):
    """Spatial mean per channel: (B,C,H,W) -> (B,C) (or (C,H,W) -> (C,))."""
    xd, had_batch = _as4d(x.data)
    h, w = xd.shape[2:]
    yd = xd.mean(axis=(2, 3))
    out = Tensor(yd if had_batch else yd[0])

    def bwd(g):
        g2 = g if g.ndim == 2 else g[None]
        gx = pool.take(xd.shape, xd.dtype)
        np.copyto(gx, g2[:, :, None, None] * np.asarray(1.0 / (h * w), dtype=xd.dtype))
        return (gx if had_batch else gx[0],)

    tape_put(out, (x,), bwd)
    return out


def mix(xs, weights):
    """Weighted sum of equal-shape tensors.

    weights is a Tensor of shape (n,) (shared) or (B,n) (per sample, with
    each x_i carrying a leading batch extent of B).
    """
    n = len(xs)
    wd = weights.data
    if wd.shape != (n,) and (wd.ndim != 2 or wd.shape[1] != n):
        raise ShapeError(f"mix weights must be ({n},) or (B,{n}), got {wd.shape}")
    shapes = {t.data.shape for t in xs}
    if len(shapes) != 1:
        raise ShapeError(f"mix inputs must share one shape, got {sorted(shapes)}")
    per_sample = wd.ndim == 2
    if per_sample and xs[0].data.shape[0] != wd.shape[0]:
        raise ShapeError("per-sample mix weights require matching batch extent")
    expand = (slice(None),) + (None,) * (xs[0].data.ndim - 1)

    def coeff(i):
        return wd[:, i][expand] if per_sample else wd[i]

    yd = pool.take(xs[0].data.shape, xs[0].data.dtype)
    np.multiply(xs[0].data, coeff(0), out=yd)
    if n > 1:
        tmp = pool.take(yd.shape, yd.dtype)
        for i in range(1, n):
            np.multiply(xs[i].data, coeff(i), out=tmp)
            yd += tmp
    out = Tensor(yd)

    def bwd(g):
        grads = []
        for i in range(n):
            if xs[i].requires_grad:
                gi = pool.take(g.shape, g.dtype)
                np.multiply(g, coeff(i), out=gi)
                grads.append(gi)
            else:
                grads.append(None)
        if weights.requires_grad:
            red = tuple(range(1, g.ndim))
            if per_sample:
                gw = np.stack([(g * xs[i].data).sum(axis=red) for i in range(n)], axis=1)
            else:
                gw = np.array([float((g * xs[i].data).sum()) for i in range(n)], dtype=wd.dtype)
        else:
            gw = None
        grads.append(gw)
        return tuple(grads)

    tape_put(out, tuple(xs) + (weights,), bwd)
    return out


# ---------------------------------------------------------------------------
# attention masking
# ---------------------------------------------------------------------------


def top_k_mask(scores, k):
    """Keep the k largest entries of each row; the rest become -inf.

    Ties at the k-th value are broken by keeping the lowest column index
    first. The -inf sentinel makes a following row-softmax assign masked
    positions probability exactly 0.
    """
    sd = scores.data
    cols = sd.shape[-1]
    if not 1 <= k <= cols:
        raise ConfigError(f"top-k count {k} out of range [1, {cols}]")
    if k == cols:
        out = Tensor(sd)

        def bwd_full(g):
            return (g,)

        tape_put(out, (scores,), bwd_full)
        return out
    order = np.argsort(-sd, axis=-1, kind="stable")
    keep = np.zeros(sd.shape, dtype=bool)
    np.put_along_axis(keep, order[..., :k], True, axis=-1)
    yd = pool.take(sd.shape, sd.dtype)
    np.copyto(yd, sd)
    yd[~keep] = NEG_INF
    out = Tensor(yd)

    def bwd(g):
        gx = pool.take(g.shape, g.dtype)
        np.multiply(g, keep, out=gx)
        return (gx,)

    tape_put(out, (scores,), bwd)
    return out


# ---------------------------------------------------------------------------
# reductions and losses
# ---------------------------------------------------------------------------


def sum_all(x):
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype))

    def bwd(g):
        gx = pool.take(x.data.shape, x.data.dtype)
        gx.fill(g)
        return (gx,)

    tape_put(out, (x,), bwd)
    return out


def mean_all(x):
    n = x.data.size
    out = Tensor(np.asarray(x.data.mean(), dtype=x.data.dtype))

    def bwd(g):
        gx = pool.take(x.data.shape, x.data.dtype)
        gx.fill(g / n)
        return (gx,)

    tape_put(out, (x,), bwd)
    return out


def l1_loss(pred, target):
    """Mean absolute difference over all elements."""
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"l1_loss shapes disagree: {pred.data.shape} vs {target.data.shape}")
    diff = pool.take(pred.data.shape, pred.data.dtype)
    np.subtract(pred.data, target.data, out=diff)
    out = Tensor(np.asarray(np.abs(diff).mean(), dtype=pred.data.dtype))
    n = diff.size

    def bwd(g):
        s = pool.take(diff.shape, diff.dtype)
        np.sign(diff, out=s)
        s *= np.asarray(g / n, dtype=diff.dtype)
        gp = s if pred.requires_grad else None
        if target.requires_grad:
            gt = pool.take(diff.shape, diff.dtype)
            np.negative(s, out=gt)
        else:
            gt = None
        return gp, gt

    tape_put(out, (pred, target), bwd)
    return out
