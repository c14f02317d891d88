"""Pure-numpy depthwise convolution kernels (fallback backend).

Same call signatures as the compiled module; used when the extension is
unavailable or when DERAIN_BACKEND=python is set.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, kh, kw, stride, dilation, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    eh = (kh - 1) * dilation + 1
    ew = (kw - 1) * dilation + 1
    win = sliding_window_view(x, (eh, ew), axis=(2, 3))
    return win[:, :, ::stride, ::stride, ::dilation, ::dilation]


def depthwise_forward(x, w, out, stride, dilation, pad):
    """Per-channel 2-D correlation; x (B,C,H,W), w (C,kh,kw), out (B,C,Ho,Wo)."""
    win = _windows(x, w.shape[1], w.shape[2], stride, dilation, pad)
    np.einsum("bchwuv,cuv->bchw", win, w, out=out, optimize=True)


def depthwise_grad_weight(x, gout, gw, stride, dilation, pad):
    """Weight gradient of depthwise_forward into gw (C,kh,kw)."""
    win = _windows(x, gw.shape[1], gw.shape[2], stride, dilation, pad)
    np.einsum("bchwuv,bchw->cuv", win, gout, out=gw, optimize=True)
