"""Kernel backend selection: compiled depthwise-conv core with numpy fallback.

The compiled extension is preferred when importable. Set
``DERAIN_BACKEND=python`` to force the fallback (used by the kernel
benchmark to compare both), or ``DERAIN_BACKEND=cython`` to fail loudly
when the extension is missing.
"""

import os

from . import pykernels

_requested = os.environ.get("DERAIN_BACKEND", "").strip().lower()

if _requested in ("python", "numpy"):
    _impl = pykernels
    BACKEND = "python"
elif _requested in ("", "cython", "compiled"):
    try:
        from . import _cykernels as _impl

        BACKEND = "cython"
    except ImportError:
        if _requested:
            raise
        _impl = pykernels
        BACKEND = "python"
else:
    raise ValueError(f"unknown DERAIN_BACKEND {_requested!r}; use 'cython' or 'python'")

depthwise_forward = _impl.depthwise_forward
depthwise_grad_weight = _impl.depthwise_grad_weight


def get_backend(name):
    """Return (forward, grad_weight) for an explicit backend name."""
    if name == "python":
        return pykernels.depthwise_forward, pykernels.depthwise_grad_weight
    if name == "cython":
        from . import _cykernels

        return _cykernels.depthwise_forward, _cykernels.depthwise_grad_weight
    raise ValueError(f"unknown backend {name!r}")
