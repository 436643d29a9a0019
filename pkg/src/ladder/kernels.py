"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback is used. Set ``LADDER_BACKEND=python`` to force the fallback.
"""
import os

from . import _kernels_py

_forced = os.environ.get("LADDER_BACKEND", "").strip().lower()

if _forced == "python":
    _impl = _kernels_py
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        if _forced == "cython":
            raise
        _impl = _kernels_py

BACKEND = _impl.BACKEND
im2col3x3 = _impl.im2col3x3
col2im3x3 = _impl.col2im3x3
maxpool2x2_forward = _impl.maxpool2x2_forward
maxpool2x2_backward = _impl.maxpool2x2_backward
resample_bicubic = _impl.resample_bicubic
convolve1d_reflect = _impl.convolve1d_reflect

__all__ = [
    "BACKEND",
    "im2col3x3",
    "col2im3x3",
    "maxpool2x2_forward",
    "maxpool2x2_backward",
    "resample_bicubic",
    "convolve1d_reflect",
]
