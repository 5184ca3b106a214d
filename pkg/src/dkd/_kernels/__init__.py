"""Kernel backend selection.

The compiled extension (native.pyx) is preferred when it built successfully;
otherwise the numpy fallback is used. DKD_KERNELS=numpy|native forces a
backend (the latter raises if the extension is unavailable).
"""

from __future__ import annotations

import os

from . import numpy_impl

_forced = os.environ.get("DKD_KERNELS", "").strip().lower()

if _forced == "numpy":
    backend = numpy_impl
else:
    try:
        from . import native as backend  # type: ignore[no-redef]
    except ImportError:
        if _forced == "native":
            raise
        backend = numpy_impl

BACKEND_NAME: str = backend.NAME

im2col = backend.im2col
col2im = backend.col2im
depthwise_fw = backend.depthwise_fw
depthwise_bw_input = backend.depthwise_bw_input
depthwise_bw_weight = backend.depthwise_bw_weight
segment_max = backend.segment_max
