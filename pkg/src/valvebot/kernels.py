"""Hot-loop kernels, compiled when available.

``BACKEND`` is ``"cython"`` when the extension imported, else ``"python"``.
Set ``VALVEBOT_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py
if not os.environ.get("VALVEBOT_PURE_PYTHON"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py


def ring_medians(ranges, noise_k, bg_k):
    ranges = np.ascontiguousarray(ranges, dtype=np.float64)
    noise_k = np.ascontiguousarray(noise_k, dtype=np.int_)
    bg_k = np.ascontiguousarray(bg_k, dtype=np.int_)
    return _impl.ring_medians(ranges, noise_k, bg_k)


def label_depth_gated(mask, depth, tol):
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    depth = np.ascontiguousarray(depth, dtype=np.float64)
    return _impl.label_depth_gated(mask, depth, float(tol))
