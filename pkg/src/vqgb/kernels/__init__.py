"""Hot inner loops, compiled when available.

The Cython extension ``_ckernels`` is preferred; the numpy module
``_fallback`` is used if the extension cannot be imported or if the
environment variable ``VQGB_PURE`` is set to a non-empty value other than 0.
``BACKEND`` names the active implementation.
"""
import os

from . import _fallback

if os.environ.get("VQGB_PURE", "") not in ("", "0"):
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"

linear_assignment = _impl.linear_assignment
knn_radius_counts = _impl.knn_radius_counts

__all__ = ["BACKEND", "linear_assignment", "knn_radius_counts"]
