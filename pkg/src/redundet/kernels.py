"""Backend selection for the hot kernels.

The compiled extension is used when it was built; setting
``REDUNDET_PURE_PYTHON=1`` forces the pure Python versions.
"""
import os

if os.environ.get("REDUNDET_PURE_PYTHON"):
    from redundet import _pykernels as _impl

    BACKEND = "python"
else:
    try:
        from redundet import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        from redundet import _pykernels as _impl

        BACKEND = "python"

diffusion_fill = _impl.diffusion_fill
label_components = _impl.label_components
rle_intersection = _impl.rle_intersection
greedy_match = _impl.greedy_match

__all__ = [
    "BACKEND",
    "diffusion_fill",
    "label_components",
    "rle_intersection",
    "greedy_match",
]
