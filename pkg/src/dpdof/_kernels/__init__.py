"""Hot loops, compiled when possible.

The Cython extension ``_ckernels`` is preferred; if it is missing or the
environment variable ``DPDOF_PURE_PYTHON`` is set to a non-empty value other
than ``0``, the numpy fallback in ``_pykernels`` is used instead. ``BACKEND``
names the active implementation.
"""
import os

from . import _pykernels as python

compiled = None
if os.environ.get("DPDOF_PURE_PYTHON", "") in ("", "0"):
    try:
        from . import _ckernels as compiled
    except ImportError:  # extension not built
        compiled = None

active = compiled if compiled is not None else python
BACKEND = "cython" if compiled is not None else "python"

scatter_brute = active.scatter_brute
scatter_gradient = active.scatter_gradient
disk_norms = active.disk_norms
disk_sizes = active.disk_sizes
joint_bilateral_upsample = active.joint_bilateral_upsample

__all__ = [
    "BACKEND",
    "compiled",
    "python",
    "scatter_brute",
    "scatter_gradient",
    "disk_norms",
    "disk_sizes",
    "joint_bilateral_upsample",
]
