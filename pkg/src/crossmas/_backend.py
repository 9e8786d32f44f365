"""Kernel backend selection.

The compiled extension is used when importable; ``CROSSMAS_BACKEND=python``
forces the numpy fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
kernels = _pykernels

if os.environ.get("CROSSMAS_BACKEND", "").lower() != "python":
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        kernels = _ckernels
        BACKEND = "cython"

warp = kernels.warp
warp_vjp = kernels.warp_vjp
patch_mi = kernels.patch_mi
