"""Kernel backend selection.

The compiled extension is used when importable. Set ``TUMORPIPE_PURE_PYTHON=1``
to force the numpy/scipy fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
if not os.environ.get("TUMORPIPE_PURE_PYTHON"):
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
else:
    _impl = _kernels_py

label_components = _impl.label_components
dilate_cube = _impl.dilate_cube

BACKENDS = {"python": _kernels_py}
if BACKEND == "cython":
    BACKENDS["cython"] = _impl
