"""Backend dispatch for the hot kernels.

Two implementations exist: the compiled extension (``voxseg._core``) and a
pure-numpy fallback. In ``auto`` mode each kernel uses whichever
implementation benchmarks faster (see benchmarks/bench_kernels.py): the
convolutions stay on numpy, whose shift-and-matmul formulation rides BLAS,
while scattered trilinear resampling goes to the extension. Override with
``VOXSEG_BACKEND=python`` or ``VOXSEG_BACKEND=compiled`` (the latter raises
if the extension is unavailable). Both backends agree to float rounding.
"""

from __future__ import annotations

import os

import numpy as np

from . import numpy_backend

_requested = os.environ.get("VOXSEG_BACKEND", "auto").lower()
_compiled = None
if _requested in ("auto", "compiled"):
    try:
        from .. import _core as _compiled  # type: ignore
    except ImportError:
        if _requested == "compiled":
            raise
BACKEND = "compiled" if _compiled is not None else "python"

# per-kernel choice: in auto mode route each kernel to its faster backend
_conv = _compiled if _requested == "compiled" else None
_resample = _compiled


def get_backend(name: str):
    """Return the kernel module for ``name`` ('python' or 'compiled')."""
    if name == "python":
        return numpy_backend
    if name == "compiled":
        if _compiled is None:
            raise ImportError("compiled kernel extension is not available")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


def _as_float(arr: np.ndarray) -> np.ndarray:
    if arr.dtype in (np.float32, np.float64):
        return np.ascontiguousarray(arr)
    return np.ascontiguousarray(arr, dtype=np.float64)


def conv3d_forward(x, w, b, stride):
    if _conv is None:
        return numpy_backend.conv3d_forward(x, w, b, stride)
    x = _as_float(x)
    return _conv.conv3d_forward(x, np.ascontiguousarray(w, x.dtype),
                                np.ascontiguousarray(b, x.dtype), tuple(stride))


def conv3d_backward(x, w, dy, stride):
    if _conv is None:
        return numpy_backend.conv3d_backward(x, w, dy, stride)
    x = _as_float(x)
    return _conv.conv3d_backward(x, np.ascontiguousarray(w, x.dtype),
                                 np.ascontiguousarray(dy, x.dtype), tuple(stride))


def resample_trilinear(data, vox, default=0.0):
    data = np.ascontiguousarray(data, dtype=np.float64)
    vox = np.ascontiguousarray(vox, dtype=np.float64)
    if _resample is None:
        return numpy_backend.resample_trilinear(data, vox, float(default))
    return _resample.resample_trilinear(data, vox, float(default))
