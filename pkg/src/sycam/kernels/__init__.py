"""Hot numeric kernels with a compiled core and a pure-numpy fallback.

The compiled extension is preferred when importable; set SYCAM_PURE_PYTHON=1
to force the numpy implementation (used by the benchmark and parity tests).
"""
from __future__ import annotations

import os

from sycam.kernels import _numpy_impl

if os.environ.get("SYCAM_PURE_PYTHON"):
    _impl = _numpy_impl
    BACKEND = "numpy"
else:
    try:
        from sycam.kernels import _cy_impl as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _numpy_impl
        BACKEND = "numpy"

accumulate_saliency = _impl.accumulate_saliency
relu_minmax = _impl.relu_minmax
bilinear_resize = _impl.bilinear_resize
cell_bounds = _impl.cell_bounds
perturbation_sequence = _impl.perturbation_sequence

__all__ = [
    "BACKEND",
    "accumulate_saliency",
    "relu_minmax",
    "bilinear_resize",
    "cell_bounds",
    "perturbation_sequence",
]
