from __future__ import annotations

import subprocess
import sys

import numpy as np
import pytest

from sycam.kernels import BACKEND, _numpy_impl

try:
    from sycam.kernels import _cy_impl
except ImportError:
    _cy_impl = None

needs_ext = pytest.mark.skipif(_cy_impl is None, reason="compiled extension not built")


@needs_ext
class TestParity:
    def test_accumulate_saliency(self, rng):
        w = rng.normal(size=16)
        fm = rng.normal(size=(16, 7, 7)).astype(np.float32)
        a = _numpy_impl.accumulate_saliency(w, fm)
        b = _cy_impl.accumulate_saliency(w, fm)
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)

    def test_relu_minmax(self, rng):
        raw = rng.normal(size=(9, 5))
        np.testing.assert_allclose(
            _numpy_impl.relu_minmax(raw), _cy_impl.relu_minmax(raw), atol=1e-15
        )
        const = np.full((3, 3), -2.0)
        np.testing.assert_array_equal(_numpy_impl.relu_minmax(const), _cy_impl.relu_minmax(const))

    def test_bilinear_resize(self, rng):
        src = rng.normal(size=(4, 6))
        a = _numpy_impl.bilinear_resize(src, 17, 13)
        b = _cy_impl.bilinear_resize(src, 17, 13)
        np.testing.assert_allclose(a, b, atol=1e-13)

    def test_bilinear_degenerate_sizes(self, rng):
        src = rng.normal(size=(1, 3))
        np.testing.assert_allclose(
            _numpy_impl.bilinear_resize(src, 1, 7), _cy_impl.bilinear_resize(src, 1, 7), atol=1e-15
        )

    def test_cell_bounds(self):
        np.testing.assert_array_equal(_numpy_impl.cell_bounds(3, 10), _cy_impl.cell_bounds(3, 10))

    def test_perturbation_sequence(self, rng):
        base = rng.normal(size=(3, 8, 8))
        patch = rng.normal(size=(3, 8, 8))
        cells = np.array([[0, 1], [1, 0], [1, 1], [0, 0]], dtype=np.int64)
        a = _numpy_impl.perturbation_sequence(base, patch, cells, 2, 2)
        b = _cy_impl.perturbation_sequence(base, patch, cells, 2, 2)
        np.testing.assert_array_equal(a, b)

    def test_perturbation_remainder_cells(self, rng):
        base = rng.normal(size=(1, 5, 7))
        patch = rng.normal(size=(1, 5, 7))
        cells = np.array([[1, 1]], dtype=np.int64)
        a = _numpy_impl.perturbation_sequence(base, patch, cells, 2, 2)
        b = _cy_impl.perturbation_sequence(base, patch, cells, 2, 2)
        np.testing.assert_array_equal(a, b)


def test_env_var_forces_numpy_backend():
    code = (
        "import sycam.kernels as k; print(k.BACKEND)"
    )
    out = subprocess.run(
        [sys.executable, "-c", code],
        capture_output=True,
        text=True,
        env={"SYCAM_PURE_PYTHON": "1", "PATH": "/usr/bin:/bin"},
    )
    assert out.stdout.strip() == "numpy"


def test_compiled_backend_active_by_default():
    assert BACKEND in ("cython", "numpy")
