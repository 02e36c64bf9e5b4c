from __future__ import annotations

import numpy as np
import pytest

from sycam.backend import StubBackend
from sycam.tensor_io import load_dataset, make_synthetic_dataset


@pytest.fixture(scope="session")
def small_ds(tmp_path_factory):
    """2 classes x 3 images, K=4, 3x3 grid, 1x12x12 images; all optional fields."""
    out = tmp_path_factory.mktemp("small_ds")
    manifest = make_synthetic_dataset(
        out, n_classes=2, images_per_class=3, K=4, w=3, h=3, ch=1, H=12, W=12, seed=7
    )
    return load_dataset(manifest)


@pytest.fixture(scope="session")
def small_backend(small_ds):
    return StubBackend(small_ds.stub_model_path)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def random_expr(rng: np.random.Generator, depth: int, terminals=None):
    """Uniform-ish random AST over the full grammar (no guards)."""
    from sycam.expr import Add, Mul, Relu, Terminal, TerminalKind, TwoPlus

    kinds = terminals or list(TerminalKind)
    if depth <= 1 or rng.random() < 0.3:
        return Terminal(kinds[int(rng.integers(len(kinds)))])
    choice = int(rng.integers(4))
    if choice == 0:
        return Relu(random_expr(rng, depth - 1, terminals))
    left = random_expr(rng, depth - 1, terminals)
    right = random_expr(rng, depth - 1, terminals)
    return [Add, TwoPlus, Mul][choice - 1](left, right)
