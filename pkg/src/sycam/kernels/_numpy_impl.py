"""Pure-numpy implementations of the hot kernels.

Semantics are the reference; the compiled extension in ``_cy_impl.pyx``
must match these within floating-point reassociation noise.
"""
from __future__ import annotations

import numpy as np


def accumulate_saliency(weights: np.ndarray, feature_maps: np.ndarray) -> np.ndarray:
    """Weighted sum of feature maps: out[i,j] = sum_k weights[k] * maps[k,i,j]."""
    return np.tensordot(
        np.asarray(weights, dtype=np.float64),
        np.asarray(feature_maps, dtype=np.float64),
        axes=1,
    )


def relu_minmax(raw: np.ndarray) -> np.ndarray:
    """ReLU then min-max to [0,1]; a constant post-ReLU map becomes all zeros."""
    x = np.maximum(np.asarray(raw, dtype=np.float64), 0.0)
    lo = x.min()
    hi = x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def bilinear_resize(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resampling of a 2-D map to (out_h, out_w)."""
    src = np.asarray(src, dtype=np.float64)
    sh, sw = src.shape
    ys = np.linspace(0.0, sh - 1.0, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, sw - 1.0, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, sh - 1)
    x1 = np.minimum(x0 + 1, sw - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = src[np.ix_(y0, x0)]
    b = src[np.ix_(y0, x1)]
    c = src[np.ix_(y1, x0)]
    d = src[np.ix_(y1, x1)]
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)


def cell_bounds(n_cells: int, extent: int) -> np.ndarray:
    """Edges of a partition of `extent` pixels into `n_cells` intervals.

    Cells are `extent // n_cells` wide; the last cell absorbs any remainder.
    """
    base = extent // n_cells
    edges = np.arange(n_cells + 1, dtype=np.intp) * base
    edges[-1] = extent
    return edges


def perturbation_sequence(
    base: np.ndarray,
    patch: np.ndarray,
    cells: np.ndarray,
    grid_rows: int,
    grid_cols: int,
) -> np.ndarray:
    """Progressive block replacement: out[0] = base, out[j] = out[j-1] with
    the block of cells[j-1] copied from patch. Returns [len(cells)+1, ch, H, W].
    """
    base = np.asarray(base, dtype=np.float64)
    patch = np.asarray(patch, dtype=np.float64)
    ch, height, width = base.shape
    r_edges = cell_bounds(grid_rows, height)
    c_edges = cell_bounds(grid_cols, width)
    n = cells.shape[0]
    out = np.empty((n + 1, ch, height, width), dtype=np.float64)
    out[0] = base
    for j in range(n):
        out[j + 1] = out[j]
        r, c = int(cells[j, 0]), int(cells[j, 1])
        rs, re = r_edges[r], r_edges[r + 1]
        cs, ce = c_edges[c], c_edges[c + 1]
        out[j + 1, :, rs:re, cs:ce] = patch[:, rs:re, cs:ce]
    return out
