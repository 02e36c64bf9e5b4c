"""Saliency maps from weight vectors: construction, ranking, perturbation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sycam import kernels
from sycam.errors import CapabilityError
from sycam.tensor_io import ImageRecord

DELETE = "delete"
INSERT = "insert"


@dataclass(frozen=True)
class SaliencyMap:
    raw: np.ndarray  # [w, h], sum_k weight[k] * A_k
    normalized: np.ndarray  # [w, h] in [0, 1]: min-max of relu(raw), constant -> zeros


def build_saliency(weights: np.ndarray, feature_maps: np.ndarray) -> SaliencyMap:
    raw = kernels.accumulate_saliency(weights, feature_maps)
    return SaliencyMap(raw=raw, normalized=kernels.relu_minmax(raw))


def upsample_bilinear(m: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear upsampling; constant maps stay constant."""
    return kernels.bilinear_resize(m, out_h, out_w)


def rank_cells(smap: SaliencyMap) -> np.ndarray:
    """All (row, col) cells ordered by descending saliency, ties by row-major
    index. Ranked on the post-ReLU map; min-max is monotone, so the order is
    the normalized-map order while staying bit-stable under positive scaling.
    """
    keys = np.maximum(smap.raw, 0.0).ravel()
    order = np.argsort(-keys, kind="stable")
    w, h = smap.raw.shape
    return np.stack([order // h, order % h], axis=1).astype(np.int64)


def perturb(rec: ImageRecord, ranking: np.ndarray, j: int, direction: str) -> np.ndarray:
    """Image with the top-j cells' pixel blocks swapped between the original
    and its blurred counterpart. j=0 returns the start image unchanged."""
    if rec.image is None or rec.blurred_image is None:
        raise CapabilityError(
            "perturbation metrics need image and blurred_image", field="image"
        )
    if direction not in (DELETE, INSERT):
        raise ValueError(f"direction must be {DELETE!r} or {INSERT!r}")
    base, patch = (
        (rec.image, rec.blurred_image) if direction == DELETE else (rec.blurred_image, rec.image)
    )
    grid_rows, grid_cols = rec.feature_maps.shape[1:]
    seq = kernels.perturbation_sequence(base, patch, ranking[:j], grid_rows, grid_cols)
    return seq[j]


def perturbation_batch(rec: ImageRecord, ranking: np.ndarray, p: int, direction: str) -> np.ndarray:
    """All P+1 progressively perturbed images as one [P+1, ch, H, W] batch."""
    if rec.image is None or rec.blurred_image is None:
        raise CapabilityError(
            "perturbation metrics need image and blurred_image", field="image"
        )
    base, patch = (
        (rec.image, rec.blurred_image) if direction == DELETE else (rec.blurred_image, rec.image)
    )
    grid_rows, grid_cols = rec.feature_maps.shape[1:]
    return kernels.perturbation_sequence(base, patch, ranking[:p], grid_rows, grid_cols)
