"""Heatmap overlay rendering to PNG.

The colormap is the classic 256-entry jet table, generated bit-exactly from
the piecewise-linear formula (v = i/255):

    r = clamp(min(4v - 1.5, -4v + 4.5), 0, 1)
    g = clamp(min(4v - 0.5, -4v + 3.5), 0, 1)
    b = clamp(min(4v + 0.5, -4v + 2.5), 0, 1)

each channel quantized as round(255 * value). Overlays are
(1 - alpha) * image + alpha * colormap(heat) with alpha = 0.5, clamped to [0, 1].
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from sycam.errors import CapabilityError
from sycam.expr import Expr
from sycam.metrics import WeightFn, as_weight_fn
from sycam.saliency import build_saliency, upsample_bilinear
from sycam.tensor_io import ImageRecord

OVERLAY_ALPHA = 0.5


def jet_colormap() -> np.ndarray:
    """The fixed 256-entry jet table as uint8 [256, 3]."""
    v = np.arange(256, dtype=np.float64) / 255.0
    r = np.clip(np.minimum(4 * v - 1.5, -4 * v + 4.5), 0.0, 1.0)
    g = np.clip(np.minimum(4 * v - 0.5, -4 * v + 3.5), 0.0, 1.0)
    b = np.clip(np.minimum(4 * v + 0.5, -4 * v + 2.5), 0.0, 1.0)
    return np.round(255.0 * np.stack([r, g, b], axis=1)).astype(np.uint8)


_JET = jet_colormap()


def overlay_heatmap(image: np.ndarray, heat: np.ndarray, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """Blend a [0,1] heatmap over a [ch, H, W] image; returns [H, W, 3] float in [0,1]."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if img.shape[0] == 1:
        rgb = np.repeat(img, 3, axis=0)
    elif img.shape[0] == 3:
        rgb = img
    else:
        raise CapabilityError(f"cannot render {img.shape[0]}-channel images", field="image")
    rgb = rgb.transpose(1, 2, 0)
    idx = np.clip(np.round(heat * 255.0), 0, 255).astype(np.intp)
    heat_rgb = _JET[idx].astype(np.float64) / 255.0
    return np.clip((1.0 - alpha) * rgb + alpha * heat_rgb, 0.0, 1.0)


def render_heatmap(e: Expr | WeightFn, rec: ImageRecord, out_path: str | Path) -> Path:
    """Render an expression's saliency overlay for one record; deterministic."""
    if rec.image is None:
        raise CapabilityError(f"record {rec.image_id!r} has no raw image", field="image")
    weight_fn = as_weight_fn(e)
    smap = build_saliency(weight_fn(rec), rec.feature_maps)
    _, height, width = rec.image.shape
    heat = upsample_bilinear(smap.normalized, height, width)
    blended = overlay_heatmap(rec.image, heat)
    out = np.round(blended * 255.0).astype(np.uint8)
    out_path = Path(out_path)
    Image.fromarray(out, mode="RGB").save(out_path, format="PNG")
    return out_path
