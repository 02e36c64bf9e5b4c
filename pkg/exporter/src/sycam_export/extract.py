"""Extraction of CAM terminals from a trained CNN.

Per image: one forward pass captures the target conv layer's feature maps and
the softmax scores; one backward pass from the predicted-class probability
gives the spatially pooled gradients; one masked classification per channel
gives the confidence scores; one channel-zeroing classification per channel
gives the ablation scores. Everything is written in the SYCTNS01/manifest
format together with a deterministically blurred copy of each input.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import convolve1d

from sycam_export import tensorfile

logger = logging.getLogger("sycam_export")

BLUR_KERNEL_SIZE = 51
BLUR_SIGMA = 50.0


class ExportError(Exception):
    pass


@dataclass
class ExportJob:
    model: torch.nn.Module
    target_layer: str  # dotted module path of the last conv layer
    images: list[tuple[str, np.ndarray]]  # (image_id, [ch, H, W] float array)
    out_dir: Path
    class_names: list[str] | None = None
    masks: dict[str, np.ndarray] = field(default_factory=dict)  # image_id -> [H, W]
    batch_size: int = 16
    blur_kernel: int = BLUR_KERNEL_SIZE
    blur_sigma: float = BLUR_SIGMA


def gaussian_blur(image: np.ndarray, kernel: int = BLUR_KERNEL_SIZE, sigma: float = BLUR_SIGMA) -> np.ndarray:
    half = kernel // 2
    xs = np.arange(-half, half + 1, dtype=np.float64)
    window = np.exp(-(xs**2) / (2.0 * sigma**2))
    window /= window.sum()
    out = convolve1d(np.asarray(image, dtype=np.float64), window, axis=-1, mode="reflect")
    return convolve1d(out, window, axis=-2, mode="reflect")


def load_image_folder(folder: str | Path, size: tuple[int, int] | None = None) -> list[tuple[str, np.ndarray]]:
    """Decode .png/.jpg (to [0,1] CHW floats) and read .npy arrays from a folder."""
    from PIL import Image

    out = []
    for path in sorted(Path(folder).iterdir()):
        if path.suffix.lower() in (".png", ".jpg", ".jpeg"):
            img = Image.open(path)
            if size is not None:
                img = img.resize((size[1], size[0]), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32) / 255.0
            if arr.ndim == 2:
                arr = arr[None, :, :]
            else:
                arr = arr.transpose(2, 0, 1)
            out.append((path.stem, arr))
        elif path.suffix == ".npy":
            out.append((path.stem, np.load(path).astype(np.float32)))
    if not out:
        raise ExportError(f"no decodable images in {folder}")
    return out


def _find_module(model: torch.nn.Module, dotted: str) -> torch.nn.Module:
    modules = dict(model.named_modules())
    if dotted not in modules:
        raise ExportError(
            f"target layer {dotted!r} not found; available: {sorted(m for m in modules if m)}"
        )
    return modules[dotted]


def _minmax(t: torch.Tensor) -> torch.Tensor:
    lo, hi = t.min(), t.max()
    if bool((hi == lo).item()):
        return torch.zeros_like(t)
    return (t - lo) / (hi - lo)


class TerminalExtractor:
    """Hook-based extraction around one target conv layer."""

    def __init__(self, model: torch.nn.Module, target_layer: str):
        self.model = model.eval()
        self.layer = _find_module(model, target_layer)
        if not isinstance(self.layer, torch.nn.Conv2d):
            raise ExportError(f"target layer {target_layer!r} is not a Conv2d")
        self._activations: torch.Tensor | None = None
        self._ablate_channel: int | None = None

        def hook(_module, _inputs, output):
            if self._ablate_channel is not None:
                output = output.clone()
                output[:, self._ablate_channel] = 0.0
                return output
            self._activations = output
            return None

        self.layer.register_forward_hook(hook)

    def probs(self, batch: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.model(batch), dim=1)

    def extract(self, image: np.ndarray) -> dict[str, np.ndarray]:
        x = torch.from_numpy(np.asarray(image, dtype=np.float32))[None]
        x.requires_grad_(True)
        self._activations = None
        probs = self.probs(x)
        acts = self._activations
        if acts is None:
            raise ExportError("target layer produced no activations (dead graph?)")
        if acts.dim() != 4:
            raise ExportError(f"target layer must yield 4-D activations, got {tuple(acts.shape)}")
        c0 = int(probs[0].argmax().item())
        score = probs[0, c0]
        grads_full = torch.autograd.grad(score, acts, retain_graph=False)[0]
        if not torch.isfinite(grads_full).all():
            raise ExportError("non-finite gradients")
        grads = grads_full[0].mean(dim=(1, 2))

        fmaps = acts[0].detach()
        k, w, h = fmaps.shape
        _, ch, height, width = x.shape

        with torch.no_grad():
            # CIC: classify the input masked by each normalized upsampled map.
            masks = torch.stack(
                [
                    _minmax(
                        F.interpolate(
                            fmaps[i][None, None], size=(height, width),
                            mode="bilinear", align_corners=True,
                        )[0, 0]
                    )
                    for i in range(k)
                ]
            )
            masked = x.detach() * masks[:, None, :, :]
            cic = self.probs(masked)[:, c0]

            # Ablation: zero one channel at the target layer and reclassify.
            y0 = float(probs[0, c0].item())
            abl = np.empty(k, dtype=np.float64)
            for i in range(k):
                self._ablate_channel = i
                y_k = float(self.probs(x.detach())[0, c0].item())
                abl[i] = (y0 - y_k) / y0
            self._ablate_channel = None

        return {
            "class_scores": probs[0].detach().numpy().astype(np.float32),
            "feature_maps": fmaps.numpy().astype(np.float32),
            "grads": grads.detach().numpy().astype(np.float32),
            "cic_scores": cic.numpy().astype(np.float32),
            "abl_scores": abl.astype(np.float32),
        }


def export(job: ExportJob) -> Path:
    """Run extraction over all images and write a loadable dataset.

    Images with non-finite gradients are skipped with a log entry.
    Returns the manifest path.
    """
    extractor = TerminalExtractor(job.model, job.target_layer)
    job.out_dir.mkdir(parents=True, exist_ok=True)
    rels: list[str] = []
    grid: tuple[int, int, int] | None = None
    image_dims: tuple[int, int, int] | None = None
    n_classes: int | None = None
    for image_id, image in job.images:
        try:
            tensors = extractor.extract(image)
        except ExportError as exc:
            logger.warning("skipping %s: %s", image_id, exc)
            continue
        tensors["image"] = np.asarray(image, dtype=np.float32)
        tensors["blurred_image"] = gaussian_blur(
            image, job.blur_kernel, job.blur_sigma
        ).astype(np.float32)
        if image_id in job.masks:
            tensors["gt_mask"] = np.asarray(job.masks[image_id], dtype=np.float32)
        grid = tuple(tensors["feature_maps"].shape)
        image_dims = tuple(tensors["image"].shape)
        n_classes = tensors["class_scores"].shape[0]
        rels.append(tensorfile.write_record(job.out_dir, image_id, tensors, true_class=None))
    if not rels:
        raise ExportError("no image survived extraction")
    classes = job.class_names or [f"class_{i}" for i in range(n_classes)]
    if len(classes) != n_classes:
        raise ExportError(f"{len(classes)} class names for a {n_classes}-class model")
    return tensorfile.write_manifest(job.out_dir, classes, grid, rels, image_dims)
