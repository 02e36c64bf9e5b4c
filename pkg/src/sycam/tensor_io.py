"""SYCTNS01 tensor files, dataset manifests, and the synthetic dataset generator.

Tensor file layout: 8-byte magic ``SYCTNS01``, one UTF-8 JSON header line
``{"dims": [...], "dtype": "f32", "order": "LE"}`` terminated by ``\\n``,
then the raw little-endian float32 payload in row-major order.

A dataset is a ``manifest.json`` (format_version 1) plus one directory per
image holding the per-record tensors and a small ``record.json``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve1d

from sycam.errors import DatasetError, TensorFormatError

MAGIC = b"SYCTNS01"
FORMAT_VERSION = 1

RECORD_TENSORS = ("class_scores", "feature_maps", "grads", "cic_scores", "abl_scores")
OPTIONAL_TENSORS = ("image", "blurred_image", "gt_mask")

# Deterministic "highly blurred" baseline: separable Gaussian, kernel 51, sigma 50,
# reflect padding.
BLUR_KERNEL_SIZE = 51
BLUR_SIGMA = 50.0


def save_tensor(t: np.ndarray, path: str | Path) -> None:
    """Write a float32 tensor; round-trips bit-exactly through load_tensor."""
    arr = np.ascontiguousarray(t, dtype="<f4")
    header = json.dumps({"dims": list(arr.shape), "dtype": "f32", "order": "LE"})
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(header.encode("utf-8"))
        f.write(b"\n")
        f.write(arr.tobytes())


def load_tensor(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise TensorFormatError(f"{path}: bad magic {data[:8]!r}")
    nl = data.find(b"\n", len(MAGIC))
    if nl < 0:
        raise TensorFormatError(f"{path}: missing header terminator")
    try:
        header = json.loads(data[len(MAGIC) : nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TensorFormatError(f"{path}: malformed header: {exc}") from exc
    dims = header.get("dims")
    if (
        not isinstance(dims, list)
        or not dims
        or not all(isinstance(d, int) and d >= 1 for d in dims)
    ):
        raise TensorFormatError(f"{path}: invalid dims {dims!r}")
    if header.get("dtype") != "f32" or header.get("order") != "LE":
        raise TensorFormatError(f"{path}: unsupported dtype/order in header")
    payload = data[nl + 1 :]
    count = int(np.prod(dims))
    if len(payload) != 4 * count:
        raise TensorFormatError(
            f"{path}: dims {dims} need {4 * count} payload bytes, got {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims)
    if not np.isfinite(arr).all():
        raise TensorFormatError(f"{path}: non-finite values in payload")
    return arr


@dataclass(frozen=True)
class ImageRecord:
    """One image's precomputed terminals plus optional pixel data."""

    image_id: str
    class_scores: np.ndarray  # [C] softmax probabilities of the original image
    predicted_class: int  # argmax of class_scores
    feature_maps: np.ndarray  # [K, w, h]
    grads: np.ndarray  # [K] pooled gradients for the predicted class
    cic_scores: np.ndarray  # [K]
    abl_scores: np.ndarray  # [K]
    true_class: int | None = None
    image: np.ndarray | None = None  # [ch, H, W]
    blurred_image: np.ndarray | None = None  # [ch, H, W]
    gt_mask: np.ndarray | None = None  # [H, W] in {0, 1}

    @property
    def grid(self) -> tuple[int, int, int]:
        return tuple(self.feature_maps.shape)  # (K, w, h)


@dataclass(frozen=True)
class Dataset:
    classes: tuple[str, ...]
    grid: tuple[int, int, int]  # (K, w, h)
    image_dims: tuple[int, int, int] | None
    records: tuple[ImageRecord, ...]
    root: Path
    stub_model_path: Path | None = None
    warnings: tuple[str, ...] = field(default=())

    def __len__(self) -> int:
        return len(self.records)

    def by_id(self, image_id: str) -> ImageRecord:
        for rec in self.records:
            if rec.image_id == image_id:
                return rec
        raise DatasetError("unknown image id", record_id=image_id)


def _validate_record(rec: ImageRecord, grid: tuple[int, int, int]) -> list[str]:
    rid = rec.image_id
    warnings: list[str] = []
    scores = rec.class_scores
    if scores.ndim != 1:
        raise DatasetError("class_scores must be 1-D", rid, "class_scores")
    if abs(float(scores.sum()) - 1.0) > 1e-4:
        raise DatasetError(
            f"class_scores sum {float(scores.sum()):.6f} not within 1e-4 of 1",
            rid,
            "class_scores",
        )
    if scores.min() < 0.0 or scores.max() > 1.0:
        raise DatasetError("class_scores outside [0, 1]", rid, "class_scores")
    if rec.feature_maps.ndim != 3:
        raise DatasetError("feature_maps must be [K, w, h]", rid, "feature_maps")
    if tuple(rec.feature_maps.shape) != grid:
        raise DatasetError(
            f"grid {tuple(rec.feature_maps.shape)} disagrees with dataset grid {grid}",
            rid,
            "feature_maps",
        )
    k = grid[0]
    for name in ("grads", "cic_scores", "abl_scores"):
        vec = getattr(rec, name)
        if vec.shape != (k,):
            raise DatasetError(f"expected shape ({k},), got {vec.shape}", rid, name)
    if rec.image is not None and rec.image.ndim != 3:
        raise DatasetError("image must be [ch, H, W]", rid, "image")
    if rec.blurred_image is not None:
        if rec.image is None:
            warnings.append(f"record {rid!r}: blurred_image present without image")
        elif rec.blurred_image.shape != rec.image.shape:
            raise DatasetError(
                f"blurred_image shape {rec.blurred_image.shape} != image shape {rec.image.shape}",
                rid,
                "blurred_image",
            )
    if rec.gt_mask is not None:
        if rec.gt_mask.ndim != 2:
            raise DatasetError("gt_mask must be [H, W]", rid, "gt_mask")
        if rec.image is not None and rec.gt_mask.shape != rec.image.shape[1:]:
            raise DatasetError(
                f"gt_mask shape {rec.gt_mask.shape} != image spatial dims {rec.image.shape[1:]}",
                rid,
                "gt_mask",
            )
        vals = np.unique(rec.gt_mask)
        if not np.all(np.isin(vals, (0.0, 1.0))):
            raise DatasetError("gt_mask values must be 0 or 1", rid, "gt_mask")
        if rec.gt_mask.sum() == 0:
            warnings.append(f"record {rid!r}: gt_mask has no positive pixels")
    return warnings


def _load_record(root: Path, rel: str) -> ImageRecord:
    rec_dir = root / rel
    meta_path = rec_dir / "record.json"
    if not meta_path.exists():
        raise DatasetError("missing record.json", record_id=rel)
    meta = json.loads(meta_path.read_text())
    tensors: dict[str, np.ndarray | None] = {}
    for name in RECORD_TENSORS:
        p = rec_dir / f"{name}.tns"
        if not p.exists():
            raise DatasetError("missing tensor file", record_id=meta.get("image_id", rel), field=name)
        tensors[name] = load_tensor(p)
    for name in OPTIONAL_TENSORS:
        p = rec_dir / f"{name}.tns"
        tensors[name] = load_tensor(p) if p.exists() else None
    scores = tensors["class_scores"]
    return ImageRecord(
        image_id=meta["image_id"],
        class_scores=scores,
        predicted_class=int(np.argmax(scores)),
        feature_maps=tensors["feature_maps"],
        grads=tensors["grads"],
        cic_scores=tensors["cic_scores"],
        abl_scores=tensors["abl_scores"],
        true_class=meta.get("true_class"),
        image=tensors["image"],
        blurred_image=tensors["blurred_image"],
        gt_mask=tensors["gt_mask"],
    )


def load_dataset(manifest_path: str | Path) -> Dataset:
    """Load and validate a dataset; any invariant violation raises DatasetError."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    manifest = json.loads(manifest_path.read_text())
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise DatasetError(f"unsupported format_version {version!r}")
    grid = tuple(manifest["grid"])
    if len(grid) != 3 or any(not isinstance(g, int) or g < 1 for g in grid):
        raise DatasetError(f"invalid grid {grid!r}")
    image_dims = manifest.get("image_dims")
    image_dims = tuple(image_dims) if image_dims else None
    n_classes = len(manifest["classes"])
    records = []
    warnings: list[str] = []
    for rel in manifest["records"]:
        rec = _load_record(root, rel)
        warnings.extend(_validate_record(rec, grid))
        if rec.class_scores.shape != (n_classes,):
            raise DatasetError(
                f"class_scores length {rec.class_scores.shape[0]} disagrees with "
                f"{n_classes} manifest classes",
                rec.image_id,
                "class_scores",
            )
        if image_dims is not None and rec.image is not None and tuple(rec.image.shape) != image_dims:
            raise DatasetError(
                f"image dims {tuple(rec.image.shape)} disagree with manifest {image_dims}",
                rec.image_id,
                "image",
            )
        records.append(rec)
    ids = [r.image_id for r in records]
    if len(set(ids)) != len(ids):
        raise DatasetError("duplicate image ids in manifest")
    stub_rel = manifest.get("stub_model")
    return Dataset(
        classes=tuple(manifest["classes"]),
        grid=grid,  # type: ignore[arg-type]
        image_dims=image_dims,  # type: ignore[arg-type]
        records=tuple(records),
        root=root,
        stub_model_path=(root / stub_rel) if stub_rel else None,
        warnings=tuple(warnings),
    )


def write_dataset(
    out_dir: str | Path,
    classes: list[str],
    grid: tuple[int, int, int],
    records: list[ImageRecord],
    image_dims: tuple[int, int, int] | None = None,
    stub_model_rel: str | None = None,
) -> Path:
    """Write records and manifest under out_dir; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rels = []
    for rec in records:
        rel = f"records/{rec.image_id}"
        rec_dir = out_dir / rel
        rec_dir.mkdir(parents=True, exist_ok=True)
        (rec_dir / "record.json").write_text(
            json.dumps({"image_id": rec.image_id, "true_class": rec.true_class}) + "\n"
        )
        for name in RECORD_TENSORS:
            save_tensor(getattr(rec, name), rec_dir / f"{name}.tns")
        for name in OPTIONAL_TENSORS:
            val = getattr(rec, name)
            if val is not None:
                save_tensor(val, rec_dir / f"{name}.tns")
        rels.append(rel)
    manifest = {
        "format_version": FORMAT_VERSION,
        "classes": classes,
        "grid": list(grid),
        "image_dims": list(image_dims) if image_dims else None,
        "records": rels,
        "stub_model": stub_model_rel,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest_path


def gaussian_blur(image: np.ndarray) -> np.ndarray:
    """Separable Gaussian blur (kernel 51, sigma 50, reflect padding) per channel."""
    half = BLUR_KERNEL_SIZE // 2
    xs = np.arange(-half, half + 1, dtype=np.float64)
    kernel = np.exp(-(xs**2) / (2.0 * BLUR_SIGMA**2))
    kernel /= kernel.sum()
    img = np.asarray(image, dtype=np.float64)
    out = convolve1d(img, kernel, axis=-1, mode="reflect")
    out = convolve1d(out, kernel, axis=-2, mode="reflect")
    return out


# --- synthetic generator -----------------------------------------------------
#
# The synthetic "CNN" is linear: K orthonormal block filters turn an image into
# feature maps, and a linear head turns feature maps into logits. Composing the
# two gives per-class image-space weight maps, which is exactly the stub model
# the backends run. Orthonormality makes channel ablation and feature-map
# gradients expressible as image-space edits, so every stored terminal can be
# recomputed independently by rerunning the stub model.


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _block_view(image: np.ndarray, w: int, h: int) -> np.ndarray:
    """[ch, H, W] -> [w, h, ch, bh, bw] view of equal image blocks."""
    ch, height, width = image.shape
    bh, bw = height // w, width // h
    return image.reshape(ch, w, bh, h, bw).transpose(1, 3, 0, 2, 4)


def synth_feature_maps(image: np.ndarray, filters: np.ndarray, w: int, h: int) -> np.ndarray:
    """A_k[i,j] = <filters[k], image block (i,j)>."""
    blocks = _block_view(np.asarray(image, dtype=np.float64), w, h)
    return np.einsum("kduv,ijduv->kij", np.asarray(filters, dtype=np.float64), blocks)


def _upsample_minmax_mask(fmap: np.ndarray, height: int, width: int) -> np.ndarray:
    from sycam import kernels

    up = kernels.bilinear_resize(np.asarray(fmap, dtype=np.float64), height, width)
    lo, hi = up.min(), up.max()
    if hi == lo:
        return np.zeros_like(up)
    return (up - lo) / (hi - lo)


def make_synthetic_dataset(
    out_dir: str | Path,
    n_classes: int,
    images_per_class: int,
    K: int,
    w: int,
    h: int,
    ch: int,
    H: int,
    W: int,
    seed: int,
) -> Path:
    """Deterministically generate a dataset plus its stub model spec.

    Every record's grads/cic/abl are consistent with the emitted stub model:
    grads are pooled central finite differences of the predicted-class
    probability w.r.t. feature-map cells, cic is the stub score of the image
    masked by each normalized upsampled feature map, and abl is the relative
    score drop when a channel is removed.
    """
    for name, val in (("n_classes", n_classes), ("images_per_class", images_per_class),
                      ("K", K), ("w", w), ("h", h), ("ch", ch), ("H", H), ("W", W)):
        if val < 1:
            raise DatasetError(f"invalid dims: {name} = {val} must be >= 1")
    if n_classes < 2:
        raise DatasetError("invalid dims: n_classes must be >= 2")
    if H % w != 0 or W % h != 0:
        raise DatasetError(f"invalid dims: H={H}, W={W} must be divisible by w={w}, h={h}")
    bh, bw = H // w, W // h
    if K > ch * bh * bw:
        raise DatasetError(
            f"invalid dims: K={K} exceeds block capacity ch*bh*bw={ch * bh * bw}"
        )

    rng = np.random.default_rng(seed)
    # Orthonormal block filters via QR on a random Gaussian matrix.
    raw = rng.normal(size=(ch * bh * bw, K))
    q, _ = np.linalg.qr(raw)
    filters = np.ascontiguousarray(q.T.reshape(K, ch, bh, bw))
    head = rng.normal(size=(n_classes, K, w, h))
    # Per-class image-space weights: the composition of filters and head.
    weights = np.einsum("ckij,kduv->cdiujv", head, filters).reshape(n_classes, ch, H, W)
    tau = float(np.sqrt(K * w * h))

    def classify(img: np.ndarray) -> np.ndarray:
        logits = np.tensordot(weights, img, axes=3) / tau
        return _softmax(logits)

    records = []
    for cls in range(n_classes):
        direction = weights[cls] / np.linalg.norm(weights[cls])
        for i in range(images_per_class):
            base = rng.normal(size=(ch, H, W))
            boost = 0.0
            image = base
            # Push the image toward its target class so predicted classes are balanced.
            while int(np.argmax(classify(image))) != cls:
                boost += 0.5 * tau
                image = base + boost * direction
            fmaps = synth_feature_maps(image, filters, w, h)
            probs = classify(image)
            c0 = int(np.argmax(probs))
            head_c = head[:, :, :, :]  # [C, K, w, h]

            def head_probs(a: np.ndarray) -> np.ndarray:
                return _softmax(np.einsum("ckij,kij->c", head_c, a) / tau)

            # grads: pooled central finite differences of P(c0) w.r.t. A cells.
            eps = 1e-4
            grads = np.empty(K)
            for k in range(K):
                acc = 0.0
                for ii in range(w):
                    for jj in range(h):
                        ap = fmaps.copy()
                        ap[k, ii, jj] += eps
                        am = fmaps.copy()
                        am[k, ii, jj] -= eps
                        acc += (head_probs(ap)[c0] - head_probs(am)[c0]) / (2 * eps)
                grads[k] = acc / (w * h)
            # cic: stub score of the image masked by the normalized upsampled map.
            cic = np.empty(K)
            for k in range(K):
                mask = _upsample_minmax_mask(fmaps[k], H, W)
                cic[k] = classify(image * mask[None, :, :])[c0]
            # abl: relative drop when channel k's activations are zeroed.
            abl = np.empty(K)
            y0 = head_probs(fmaps)[c0]
            for k in range(K):
                ablated = fmaps.copy()
                ablated[k] = 0.0
                abl[k] = (y0 - head_probs(ablated)[c0]) / y0
            # gt mask: a deterministic random rectangle covering ~1/4 of the image.
            mh, mw = max(1, H // 2), max(1, W // 2)
            top = int(rng.integers(0, H - mh + 1))
            left = int(rng.integers(0, W - mw + 1))
            gt = np.zeros((H, W))
            gt[top : top + mh, left : left + mw] = 1.0

            records.append(
                ImageRecord(
                    image_id=f"img_{cls:02d}_{i:04d}",
                    class_scores=probs.astype(np.float32),
                    predicted_class=c0,
                    feature_maps=fmaps.astype(np.float32),
                    grads=grads.astype(np.float32),
                    cic_scores=cic.astype(np.float32),
                    abl_scores=abl.astype(np.float32),
                    true_class=cls,
                    image=image.astype(np.float32),
                    blurred_image=gaussian_blur(image).astype(np.float32),
                    gt_mask=gt.astype(np.float32),
                )
            )

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_tensor(weights, out_dir / "stub_weights.tns")
    save_tensor(filters, out_dir / "stub_filters.tns")
    save_tensor(head, out_dir / "stub_head.tns")
    stub_spec = {
        "num_classes": n_classes,
        "image_dims": [ch, H, W],
        "temperature": tau,
        "weights": "stub_weights.tns",
        # Generator internals, ignored by the backend; kept so the terminals
        # can be re-derived from the emitted files alone.
        "filters": "stub_filters.tns",
        "head": "stub_head.tns",
        "grid": [K, w, h],
    }
    (out_dir / "stub_model.json").write_text(json.dumps(stub_spec, indent=2) + "\n")
    return write_dataset(
        out_dir,
        classes=[f"class_{c}" for c in range(n_classes)],
        grid=(K, w, h),
        records=records,
        image_dims=(ch, H, W),
        stub_model_rel="stub_model.json",
    )
