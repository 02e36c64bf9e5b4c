"""The five saliency evaluation metrics.

Every metric is a pure per-image score followed by an arithmetic mean.
Per-image failures (empty masks, backend errors after retries) are recorded
and excluded from the mean; missing capabilities fail fast.
"""
from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from sycam.errors import BackendError, CapabilityError, ConfigError
from sycam.expr import Expr, eval_weights, print_expr
from sycam.saliency import (
    DELETE,
    INSERT,
    build_saliency,
    perturbation_batch,
    rank_cells,
    upsample_bilinear,
)
from sycam.tensor_io import Dataset, ImageRecord

WeightFn = Callable[[ImageRecord], np.ndarray]

AVG_DROP = "avgdrop"
DELETION = "deletion"
INSERTION = "insertion"
MGT = "mgt"
SCH = "sch"

ALL_METRICS = (AVG_DROP, DELETION, INSERTION, MGT, SCH)


@dataclass(frozen=True)
class MetricKind:
    name: str
    p: int | None = None  # perturbation limit, deletion/insertion only

    def __post_init__(self) -> None:
        if self.name not in ALL_METRICS:
            raise ConfigError(f"unknown metric {self.name!r}", field="metric.kind")
        if self.name in (DELETION, INSERTION):
            if self.p is None or self.p < 1:
                raise ConfigError("deletion/insertion need P >= 1", field="metric.p")
        elif self.p is not None:
            raise ConfigError(f"metric {self.name} takes no P", field="metric.p")

    @property
    def higher_is_better(self) -> bool:
        return self.name != AVG_DROP

    @property
    def needs_backend(self) -> bool:
        return self.name in (AVG_DROP, DELETION, INSERTION)

    def __str__(self) -> str:
        return self.name if self.p is None else f"{self.name}(P={self.p})"


@dataclass
class MetricScore:
    value: float
    per_image: list[tuple[str, float]]
    higher_is_better: bool
    failures: list[tuple[str, str]] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)


def as_weight_fn(e: Expr | WeightFn) -> WeightFn:
    if isinstance(e, Expr):
        return lambda rec: eval_weights(e, rec)
    return e


def check_capabilities(kind: MetricKind, ds: Dataset) -> None:
    """Fail fast (naming the missing field) before any search or evaluation."""
    for rec in ds.records:
        if kind.name in (DELETION, INSERTION, AVG_DROP) and rec.image is None:
            raise CapabilityError(
                f"metric {kind.name} requires 'image' (missing on {rec.image_id!r})",
                field="image",
            )
        if kind.name in (DELETION, INSERTION) and rec.blurred_image is None:
            raise CapabilityError(
                f"metric {kind.name} requires 'blurred_image' (missing on {rec.image_id!r})",
                field="blurred_image",
            )
        if kind.name in (MGT, SCH) and rec.gt_mask is None:
            raise CapabilityError(
                f"metric {kind.name} requires 'gt_mask' (missing on {rec.image_id!r})",
                field="gt_mask",
            )
    if kind.name in (DELETION, INSERTION):
        _, w, h = ds.grid
        if kind.p > w * h:
            raise ConfigError(f"P={kind.p} exceeds grid cells {w * h}", field="metric.p")


def image_score(kind: MetricKind, weight_fn: WeightFn, rec: ImageRecord, backend=None) -> float:
    """One image's metric value (natural orientation, not negated)."""
    if kind.name == DELETION:
        return _perturbation_score(weight_fn, rec, backend, kind.p, DELETE)
    if kind.name == INSERTION:
        return _perturbation_score(weight_fn, rec, backend, kind.p, INSERT)
    if kind.name == AVG_DROP:
        return _avg_drop_score(weight_fn, rec, backend)[0]
    if kind.name == MGT:
        return _mgt_score(weight_fn, rec)
    return _sch_score(weight_fn, rec)


def _smap(weight_fn: WeightFn, rec: ImageRecord):
    return build_saliency(weight_fn(rec), rec.feature_maps)


def _perturbation_score(weight_fn, rec, backend, p, direction) -> float:
    smap = _smap(weight_fn, rec)
    ranking = rank_cells(smap)
    batch = perturbation_batch(rec, ranking, p, direction)
    scores = backend.classify(batch)[:, rec.predicted_class]
    if direction == DELETE:
        deltas = scores[0] - scores
    else:
        deltas = scores - scores[0]
    return float(deltas.sum() / (p + 1))


def drop_value(y_c: float, h_c: float) -> float:
    """Relative confidence drop in percent: max(0, y - h) / y * 100."""
    return max(0.0, y_c - h_c) / y_c * 100.0


# Bilinear upsampling computes symmetric pixels through different float
# orderings, leaving ~1e-16 gaps between values that are equal in exact
# arithmetic. Treating anything below this relative granularity as a tie keeps
# the top-p pixel set stable under positive rescaling of the weight vector.
RANK_EPSILON = 1e-12


def top_pixel_order(heat: np.ndarray) -> np.ndarray:
    """Flat pixel indices by descending value; values within RANK_EPSILON
    (relative) count as ties and fall back to row-major order."""
    flat = np.asarray(heat, dtype=np.float64).ravel()
    scale = max(1.0, float(flat.max()) if flat.size else 1.0)
    q = np.round(flat / (RANK_EPSILON * scale))
    return np.argsort(-q, kind="stable")


def mgt_value(heat: np.ndarray, mask: np.ndarray) -> float:
    """Fraction of the top-p heat pixels (p = mask ones, ties by row-major
    index) that lie inside the mask."""
    mask = np.asarray(mask, dtype=np.float64)
    p = int(round(float(mask.sum())))
    if p < 1:
        raise CapabilityError("gt_mask has no positive pixels", field="gt_mask")
    order = top_pixel_order(heat)
    n = float(mask.ravel()[order[:p]].sum())
    return n / p


def sch_value(heat: np.ndarray, mask: np.ndarray) -> float:
    """Heat mass fraction inside the mask; an all-zero heat scores 0."""
    total = float(np.asarray(heat, dtype=np.float64).sum())
    if total == 0.0:
        return 0.0
    return float((np.asarray(heat, dtype=np.float64) * mask).sum()) / total


def _avg_drop_score(weight_fn, rec, backend) -> tuple[float, bool]:
    if rec.image is None:
        raise CapabilityError("avgdrop requires 'image'", field="image")
    smap = _smap(weight_fn, rec)
    _, height, width = rec.image.shape
    heat = upsample_bilinear(smap.normalized, height, width)
    masked = np.asarray(rec.image, dtype=np.float64) * heat[None, :, :]
    h_c = float(backend.classify(masked[None])[0, rec.predicted_class])
    y_c = float(rec.class_scores[rec.predicted_class])
    if y_c == 0.0:
        return 0.0, True  # cannot drop from nothing; flagged
    return drop_value(y_c, h_c), False


def _mask_dims(rec: ImageRecord) -> tuple[int, int]:
    if rec.gt_mask is None:
        raise CapabilityError("metric requires 'gt_mask'", field="gt_mask")
    return rec.gt_mask.shape


def _mgt_score(weight_fn, rec) -> float:
    height, width = _mask_dims(rec)
    smap = _smap(weight_fn, rec)
    heat = upsample_bilinear(smap.normalized, height, width)
    return mgt_value(heat, rec.gt_mask)


def _sch_score(weight_fn, rec) -> float:
    height, width = _mask_dims(rec)
    smap = _smap(weight_fn, rec)
    heat = upsample_bilinear(smap.normalized, height, width)
    return sch_value(heat, rec.gt_mask)


def evaluate_metric(
    kind: MetricKind,
    e: Expr | WeightFn,
    ds: Dataset,
    backend=None,
    records: tuple[ImageRecord, ...] | None = None,
) -> MetricScore:
    """Metric over a dataset (or an explicit record subset): mean of per-image values."""
    if kind.needs_backend and backend is None:
        raise ConfigError(f"metric {kind.name} needs a backend", field="backend")
    weight_fn = as_weight_fn(e)
    per_image: list[tuple[str, float]] = []
    failures: list[tuple[str, str]] = []
    flags: list[str] = []
    for rec in records if records is not None else ds.records:
        try:
            if kind.name == AVG_DROP:
                val, flagged = _avg_drop_score(weight_fn, rec, backend)
                if flagged:
                    flags.append(f"{rec.image_id}: zero base score, drop defined as 0")
            else:
                val = image_score(kind, weight_fn, rec, backend)
        except (BackendError, CapabilityError) as exc:
            failures.append((rec.image_id, str(exc)))
            continue
        per_image.append((rec.image_id, val))
    if not per_image:
        raise CapabilityError(f"metric {kind.name} computable on no image")
    value = float(np.mean([v for _, v in per_image]))
    return MetricScore(
        value=value,
        per_image=per_image,
        higher_is_better=kind.higher_is_better,
        failures=failures,
        flags=flags,
    )


def metric_deletion(e, ds: Dataset, backend, p: int) -> MetricScore:
    return evaluate_metric(MetricKind(DELETION, p), e, ds, backend)


def metric_insertion(e, ds: Dataset, backend, p: int) -> MetricScore:
    return evaluate_metric(MetricKind(INSERTION, p), e, ds, backend)


def metric_avg_drop(e, ds: Dataset, backend) -> MetricScore:
    return evaluate_metric(MetricKind(AVG_DROP), e, ds, backend)


def metric_mgt(e, ds: Dataset) -> MetricScore:
    return evaluate_metric(MetricKind(MGT), e, ds)


def metric_sch(e, ds: Dataset) -> MetricScore:
    return evaluate_metric(MetricKind(SCH), e, ds)


def write_csv(path, kind: MetricKind, e: Expr | str, score: MetricScore) -> None:
    """Per-image scores as CSV: image_id, metric, expr_text, value."""
    expr_text = print_expr(e) if isinstance(e, Expr) else str(e)
    with open(path, "w") as f:
        f.write("image_id,metric,expr_text,value\n")
        for image_id, val in score.per_image:
            f.write(f'{image_id},{kind},"{expr_text}",{val!r}\n')
