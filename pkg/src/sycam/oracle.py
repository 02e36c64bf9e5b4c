"""Tiered correctness oracle, threshold evolution, and synthesis orchestration.

Candidates are scored image by image on nested subsets I1 c I2 c ... c I.
A tier passes when the candidate strictly beats the incumbent's per-image
score on at least half the subset AND has a strictly higher subset mean;
the first failing tier discards the candidate. Scores are oriented so higher
is better internally (Average Drop is negated). The threshold starts at 0
with no incumbent; for lower-is-better metrics that baseline is degenerate,
so the very first acceptance is relaxed to any finite mean and flagged.
"""
from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from sycam.backend import Backend, BackendConfig, load_backend
from sycam.enumerator import (
    EquivalenceSet,
    EvalOutcome,
    GrammarConfig,
    SynthesisTrace,
    bottom_up_search,
)
from sycam.errors import BackendError, CapabilityError, ConfigError
from sycam.expr import Expr, Guard, Terminal, TerminalKind, print_expr
from sycam.metrics import MetricKind, as_weight_fn, check_capabilities, image_score
from sycam.tensor_io import Dataset, ImageRecord, load_dataset


@dataclass(frozen=True)
class TierConfig:
    subset_sizes: tuple[int, ...]  # strictly increasing, ends at |I|
    sampling_seed: int = 0
    stratified_by_class: bool = True

    def __post_init__(self) -> None:
        sizes = self.subset_sizes
        if not sizes or any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ConfigError(
                f"tier sizes must be strictly increasing, got {list(sizes)}",
                field="tiers.sizes",
            )


def build_tier_order(ds_records: tuple[ImageRecord, ...], cfg: TierConfig) -> list[ImageRecord]:
    """Deterministic permutation whose prefixes are the nested tier subsets.

    Stratified mode shuffles within each class and interleaves classes
    round-robin so every prefix is close to class-balanced. Stratification
    uses true labels when every record has one, else predicted classes.
    """
    rng = np.random.default_rng(cfg.sampling_seed)
    if not cfg.stratified_by_class:
        order = rng.permutation(len(ds_records))
        return [ds_records[i] for i in order]
    use_true = all(r.true_class is not None for r in ds_records)
    groups: dict[int, list[ImageRecord]] = {}
    for rec in ds_records:
        label = rec.true_class if use_true else rec.predicted_class
        groups.setdefault(label, []).append(rec)
    shuffled = []
    for label in sorted(groups):
        idx = rng.permutation(len(groups[label]))
        shuffled.append([groups[label][i] for i in idx])
    out: list[ImageRecord] = []
    i = 0
    while len(out) < len(ds_records):
        for grp in shuffled:
            if i < len(grp):
                out.append(grp[i])
        i += 1
    return out


@dataclass(frozen=True)
class ThresholdState:
    """Running best: per-image scores over I (internal orientation) and their mean."""

    lambda_per_image: dict[str, float] = field(default_factory=dict)
    lambda_mean: float = 0.0
    best_expr: Expr | None = None


def update_threshold(state: ThresholdState, e: Expr, scores: dict[str, float]) -> ThresholdState:
    """Install an accepted expression. The mean must strictly improve."""
    mean = float(np.mean(list(scores.values())))
    if state.best_expr is not None:
        assert mean > state.lambda_mean, "acceptance requires strict mean improvement"
    return ThresholdState(lambda_per_image=dict(scores), lambda_mean=mean, best_expr=e)


class TieredEvaluator:
    """Correctness oracle shared by all search workers; thread-safe."""

    def __init__(
        self,
        kind: MetricKind,
        order: list[ImageRecord],
        subset_sizes: tuple[int, ...],
        backend: Backend | None,
    ):
        if subset_sizes[-1] != len(order):
            raise ConfigError(
                f"final tier size {subset_sizes[-1]} must equal dataset size {len(order)}",
                field="tiers.sizes",
            )
        self.kind = kind
        self.order = order
        self.sizes = subset_sizes
        self.backend = backend
        self.orient = 1.0 if kind.higher_is_better else -1.0
        self.state = ThresholdState()
        self.lock = threading.Lock()

    def _score(self, weight_fn, rec: ImageRecord) -> float:
        return self.orient * image_score(self.kind, weight_fn, rec, self.backend)

    def _beats(
        self,
        scores: dict[str, float],
        subset: list[ImageRecord],
        incumbent: ThresholdState,
    ) -> tuple[bool, bool]:
        """(tier passed, relaxed-initial flag) against a threshold snapshot."""
        values = [scores[r.image_id] for r in subset]
        mean = float(np.mean(values))
        if not math.isfinite(mean):
            return False, False
        if incumbent.best_expr is None:
            if not self.kind.higher_is_better:
                # Internal scores can never exceed the lambda=0 baseline for a
                # lower-is-better metric; accept the first finite candidate.
                return True, True
            wins = sum(v > 0.0 for v in values)
            return wins >= math.ceil(len(subset) / 2) and mean > 0.0, False
        wins = sum(scores[r.image_id] > incumbent.lambda_per_image[r.image_id] for r in subset)
        inc_mean = float(np.mean([incumbent.lambda_per_image[r.image_id] for r in subset]))
        return wins >= math.ceil(len(subset) / 2) and mean > inc_mean, False

    def __call__(self, e: Expr) -> EvalOutcome:
        weight_fn = as_weight_fn(e)
        with self.lock:
            snapshot = self.state
        scores: dict[str, float] = {}
        tier_means: list[float] = []
        relaxed = False
        computed = 0
        for ti, size in enumerate(self.sizes):
            for rec in self.order[computed:size]:
                try:
                    scores[rec.image_id] = self._score(weight_fn, rec)
                except (CapabilityError, BackendError) as exc:
                    # Skipped, not discarded: the candidate was never comparable.
                    return EvalOutcome(
                        accepted=False,
                        tier_reached=ti,
                        scores_per_tier=tier_means,
                        error=f"skipped: {exc}",
                    )
            computed = size
            subset = self.order[:size]
            tier_means.append(float(np.mean([scores[r.image_id] for r in subset])))
            passed, was_relaxed = self._beats(scores, subset, snapshot)
            relaxed = relaxed or was_relaxed
            if not passed:
                return EvalOutcome(
                    accepted=False, tier_reached=ti + 1, scores_per_tier=tier_means
                )
        with self.lock:
            if self.state is not snapshot:
                # Incumbent moved while we evaluated: re-validate on the full set.
                passed, _ = self._beats(scores, self.order, self.state)
                if not passed:
                    return EvalOutcome(
                        accepted=False,
                        tier_reached=len(self.sizes),
                        scores_per_tier=tier_means,
                        error="stale: displaced by a concurrent acceptance",
                    )
            self.state = update_threshold(self.state, e, scores)
            new_threshold = self.state.lambda_mean
        return EvalOutcome(
            accepted=True,
            tier_reached=len(self.sizes),
            scores_per_tier=tier_means,
            new_threshold=new_threshold,
            mean=self.orient * new_threshold,
            relaxed=relaxed,
        )


@dataclass
class SynthesisConfig:
    dataset: str
    metric: MetricKind
    grammar: GrammarConfig = field(default_factory=GrammarConfig)
    budget_seconds: float = 60.0
    backend: BackendConfig | None = None  # None: use the dataset's stub model
    tier_sizes: tuple[int, ...] = (100, 1000)  # intermediate sizes; |I| appended
    tier_seed: int = 0
    stratified: bool = True
    equivalence_mode: str = "map"
    equivalence_per_class: int = 1
    equivalence_tolerance: float = 1e-6
    workers: int = 1
    deterministic: bool = False
    max_candidates: int | None = None
    classwise: bool = False

    def __post_init__(self) -> None:
        if self.budget_seconds <= 0:
            raise ConfigError("budget must be > 0", field="budget_seconds")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1", field="workers")

    _KNOWN_KEYS = frozenset(
        {
            "dataset", "metric", "grammar", "budget_seconds", "backend", "tiers",
            "equivalence", "workers", "deterministic", "max_candidates",
            "classwise", "out_dir",
        }
    )

    @classmethod
    def from_json(cls, obj: dict, base_dir: Path | None = None) -> "SynthesisConfig":
        unknown = set(obj) - cls._KNOWN_KEYS
        if unknown:
            raise ConfigError("unknown configuration key", field=sorted(unknown)[0])
        if "dataset" not in obj:
            raise ConfigError("missing required key", field="dataset")
        if "metric" not in obj:
            raise ConfigError("missing required key", field="metric")
        metric_obj = obj["metric"]
        if isinstance(metric_obj, str):
            metric = MetricKind(metric_obj)
        elif isinstance(metric_obj, dict):
            metric = MetricKind(metric_obj.get("kind", ""), metric_obj.get("p"))
        else:
            raise ConfigError("metric must be a string or object", field="metric")
        grammar_obj = obj.get("grammar", "G2")
        if isinstance(grammar_obj, str):
            grammar = GrammarConfig.named(grammar_obj)
        elif isinstance(grammar_obj, dict):
            terminals = tuple(
                _terminal_from_name(t) for t in grammar_obj.get("terminals", [])
            ) or GrammarConfig().terminals
            grammar = GrammarConfig(
                terminals=terminals,
                unary_rules=tuple(grammar_obj.get("unary_rules", ("relu",))),
                binary_rules=tuple(grammar_obj.get("binary_rules", ("add", "twoplus", "mul"))),
            )
        else:
            raise ConfigError("grammar must be a string or object", field="grammar")
        backend_obj = obj.get("backend")
        backend = None
        if backend_obj is not None and backend_obj != "auto":
            backend = BackendConfig.from_json(backend_obj)
            if backend.path and base_dir is not None and not Path(backend.path).is_absolute():
                backend = replace(backend, path=str(base_dir / backend.path))
        tiers = obj.get("tiers", {})
        for key in set(tiers) - {"sizes", "seed", "stratified"}:
            raise ConfigError("unknown configuration key", field=f"tiers.{key}")
        eq = obj.get("equivalence", {})
        for key in set(eq) - {"mode", "per_class", "tolerance"}:
            raise ConfigError("unknown configuration key", field=f"equivalence.{key}")
        dataset = obj["dataset"]
        if base_dir is not None and not Path(dataset).is_absolute():
            dataset = str(base_dir / dataset)
        return cls(
            dataset=dataset,
            metric=metric,
            grammar=grammar,
            budget_seconds=float(obj.get("budget_seconds", 60.0)),
            backend=backend,
            tier_sizes=tuple(tiers.get("sizes", (100, 1000))),
            tier_seed=int(tiers.get("seed", 0)),
            stratified=bool(tiers.get("stratified", True)),
            equivalence_mode=eq.get("mode", "map"),
            equivalence_per_class=int(eq.get("per_class", 1)),
            equivalence_tolerance=float(eq.get("tolerance", 1e-6)),
            workers=int(obj.get("workers", 1)),
            deterministic=bool(obj.get("deterministic", False)),
            max_candidates=obj.get("max_candidates"),
            classwise=bool(obj.get("classwise", False)),
        )


def _terminal_from_name(name: str) -> TerminalKind:
    for kind in TerminalKind:
        if kind.value == name:
            return kind
    raise ConfigError(f"unknown terminal {name!r}", field="grammar.terminals")


def resolve_tier_sizes(intermediate: tuple[int, ...], total: int) -> tuple[int, ...]:
    sizes = [s for s in intermediate if 0 < s < total]
    sizes.append(total)
    return tuple(sizes)


def pick_equivalence_records(
    records: tuple[ImageRecord, ...], per_class: int
) -> tuple[ImageRecord, ...]:
    """Default probe set: the first `per_class` records of each predicted class."""
    chosen: list[ImageRecord] = []
    counts: dict[int, int] = {}
    for rec in records:
        if counts.get(rec.predicted_class, 0) < per_class:
            chosen.append(rec)
            counts[rec.predicted_class] = counts.get(rec.predicted_class, 0) + 1
    return tuple(chosen)


def build_equivalence_set(
    records: tuple[ImageRecord, ...],
    mode: str,
    per_class: int,
    tolerance: float,
    metric_fn=None,
) -> EquivalenceSet:
    return EquivalenceSet(
        records=pick_equivalence_records(records, per_class),
        mode=mode,
        tolerance=tolerance,
        metric_fn=metric_fn,
    )


@dataclass
class SynthesisResult:
    best_expr: Expr | None
    best_mean: float | None  # natural metric orientation
    metric: MetricKind
    trace: SynthesisTrace
    threshold: ThresholdState
    per_class_means: dict[int, float] | None = None

    @property
    def best_expr_text(self) -> str | None:
        return None if self.best_expr is None else print_expr(self.best_expr)

    def summary(self) -> dict:
        return {
            "best_expr": self.best_expr_text,
            "metric": str(self.metric),
            "mean": self.best_mean,
            "per_class_means": self.per_class_means,
            "higher_is_better": self.metric.higher_is_better,
            "candidates_generated": self.trace.generated,
            "candidates_pruned": self.trace.pruned,
            "candidates_evaluated": self.trace.evaluated,
            "generations": self.trace.generations,
        }


def prepare(cfg: SynthesisConfig) -> tuple[Dataset, Backend | None]:
    """Load dataset and backend, failing fast on capability/config problems."""
    ds = load_dataset(cfg.dataset)
    check_capabilities(cfg.metric, ds)
    backend = None
    if cfg.metric.needs_backend:
        bcfg = cfg.backend
        if bcfg is None:
            if ds.stub_model_path is None:
                raise ConfigError(
                    "metric needs a backend and the dataset has no stub model",
                    field="backend",
                )
            bcfg = BackendConfig(kind="stub", path=str(ds.stub_model_path))
        backend = load_backend(bcfg, expect_dims=ds.image_dims, expect_classes=len(ds.classes))
    return ds, backend


def run_synthesis(
    cfg: SynthesisConfig,
    ds: Dataset | None = None,
    backend: Backend | None = None,
    records: tuple[ImageRecord, ...] | None = None,
) -> SynthesisResult:
    """Wire the enumerator to the tiered oracle and search until the budget ends."""
    if ds is None:
        ds, backend = prepare(cfg)
    recs = records if records is not None else ds.records
    if not recs:
        raise ConfigError("dataset selection is empty", field="dataset")
    sizes = resolve_tier_sizes(cfg.tier_sizes, len(recs))
    tier_cfg = TierConfig(
        subset_sizes=sizes, sampling_seed=cfg.tier_seed, stratified_by_class=cfg.stratified
    )
    order = build_tier_order(recs, tier_cfg)
    evaluator = TieredEvaluator(cfg.metric, order, sizes, backend)

    eq_records = pick_equivalence_records(recs, cfg.equivalence_per_class)
    metric_fn = None
    if cfg.equivalence_mode == "metric":
        def metric_fn(e):  # noqa: ANN001
            vals = [image_score(cfg.metric, as_weight_fn(e), r, backend) for r in eq_records]
            return float(np.mean(vals))

    eq = EquivalenceSet(
        records=eq_records,
        mode=cfg.equivalence_mode,
        tolerance=cfg.equivalence_tolerance,
        metric_fn=metric_fn,
    )
    trace = bottom_up_search(
        cfg.grammar,
        evaluator,
        eq,
        cfg.budget_seconds,
        max_candidates=cfg.max_candidates,
        workers=1 if cfg.deterministic else cfg.workers,
        deterministic=cfg.deterministic,
    )
    state = evaluator.state
    best_mean = None if state.best_expr is None else evaluator.orient * state.lambda_mean
    per_class: dict[int, float] | None = None
    if state.best_expr is not None:
        groups: dict[int, list[float]] = {}
        for rec in recs:
            groups.setdefault(rec.predicted_class, []).append(
                evaluator.orient * state.lambda_per_image[rec.image_id]
            )
        per_class = {c: float(np.mean(vals)) for c, vals in sorted(groups.items())}
    return SynthesisResult(
        best_expr=state.best_expr,
        best_mean=best_mean,
        metric=cfg.metric,
        trace=trace,
        threshold=state,
        per_class_means=per_class,
    )


@dataclass
class ClasswiseBranch:
    class_index: int
    expr: Expr
    mean: float | None  # natural orientation; None for defaulted branches
    n_images: int
    defaulted: bool
    result: SynthesisResult | None


@dataclass
class GuardedResult:
    guard_expr: Guard
    branches: list[ClasswiseBranch]
    overall_mean: float
    flags: list[str]

    def summary(self) -> dict:
        return {
            "best_expr": print_expr(self.guard_expr),
            "overall_mean": self.overall_mean,
            "per_class_means": {
                b.class_index: b.mean for b in self.branches
            },
            "flags": self.flags,
        }


def run_classwise(
    cfg: SynthesisConfig, ds: Dataset | None = None, backend: Backend | None = None
) -> GuardedResult:
    """One synthesis per predicted class with budget/|C| each; winners are
    combined into a guard expression dispatched on the model's top-1 class."""
    if ds is None:
        ds, backend = prepare(cfg)
    n_classes = len(ds.classes)
    partitions: dict[int, list[ImageRecord]] = {c: [] for c in range(n_classes)}
    for rec in ds.records:
        partitions[rec.predicted_class].append(rec)
    per_class_budget = cfg.budget_seconds / n_classes
    branches: list[ClasswiseBranch] = []
    flags: list[str] = []
    for cls in range(n_classes):
        recs = tuple(partitions[cls])
        if not recs:
            flags.append(f"class {cls}: empty partition, defaulting to Grads")
            branches.append(
                ClasswiseBranch(cls, Terminal(TerminalKind.GRADS), None, 0, True, None)
            )
            continue
        sub_cfg = replace(cfg, budget_seconds=per_class_budget, classwise=False)
        result = run_synthesis(sub_cfg, ds=ds, backend=backend, records=recs)
        if result.best_expr is None:
            flags.append(f"class {cls}: no acceptance within budget, defaulting to Grads")
            branches.append(
                ClasswiseBranch(cls, Terminal(TerminalKind.GRADS), None, len(recs), True, result)
            )
            continue
        branches.append(
            ClasswiseBranch(cls, result.best_expr, result.best_mean, len(recs), False, result)
        )
    guard = Guard(tuple((b.class_index, b.expr) for b in branches))
    weighted = [(b.mean, b.n_images) for b in branches if b.mean is not None and b.n_images > 0]
    total = sum(n for _, n in weighted)
    overall = float(sum(m * n for m, n in weighted) / total) if total else float("nan")
    return GuardedResult(guard_expr=guard, branches=branches, overall_mean=overall, flags=flags)


# --- trace audit ----------------------------------------------------------------


def audit_trace(path_or_entries, n_tiers: int) -> list[str]:
    """Structural audit of a trace: monotone sequence numbers, strictly
    increasing thresholds across acceptances, per-candidate tier soundness."""
    if isinstance(path_or_entries, (str, Path)):
        entries = [json.loads(line) for line in Path(path_or_entries).read_text().splitlines()]
    else:
        entries = path_or_entries
    violations: list[str] = []
    last_threshold: float | None = None
    for i, ent in enumerate(entries):
        if ent["seq"] != i:
            violations.append(f"entry {i}: seq {ent['seq']} not monotone")
        if len(ent["scores_per_tier"]) != ent["tier_reached"]:
            violations.append(
                f"entry {i}: {len(ent['scores_per_tier'])} tier scores for tier_reached "
                f"{ent['tier_reached']} (evaluation past a discard)"
            )
        if ent["tier_reached"] > n_tiers:
            violations.append(f"entry {i}: tier_reached {ent['tier_reached']} exceeds {n_tiers}")
        if ent["accepted"]:
            if ent["tier_reached"] != n_tiers:
                violations.append(
                    f"entry {i}: accepted without evaluating the full set "
                    f"(tier {ent['tier_reached']} of {n_tiers})"
                )
            thr = ent["new_threshold"]
            if thr is None:
                violations.append(f"entry {i}: accepted without a new threshold")
            elif last_threshold is not None and thr <= last_threshold:
                violations.append(
                    f"entry {i}: threshold {thr} does not improve on {last_threshold}"
                )
            else:
                last_threshold = thr
        elif ent.get("new_threshold") is not None:
            violations.append(f"entry {i}: threshold update without acceptance")
    return violations
