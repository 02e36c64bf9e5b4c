"""Bottom-up streaming candidate generation with observational-equivalence pruning.

Each generation expands the accumulated pool through every enabled rule and
yields candidates one by one; a candidate enters the pool only if its
fingerprint on the equivalence subset is new. Duplicates regenerated by later
generations are pruned by the same digest set.
"""
from __future__ import annotations

import hashlib
import json
import threading
import time
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sycam.errors import ConfigError, SycamError
from sycam.expr import Add, Expr, Mul, Relu, Terminal, TerminalKind, TwoPlus, eval_weights, print_expr
from sycam.tensor_io import ImageRecord

UNARY_RULES = ("relu",)
BINARY_RULES = ("add", "twoplus", "mul")

_UNARY_BUILDERS = {"relu": Relu}
_BINARY_BUILDERS = {"add": Add, "twoplus": TwoPlus, "mul": Mul}

G1_TERMINALS = (
    TerminalKind.GRADS,
    TerminalKind.TOP5,
    TerminalKind.TOP10,
    TerminalKind.TOP20,
    TerminalKind.TOP50,
)
G2_TERMINALS = G1_TERMINALS + (TerminalKind.CIC, TerminalKind.ABL)


@dataclass(frozen=True)
class GrammarConfig:
    terminals: tuple[TerminalKind, ...] = G2_TERMINALS
    unary_rules: tuple[str, ...] = UNARY_RULES
    binary_rules: tuple[str, ...] = BINARY_RULES

    def __post_init__(self) -> None:
        if not self.terminals:
            raise ConfigError("at least one terminal must be enabled", field="grammar.terminals")
        for r in self.unary_rules:
            if r not in _UNARY_BUILDERS:
                raise ConfigError(f"unknown unary rule {r!r}", field="grammar.unary_rules")
        for r in self.binary_rules:
            if r not in _BINARY_BUILDERS:
                raise ConfigError(f"unknown binary rule {r!r}", field="grammar.binary_rules")

    @classmethod
    def named(cls, name: str) -> "GrammarConfig":
        key = name.upper()
        if key == "G1":
            return cls(terminals=G1_TERMINALS)
        if key in ("G2", "FULL"):
            return cls(terminals=G2_TERMINALS)
        raise ConfigError(f"unknown grammar {name!r} (expected G1 or G2)", field="grammar")


def expand_stream(pool: Sequence[Expr], g: GrammarConfig) -> Iterator[Expr]:
    """Yield one generation of candidates: every unary rule over the pool, then
    every binary rule over the ordered cross product pool x pool."""
    for rule in g.unary_rules:
        build = _UNARY_BUILDERS[rule]
        for e in pool:
            yield build(e)
    for rule in g.binary_rules:
        build = _BINARY_BUILDERS[rule]
        for e1 in pool:
            for e2 in pool:
                yield build(e1, e2)


@dataclass
class EquivalenceSet:
    """Probe set for observational equivalence.

    ``map`` mode digests the quantized weight vectors on the probe records
    (sound for any metric); ``metric`` mode digests the metric value itself,
    which is the weaker classical notion.
    """

    records: tuple[ImageRecord, ...]
    mode: str = "map"  # "map" | "metric"
    tolerance: float = 1e-6
    metric_fn: Callable[[Expr], float] | None = None

    def __post_init__(self) -> None:
        if not self.records:
            raise ConfigError("equivalence set must be non-empty", field="equivalence.records")
        if self.mode not in ("map", "metric"):
            raise ConfigError(f"unknown equivalence mode {self.mode!r}", field="equivalence.mode")
        if self.mode == "metric" and self.metric_fn is None:
            raise ConfigError("metric mode needs a metric_fn", field="equivalence.metric_fn")


def quantize(values: np.ndarray, tolerance: float) -> np.ndarray:
    """Relative quantization: round(v / (tol * max(1, max|v|))) as int64.

    The scale is shared by the whole vector so magnitudes stay comparable.
    """
    v = np.asarray(values, dtype=np.float64)
    scale = tolerance * max(1.0, float(np.max(np.abs(v))) if v.size else 1.0)
    return np.round(v / scale).astype(np.int64)


def fingerprint(e: Expr, eq: EquivalenceSet) -> str:
    """Hex digest of the expression's observable behavior on the probe set."""
    h = hashlib.blake2b(digest_size=16)
    if eq.mode == "map":
        for rec in eq.records:
            wv = eval_weights(e, rec)
            if not np.isfinite(wv).all():
                raise SycamError("non-finite weight vector")
            h.update(quantize(wv, eq.tolerance).tobytes())
            h.update(b";")
    else:
        val = float(eq.metric_fn(e))  # type: ignore[misc]
        h.update(quantize(np.array([val]), eq.tolerance).tobytes())
    return h.hexdigest()


def elim_equiv(seen: set[str], e: Expr, eq: EquivalenceSet) -> bool:
    """True to keep (digest inserted), False to discard as already seen."""
    fp = fingerprint(e, eq)
    if fp in seen:
        return False
    seen.add(fp)
    return True


@dataclass
class TraceEntry:
    seq: int
    expr_text: str
    fingerprint_hex: str
    tier_reached: int
    scores_per_tier: list[float]
    accepted: bool
    new_threshold: float | None
    wall_ms: int
    error: str | None = None
    relaxed: bool = False

    def to_json(self) -> str:
        obj = {
            "seq": self.seq,
            "expr_text": self.expr_text,
            "fingerprint_hex": self.fingerprint_hex,
            "tier_reached": self.tier_reached,
            "scores_per_tier": self.scores_per_tier,
            "accepted": self.accepted,
            "new_threshold": self.new_threshold,
            "wall_ms": self.wall_ms,
        }
        if self.error is not None:
            obj["error"] = self.error
        if self.relaxed:
            obj["relaxed"] = True
        return json.dumps(obj)


@dataclass
class SynthesisTrace:
    entries: list[TraceEntry] = field(default_factory=list)
    best_expr: Expr | None = None
    best_mean: float | None = None
    generated: int = 0
    pruned: int = 0
    evaluated: int = 0
    generations: int = 0

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as f:
            for entry in self.entries:
                f.write(entry.to_json() + "\n")


@dataclass
class EvalOutcome:
    """Result of the correctness oracle for one candidate."""

    accepted: bool
    tier_reached: int
    scores_per_tier: list[float]
    new_threshold: float | None = None
    mean: float | None = None
    error: str | None = None
    relaxed: bool = False


class _Budget:
    def __init__(self, seconds: float, max_candidates: int | None):
        self.t0 = time.monotonic()
        self.seconds = seconds
        self.max_candidates = max_candidates
        self.count = 0

    def exhausted(self) -> bool:
        if self.max_candidates is not None and self.count >= self.max_candidates:
            return True
        return time.monotonic() - self.t0 >= self.seconds

    def elapsed_ms(self) -> int:
        return int((time.monotonic() - self.t0) * 1000)


def bottom_up_search(
    g: GrammarConfig,
    evaluator: Callable[[Expr], EvalOutcome],
    eq: EquivalenceSet,
    budget_seconds: float,
    *,
    max_candidates: int | None = None,
    workers: int = 1,
    deterministic: bool = False,
) -> SynthesisTrace:
    """Run the bottom-up search until the budget is exhausted (or the pool
    stops growing, at which point no new candidate can ever appear).

    The evaluator is called on every pruning survivor; its failures are
    recorded per candidate and never abort the search. All accepted
    candidates are recorded and the last one (highest threshold) is best.
    """
    if budget_seconds <= 0:
        raise ConfigError("budget must be > 0", field="budget_seconds")
    budget = _Budget(budget_seconds, max_candidates)
    trace = SynthesisTrace()
    seen: set[str] = set()
    pool: list[Expr] = []
    lock = threading.Lock()

    def process(e: Expr, fp: str) -> None:
        t_start = budget.elapsed_ms()
        try:
            outcome = evaluator(e)
        except SycamError as exc:
            outcome = EvalOutcome(accepted=False, tier_reached=0, scores_per_tier=[], error=str(exc))
        with lock:
            trace.evaluated += 1
            entry = TraceEntry(
                seq=len(trace.entries),
                expr_text=print_expr(e),
                fingerprint_hex=fp,
                tier_reached=outcome.tier_reached,
                scores_per_tier=outcome.scores_per_tier,
                accepted=outcome.accepted,
                new_threshold=outcome.new_threshold,
                wall_ms=0 if deterministic else max(0, budget.elapsed_ms() - t_start),
                error=outcome.error,
                relaxed=outcome.relaxed,
            )
            trace.entries.append(entry)
            if outcome.accepted:
                trace.best_expr = e
                trace.best_mean = outcome.mean

    def admit(e: Expr) -> str | None:
        """Fingerprint and dedupe; returns the digest for fresh candidates."""
        fp = fingerprint(e, eq)
        if fp in seen:
            return None
        seen.add(fp)
        return fp

    def record_failure(e: Expr, exc: SycamError) -> None:
        trace.entries.append(
            TraceEntry(
                seq=len(trace.entries),
                expr_text=print_expr(e),
                fingerprint_hex="",
                tier_reached=0,
                scores_per_tier=[],
                accepted=False,
                new_threshold=None,
                wall_ms=0,
                error=str(exc),
            )
        )

    def run_generation(candidates: Iterator[Expr]) -> list[Expr]:
        admitted: list[Expr] = []
        if workers <= 1:
            for e in candidates:
                if budget.exhausted():
                    break
                budget.count += 1
                trace.generated += 1
                try:
                    fp = admit(e)
                except SycamError as exc:
                    record_failure(e, exc)
                    continue
                if fp is None:
                    trace.pruned += 1
                    continue
                admitted.append(e)
                process(e, fp)
            return admitted

        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool_exec:
            futures = []
            for e in candidates:
                with lock:
                    if budget.exhausted():
                        break
                    budget.count += 1
                    trace.generated += 1
                    try:
                        fp = admit(e)
                    except SycamError as exc:
                        record_failure(e, exc)
                        continue
                    if fp is None:
                        trace.pruned += 1
                        continue
                    admitted.append(e)
                futures.append(pool_exec.submit(process, e, fp))
            for fut in futures:
                fut.result()
        return admitted

    candidates: Iterator[Expr] = iter(Terminal(k) for k in g.terminals)
    while not budget.exhausted():
        admitted = run_generation(candidates)
        trace.generations += 1
        if budget.exhausted():
            break
        if not admitted:
            break  # pool fixpoint: every future generation would repeat itself
        pool.extend(admitted)
        candidates = expand_stream(pool, g)
    return trace
