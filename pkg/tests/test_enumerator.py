from __future__ import annotations

import numpy as np
import pytest

import oracles
from planted import make_planted_dataset
from sycam.enumerator import (
    EquivalenceSet,
    EvalOutcome,
    G1_TERMINALS,
    G2_TERMINALS,
    GrammarConfig,
    bottom_up_search,
    elim_equiv,
    expand_stream,
    fingerprint,
    quantize,
)
from sycam.expr import (
    Add,
    Relu,
    Terminal,
    TerminalKind,
    eval_weights,
    mentions,
    print_expr,
)
from sycam.metrics import MetricKind, evaluate_metric
from sycam.oracle import pick_equivalence_records
from sycam.tensor_io import load_dataset

GRADS = Terminal(TerminalKind.GRADS)
CIC = Terminal(TerminalKind.CIC)
ABL = Terminal(TerminalKind.ABL)


class TestExpand:
    def test_full_grammar_first_generation_154(self):
        pool = [Terminal(k) for k in G2_TERMINALS]
        out = list(expand_stream(pool, GrammarConfig()))
        assert len(out) == 7 + 3 * 49 == 154

    def test_g1_first_generation_80(self):
        pool = [Terminal(k) for k in G1_TERMINALS]
        out = list(expand_stream(pool, GrammarConfig.named("G1")))
        assert len(out) == 5 + 3 * 25 == 80

    def test_relu_only_single_candidate(self):
        g = GrammarConfig(unary_rules=("relu",), binary_rules=())
        out = list(expand_stream([GRADS], g))
        assert out == [Relu(GRADS)]

    def test_add_only_cross_product_order(self):
        g = GrammarConfig(unary_rules=(), binary_rules=("add",))
        out = list(expand_stream([GRADS, ABL], g))
        assert out == [Add(GRADS, GRADS), Add(GRADS, ABL), Add(ABL, GRADS), Add(ABL, ABL)]

    def test_yield_count_law(self, rng):
        pool = [GRADS, ABL, CIC]
        for unary in ((), ("relu",)):
            for binary in ((), ("add",), ("add", "twoplus", "mul")):
                if not unary and not binary:
                    continue
                g = GrammarConfig(unary_rules=unary, binary_rules=binary)
                got = len(list(expand_stream(pool, g)))
                assert got == len(unary) * len(pool) + len(binary) * len(pool) ** 2


class TestFingerprint:
    def _eq(self, ds, mode="map", metric_fn=None):
        return EquivalenceSet(
            records=pick_equivalence_records(ds.records, 1),
            mode=mode,
            metric_fn=metric_fn,
        )

    def test_commutative_add_equal(self, small_ds):
        eq = self._eq(small_ds)
        assert fingerprint(Add(GRADS, CIC), eq) == fingerprint(Add(CIC, GRADS), eq)

    def test_relu_idempotent_equal(self, small_ds):
        eq = self._eq(small_ds)
        assert fingerprint(Relu(Relu(GRADS)), eq) == fingerprint(Relu(GRADS), eq)

    def test_scaling_distinct_in_map_mode(self, small_ds):
        eq = self._eq(small_ds)
        assert fingerprint(GRADS, eq) != fingerprint(Add(GRADS, GRADS), eq)

    def test_scaling_equal_in_metric_mode_under_deletion(self, small_ds, small_backend):
        kind = MetricKind("deletion", 4)
        records = pick_equivalence_records(small_ds.records, 1)

        def metric_fn(e):
            score = evaluate_metric(kind, e, small_ds, small_backend, records=records)
            return score.value

        eq = self._eq(small_ds, mode="metric", metric_fn=metric_fn)
        assert fingerprint(GRADS, eq) == fingerprint(Add(GRADS, GRADS), eq)

    def test_elim_equiv_keep_then_discard(self, small_ds):
        eq = self._eq(small_ds)
        seen: set[str] = set()
        assert elim_equiv(seen, GRADS, eq) is True
        assert elim_equiv(seen, Add(GRADS, GRADS), eq) is True
        # Syntactically distinct, same weight vectors:
        assert elim_equiv(seen, Add(CIC, GRADS), eq) is True
        assert elim_equiv(seen, Add(GRADS, CIC), eq) is False

    def test_pruning_matches_pairwise_oracle(self, small_ds):
        eq = self._eq(small_ds)
        pool = [Terminal(k) for k in G2_TERMINALS]
        candidates = list(expand_stream(pool, GrammarConfig()))
        assert len(candidates) == 154
        seen: set[str] = set()
        kept = sum(1 for e in candidates if elim_equiv(seen, e, eq))
        tuples = []
        for e in candidates:
            vecs = tuple(
                oracles.quantize_tuple(eval_weights(e, rec), 1e-6) for rec in eq.records
            )
            tuples.append(vecs)
        assert kept == oracles.pairwise_distinct_count(tuples)

    def test_quantization_scale_shared_across_vector(self):
        a = quantize(np.array([1.0, 2.0]), 1e-6)
        b = quantize(np.array([1.0, 5.0]), 1e-6)
        assert a.tolist() != b.tolist()

    def test_pruning_soundness_shared_fingerprint_same_metrics(self, small_ds, small_backend):
        eq = self._eq(small_ds)
        pool = [Terminal(k) for k in G2_TERMINALS]
        groups: dict[str, list] = {}
        for e in list(pool) + list(expand_stream(pool, GrammarConfig())):
            groups.setdefault(fingerprint(e, eq), []).append(e)
        kinds = [
            MetricKind("deletion", 4),
            MetricKind("insertion", 4),
            MetricKind("avgdrop"),
            MetricKind("mgt"),
            MetricKind("sch"),
        ]
        checked = 0
        for members in groups.values():
            if len(members) < 2:
                continue
            for kind in kinds:
                backend = small_backend if kind.needs_backend else None
                vals = [
                    evaluate_metric(kind, e, small_ds, backend, records=eq.records).value
                    for e in members[:3]
                ]
                assert max(vals) - min(vals) <= 1e-6, (kind, [print_expr(m) for m in members[:3]])
                checked += 1
        assert checked > 0


class GreedyEvaluator:
    """Accept iff strictly better than the best seen; single-tier."""

    def __init__(self, score_fn):
        self.score_fn = score_fn
        self.best: float | None = None

    def __call__(self, e) -> EvalOutcome:
        s = float(self.score_fn(e))
        if self.best is None or s > self.best:
            self.best = s
            return EvalOutcome(
                accepted=True, tier_reached=1, scores_per_tier=[s], new_threshold=s, mean=s
            )
        return EvalOutcome(accepted=False, tier_reached=1, scores_per_tier=[s])


@pytest.fixture(scope="module")
def planted_ds(tmp_path_factory):
    # K = 64 > 50 so every top_n terminal stays observationally distinct.
    out = tmp_path_factory.mktemp("planted")
    manifest = make_planted_dataset(
        out,
        planted={0: "abl", 1: "abl"},
        images_per_class=6,
        w=8,
        h=8,
        height=16,
        width=16,
        mask_pixels=40,
        seed=3,
    )
    return load_dataset(manifest)


def _mgt_score_fn(ds):
    def fn(e):
        return evaluate_metric(MetricKind("mgt"), e, ds).value

    return fn


class TestBottomUpSearch:
    def test_planted_abl_wins_among_terminals(self, planted_ds):
        g = GrammarConfig(unary_rules=(), binary_rules=())
        eq = EquivalenceSet(records=pick_equivalence_records(planted_ds.records, 1))
        evaluator = GreedyEvaluator(_mgt_score_fn(planted_ds))
        trace = bottom_up_search(g, evaluator, eq, budget_seconds=60)
        assert len(trace.entries) == 7
        assert trace.best_expr == ABL
        assert trace.best_mean == pytest.approx(1.0)

    def test_terminal_only_budget_returns_argmax_terminal(self, planted_ds):
        eq = EquivalenceSet(records=pick_equivalence_records(planted_ds.records, 1))
        score_fn = _mgt_score_fn(planted_ds)
        evaluator = GreedyEvaluator(score_fn)
        trace = bottom_up_search(
            GrammarConfig(), evaluator, eq, budget_seconds=60, max_candidates=7
        )
        assert len(trace.entries) == 7
        by_hand = max(
            (Terminal(k) for k in G2_TERMINALS), key=lambda t: score_fn(t)
        )
        assert trace.best_expr == by_hand == ABL

    def test_g1_never_mentions_cic_or_abl(self, planted_ds):
        eq = EquivalenceSet(records=pick_equivalence_records(planted_ds.records, 1))
        evaluator = GreedyEvaluator(_mgt_score_fn(planted_ds))
        trace = bottom_up_search(
            GrammarConfig.named("G1"), evaluator, eq, budget_seconds=60, max_candidates=120
        )
        for entry in trace.entries:
            assert "CICScores" not in entry.expr_text
            assert "AblScores" not in entry.expr_text
        assert not mentions(trace.best_expr, TerminalKind.CIC)
        assert not mentions(trace.best_expr, TerminalKind.ABL)

    def test_deterministic_trace(self, planted_ds):
        def run():
            eq = EquivalenceSet(records=pick_equivalence_records(planted_ds.records, 1))
            evaluator = GreedyEvaluator(_mgt_score_fn(planted_ds))
            return bottom_up_search(
                GrammarConfig(),
                evaluator,
                eq,
                budget_seconds=60,
                max_candidates=100,
                deterministic=True,
            )

        t1, t2 = run(), run()
        assert [e.to_json() for e in t1.entries] == [e.to_json() for e in t2.entries]

    def test_completeness_depth2_up_to_pruning(self, planted_ds):
        g = GrammarConfig(
            terminals=(TerminalKind.GRADS, TerminalKind.ABL),
            unary_rules=("relu",),
            binary_rules=("add",),
        )
        eq = EquivalenceSet(records=pick_equivalence_records(planted_ds.records, 1))
        evaluator = GreedyEvaluator(_mgt_score_fn(planted_ds))
        trace = bottom_up_search(g, evaluator, eq, budget_seconds=60, max_candidates=500)
        evaluated_fps = {e.fingerprint_hex for e in trace.entries}
        all_depth2 = [GRADS, ABL, Relu(GRADS), Relu(ABL)] + [
            Add(a, b) for a in (GRADS, ABL) for b in (GRADS, ABL)
        ]
        for e in all_depth2:
            assert fingerprint(e, eq) in evaluated_fps, print_expr(e)

    def test_pool_fixpoint_terminates_early(self, planted_ds):
        g = GrammarConfig(
            terminals=(TerminalKind.GRADS,), unary_rules=("relu",), binary_rules=()
        )
        eq = EquivalenceSet(records=pick_equivalence_records(planted_ds.records, 1))
        evaluator = GreedyEvaluator(_mgt_score_fn(planted_ds))
        trace = bottom_up_search(g, evaluator, eq, budget_seconds=600, max_candidates=10_000)
        # Grads, ReLU(Grads), then ReLU(ReLU(Grads)) etc. all prune away.
        assert trace.evaluated <= 3
        assert trace.generated < 20

    def test_evaluator_failures_are_recorded_not_fatal(self, planted_ds):
        from sycam.errors import SycamError

        eq = EquivalenceSet(records=pick_equivalence_records(planted_ds.records, 1))
        calls = {"n": 0}

        def flaky(e):
            calls["n"] += 1
            if calls["n"] == 2:
                raise SycamError("boom")
            return EvalOutcome(accepted=False, tier_reached=1, scores_per_tier=[0.0])

        trace = bottom_up_search(
            GrammarConfig(), flaky, eq, budget_seconds=60, max_candidates=7
        )
        errors = [e for e in trace.entries if e.error]
        assert len(errors) == 1 and "boom" in errors[0].error
        assert len(trace.entries) == 7
