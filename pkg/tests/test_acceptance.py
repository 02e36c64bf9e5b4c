"""Acceptance suite: one test per criterion, each printing a pass line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines as they stream.
"""
from __future__ import annotations

import json
import time

import numpy as np
import pytest

import oracles
from conftest import random_expr
from planted import make_planted_dataset, rankings_identical
from sycam.backend import StubBackend
from sycam.cli import main
from sycam.enumerator import EquivalenceSet, G1_TERMINALS, G2_TERMINALS, GrammarConfig, expand_stream, fingerprint
from sycam.expr import Terminal, TerminalKind, eval_weights, parse_expr, print_expr
from sycam.metrics import MetricKind, evaluate_metric
from sycam.oracle import (
    SynthesisConfig,
    audit_trace,
    pick_equivalence_records,
    run_classwise,
    run_synthesis,
)
from sycam.tensor_io import load_dataset, load_tensor, make_synthetic_dataset, save_tensor

ABL = Terminal(TerminalKind.ABL)
CIC = Terminal(TerminalKind.CIC)

_RESULTS: list[str] = []
_AUDIT_POOL: list[tuple[str, list[dict], int]] = []  # (label, entries, n_tiers)


def _report(line: str) -> None:
    _RESULTS.append(line)
    print(f"\nACCEPTANCE {line}")


@pytest.fixture(scope="module")
def accept_ds(tmp_path_factory):
    """Criterion-1 dataset: stub model, 2 classes, 20 images, K=4, 3x3 grid."""
    out = tmp_path_factory.mktemp("accept_ds")
    manifest = make_synthetic_dataset(
        out, n_classes=2, images_per_class=10, K=4, w=3, h=3, ch=1, H=12, W=12, seed=42
    )
    ds = load_dataset(manifest)
    return ds, StubBackend(ds.stub_model_path)


@pytest.fixture(scope="module")
def planted_abl(tmp_path_factory):
    out = tmp_path_factory.mktemp("accept_planted")
    manifest = make_planted_dataset(
        out, planted={0: "abl", 1: "abl"}, images_per_class=8,
        w=8, h=8, height=16, width=16, mask_pixels=40, seed=77,
    )
    return load_dataset(manifest)


@pytest.fixture(scope="module")
def planted_two(tmp_path_factory):
    out = tmp_path_factory.mktemp("accept_two")
    manifest = make_planted_dataset(
        out, planted={0: "abl", 1: "cic"}, images_per_class=10,
        w=8, h=8, height=16, width=16, mask_pixels=40, seed=78,
    )
    return load_dataset(manifest)


def _stub_parts(ds):
    spec = json.loads(ds.stub_model_path.read_text())
    root = ds.stub_model_path.parent
    return (
        load_tensor(root / spec["weights"]).astype(np.float64),
        float(spec["temperature"]),
    )


def test_criterion_1_metric_brute_force_equivalence(accept_ds):
    ds, backend = accept_ds
    weights, tau = _stub_parts(ds)
    t0 = time.monotonic()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(10):
        e = random_expr(rng, 4)
        for insertion in (False, True):
            kind = MetricKind("insertion" if insertion else "deletion", 9)
            got = evaluate_metric(kind, e, ds, backend)
            per_image = []
            for rec in ds.records:
                grid = np.zeros((3, 3))
                wv = eval_weights(e, rec)
                for k in range(4):
                    grid += wv[k] * rec.feature_maps[k].astype(np.float64)
                per_image.append(
                    oracles.brute_force_perturbation_metric(
                        rec.image.astype(np.float64),
                        rec.blurred_image.astype(np.float64),
                        grid,
                        lambda img: oracles.stub_classify(weights, tau, img),
                        rec.predicted_class,
                        p=9,
                        insertion=insertion,
                    )
                )
            expected = float(np.mean(per_image))
            worst = max(worst, abs(got.value - expected))
            assert abs(got.value - expected) <= 1e-6, (print_expr(e), kind.name)
    elapsed = time.monotonic() - t0
    assert elapsed < 60.0
    _report(
        f"1: PASS: deletion/insertion vs brute force, 10 random exprs, "
        f"max |diff| {worst:.2e} <= 1e-6, {elapsed:.1f}s < 60s"
    )


def test_criterion_2_scale_invariance(accept_ds):
    ds, backend = accept_ds
    t0 = time.monotonic()
    rng = np.random.default_rng(513)
    rank_kinds = [MetricKind("deletion", 9), MetricKind("insertion", 9), MetricKind("mgt")]
    value_kinds = [MetricKind("avgdrop"), MetricKind("sch")]
    worst_value = 0.0
    for _ in range(20):
        e = random_expr(rng, 3)
        base_fn = lambda r: eval_weights(e, r)  # noqa: E731
        base = {
            str(k): evaluate_metric(k, base_fn, ds, backend if k.needs_backend else None).value
            for k in rank_kinds + value_kinds
        }
        for c in (0.5, 3.0, 100.0):
            scaled_fn = lambda r, c=c: c * eval_weights(e, r)  # noqa: E731
            for k in rank_kinds:
                v = evaluate_metric(k, scaled_fn, ds, backend if k.needs_backend else None).value
                assert v == base[str(k)], (print_expr(e), str(k), c)
            for k in value_kinds:
                v = evaluate_metric(k, scaled_fn, ds, backend if k.needs_backend else None).value
                worst_value = max(worst_value, abs(v - base[str(k)]))
                assert abs(v - base[str(k)]) <= 1e-9, (print_expr(e), str(k), c)
    elapsed = time.monotonic() - t0
    assert elapsed < 60.0
    _report(
        f"2: PASS: 20 exprs x c in {{0.5,3,100}}: rank metrics exact, "
        f"avgdrop/sch max |diff| {worst_value:.2e} <= 1e-9, {elapsed:.1f}s < 60s"
    )


def test_criterion_3_enumeration_law(accept_ds):
    ds, _ = accept_ds
    full = list(expand_stream([Terminal(k) for k in G2_TERMINALS], GrammarConfig()))
    g1 = list(expand_stream([Terminal(k) for k in G1_TERMINALS], GrammarConfig.named("G1")))
    assert len(full) == 154
    assert len(g1) == 80
    eq = EquivalenceSet(records=pick_equivalence_records(ds.records, 1))
    seen: set[str] = set()
    kept = 0
    tuples = []
    for e in full:
        fp = fingerprint(e, eq)
        if fp not in seen:
            seen.add(fp)
            kept += 1
        tuples.append(
            tuple(oracles.quantize_tuple(eval_weights(e, rec), 1e-6) for rec in eq.records)
        )
    oracle_count = oracles.pairwise_distinct_count(tuples)
    assert kept == oracle_count
    _report(
        f"3: PASS: first generation 154 (G2) / 80 (G1); pruning kept {kept} "
        f"== pairwise-oracle count {oracle_count}"
    )


def test_criterion_4_equivalence_soundness(accept_ds):
    ds, backend = accept_ds
    eq = EquivalenceSet(records=pick_equivalence_records(ds.records, 1))
    pool = [Terminal(k) for k in G2_TERMINALS]
    groups: dict[str, list] = {}
    for e in pool + list(expand_stream(pool, GrammarConfig())):
        groups.setdefault(fingerprint(e, eq), []).append(e)
    kinds = [
        MetricKind("deletion", 9),
        MetricKind("insertion", 9),
        MetricKind("avgdrop"),
        MetricKind("mgt"),
        MetricKind("sch"),
    ]
    pairs = 0
    worst = 0.0
    for members in groups.values():
        if len(members) < 2:
            continue
        for kind in kinds:
            b = backend if kind.needs_backend else None
            vals = [
                evaluate_metric(kind, e, ds, b, records=eq.records).value for e in members
            ]
            spread = max(vals) - min(vals)
            worst = max(worst, spread)
            assert spread <= 1e-6, (str(kind), [print_expr(m) for m in members])
        pairs += len(members) - 1
    assert pairs > 0
    _report(
        f"4: PASS: depth-2 exhaustive: {pairs} pruned/kept pairs, all five metrics "
        f"agree on the equivalence subset (max spread {worst:.2e} <= 1e-6)"
    )


def _planted_config(manifest, tmp_path, grammar="G2", seed=0):
    cfg = {
        "dataset": str(manifest),
        "metric": {"kind": "mgt"},
        "grammar": grammar,
        "budget_seconds": 120,
        "max_candidates": 200,
        "deterministic": True,
        "tiers": {"sizes": [8], "seed": seed, "stratified": True},
        "workers": 1,
    }
    path = tmp_path / f"config_{grammar}_{seed}.json"
    path.write_text(json.dumps(cfg))
    return path


def test_criterion_5_planted_optimum_synthesis(planted_abl, tmp_path, capsys):
    cfg = _planted_config(planted_abl.root / "manifest.json", tmp_path)
    out1, out2 = tmp_path / "run1", tmp_path / "run2"
    t0 = time.monotonic()
    assert main(["synth", "--config", str(cfg), "--out-dir", str(out1)]) == 0
    elapsed = time.monotonic() - t0
    stdout = capsys.readouterr().out
    best_line = stdout.strip().splitlines()[-1]
    assert best_line.startswith("best: ")
    best = parse_expr(best_line.removeprefix("best: "))
    assert best == ABL or rankings_identical(planted_abl, best, ABL)
    assert main(["synth", "--config", str(cfg), "--out-dir", str(out2)]) == 0
    capsys.readouterr()
    assert (out1 / "trace.jsonl").read_bytes() == (out2 / "trace.jsonl").read_bytes()
    entries = [json.loads(l) for l in (out1 / "trace.jsonl").read_text().splitlines()]
    _AUDIT_POOL.append(("criterion5", entries, 2))
    _report(
        f"5: PASS: synth(mgt, 120s budget) returned {best_line.removeprefix('best: ')!r}; "
        f"deterministic across reruns ({elapsed:.1f}s)"
    )


def test_criterion_6_grammar_dominance(planted_abl):
    results = {}
    for grammar in ("G1", "G2"):
        cfg = SynthesisConfig(
            dataset=str(planted_abl.root / "manifest.json"),
            metric=MetricKind("mgt"),
            grammar=GrammarConfig.named(grammar),
            budget_seconds=120,
            max_candidates=200,
            deterministic=True,
            tier_sizes=(8,),
            tier_seed=0,
        )
        res = run_synthesis(cfg, ds=planted_abl, backend=None)
        results[grammar] = res
        _AUDIT_POOL.append(
            (f"criterion6_{grammar}", [json.loads(e.to_json()) for e in res.trace.entries], 2)
        )
    assert results["G2"].best_mean >= results["G1"].best_mean
    _report(
        f"6: PASS: G2 best mean {results['G2'].best_mean:.4f} >= "
        f"G1 best mean {results['G1'].best_mean:.4f} (single worker, same budget/seed)"
    )


def test_criterion_7_classwise_decomposition(planted_two):
    cfg = SynthesisConfig(
        dataset=str(planted_two.root / "manifest.json"),
        metric=MetricKind("mgt"),
        budget_seconds=120,
        max_candidates=200,
        deterministic=True,
        tier_sizes=(8,),
    )
    guarded = run_classwise(cfg, ds=planted_two, backend=None)
    assert guarded.guard_expr == parse_expr("guard{0: AblScores; 1: CICScores}")
    total = sum(b.n_images for b in guarded.branches)
    weighted = sum(b.mean * b.n_images for b in guarded.branches) / total
    assert abs(guarded.overall_mean - weighted) <= 1e-9
    for branch in guarded.branches:
        if branch.result is not None:
            _AUDIT_POOL.append(
                (
                    f"criterion7_class{branch.class_index}",
                    [json.loads(e.to_json()) for e in branch.result.trace.entries],
                    2,
                )
            )
    # Per-class means beat the single best enumerative expression's
    # class-restricted means.
    flat = run_synthesis(cfg, ds=planted_two, backend=None)
    for branch in guarded.branches:
        recs = tuple(r for r in planted_two.records if r.predicted_class == branch.class_index)
        restricted = evaluate_metric(
            MetricKind("mgt"), flat.best_expr, planted_two, records=recs
        ).value
        assert branch.mean >= restricted - 1e-12
    _AUDIT_POOL.append(
        ("criterion7_flat", [json.loads(e.to_json()) for e in flat.trace.entries], 2)
    )
    _report(
        "7: PASS: classwise returned guard{0: AblScores; 1: CICScores}; overall mean equals "
        "size-weighted branch means (<=1e-9); per-class means >= flat best's restricted means"
    )


def test_criterion_8_trace_audit():
    assert _AUDIT_POOL, "synthesis criteria must run before the audit"
    audited = 0
    for label, entries, n_tiers in _AUDIT_POOL:
        violations = audit_trace(entries, n_tiers)
        assert violations == [], (label, violations)
        thresholds = [e["new_threshold"] for e in entries if e["accepted"]]
        assert thresholds == sorted(thresholds), label
        audited += 1
    _report(
        f"8: PASS: {audited} traces audited: thresholds nondecreasing, "
        "no tier evaluated past a discard, acceptances on the full set only"
    )


def test_criterion_9_format_round_trips(accept_ds, tmp_path, capsys):
    ds, _ = accept_ds
    # Tensor save/load bit-exactness.
    rng = np.random.default_rng(99)
    for shape in [(512,), (3, 5, 7), (1,)]:
        t = rng.standard_normal(shape).astype(np.float32)
        save_tensor(t, tmp_path / "t.tns")
        back = load_tensor(tmp_path / "t.tns")
        assert back.tobytes() == t.tobytes()
    # Parse/print round trip over 1000 random ASTs.
    for i in range(1000):
        e = random_expr(np.random.default_rng(i), 5)
        assert parse_expr(print_expr(e)) == e
    # Identical seeds give byte-identical CSV and PNG artifacts.
    manifest = str(ds.root / "manifest.json")
    csvs = []
    for name in ("c1.csv", "c2.csv"):
        out = tmp_path / name
        assert main(["eval", "--expr", "ReLU(Grads)", "--dataset", manifest,
                     "--metric", "mgt", "--out", str(out)]) == 0
        csvs.append(out.read_bytes())
    assert csvs[0] == csvs[1]
    pngs = []
    for name in ("r1.png", "r2.png"):
        out = tmp_path / name
        assert main(["render", "--expr", "2*Grads + AblScores", "--dataset", manifest,
                     "--image-id", ds.records[0].image_id, "--out", str(out)]) == 0
        pngs.append(out.read_bytes())
    assert pngs[0] == pngs[1]
    capsys.readouterr()
    _report(
        "9: PASS: tensors bit-exact, 1000 AST parse/print round trips, "
        "byte-identical CSV/PNG artifacts (trace byte-identity in criterion 5)"
    )


def test_criterion_11_optional_integration_reported():
    _report(
        "11: SKIPPED (reported, not gated): requires a public pretrained ResNet50 "
        "checkpoint and >=200 Imagenette validation images, neither available in "
        "this offline environment; the `compare` command covers the mechanics"
    )


def test_zzz_summary():
    print("\n==== acceptance summary ====")
    for line in _RESULTS:
        print(f"ACCEPTANCE {line}")
    numbers = {line.split(":")[0] for line in _RESULTS}
    assert {"1", "2", "3", "4", "5", "6", "7", "8", "9", "11"} <= numbers
