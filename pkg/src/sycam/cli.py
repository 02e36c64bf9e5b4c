"""Command-line surface.

Subcommands: make-synthetic, synth, eval, render, compare.
Exit codes: 0 success, 1 runtime failure, 2 configuration error.
Every command is a thin shell over the library; numbers printed here are the
library's numbers, unrounded.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from sycam.errors import CapabilityError, ConfigError, ExprSyntaxError, SycamError
from sycam.expr import parse_expr, print_expr

BASELINES = {
    "GradCAM": "Grads",
    "GradCAM++": "ReLU(Grads)",
    "ScoreCAM": "CICScores",
    "AblationCAM": "AblScores",
}


def _metric_from_text(text: str):
    from sycam.metrics import MetricKind

    if ":" in text:
        name, p = text.split(":", 1)
        try:
            return MetricKind(name.strip(), int(p))
        except ValueError:
            raise ConfigError(f"bad perturbation limit in {text!r}", field="metric")
    return MetricKind(text.strip())


def _load_backend_for(ds, spec: str | None):
    from sycam.backend import BackendConfig, load_backend

    if spec is None or spec == "auto":
        if ds.stub_model_path is None:
            raise ConfigError(
                "dataset has no stub model; pass --backend", field="backend"
            )
        cfg = BackendConfig(kind="stub", path=str(ds.stub_model_path))
    else:
        path = Path(spec)
        if path.suffix == ".onnx":
            cfg = BackendConfig(kind="onnx", path=spec)
        elif spec.startswith("http://") or spec.startswith("https://"):
            cfg = BackendConfig(kind="remote", base_url=spec)
        else:
            cfg = BackendConfig.from_json(json.loads(path.read_text()))
    return load_backend(cfg, expect_dims=ds.image_dims, expect_classes=len(ds.classes))


def cmd_make_synthetic(args) -> int:
    from sycam.tensor_io import make_synthetic_dataset

    manifest = make_synthetic_dataset(
        args.out,
        n_classes=args.classes,
        images_per_class=args.per_class,
        K=args.channels,
        w=args.grid_w,
        h=args.grid_h,
        ch=args.image_ch,
        H=args.image_h,
        W=args.image_w,
        seed=args.seed,
    )
    print(f"manifest: {manifest}")
    return 0


def cmd_synth(args) -> int:
    from sycam.oracle import SynthesisConfig, prepare, run_classwise, run_synthesis

    config_path = Path(args.config)
    if not config_path.exists():
        raise ConfigError(f"config file not found: {config_path}", field="config")
    obj = json.loads(config_path.read_text())
    cfg = SynthesisConfig.from_json(obj, base_dir=config_path.parent)
    if args.workers is not None:
        cfg.workers = args.workers
    elif "workers" not in obj:
        cfg.workers = os.cpu_count() or 1
    if args.seed is not None:
        cfg.tier_seed = args.seed
    out_dir = Path(args.out_dir or obj.get("out_dir") or "sycam_out")
    out_dir.mkdir(parents=True, exist_ok=True)

    ds, backend = prepare(cfg)
    if cfg.classwise:
        guarded = run_classwise(cfg, ds=ds, backend=backend)
        for branch in guarded.branches:
            if branch.result is not None:
                branch.result.trace.write_jsonl(out_dir / f"trace_class_{branch.class_index}.jsonl")
        (out_dir / "summary.json").write_text(json.dumps(guarded.summary(), indent=2) + "\n")
        print(f"best: {print_expr(guarded.guard_expr)}")
        return 0
    result = run_synthesis(cfg, ds=ds, backend=backend)
    result.trace.write_jsonl(out_dir / "trace.jsonl")
    (out_dir / "summary.json").write_text(json.dumps(result.summary(), indent=2) + "\n")
    if result.best_expr is None:
        print("best: none (budget exhausted before any acceptance)")
        return 0
    print(f"best: {result.best_expr_text}")
    return 0


def cmd_eval(args) -> int:
    from sycam.metrics import evaluate_metric, write_csv
    from sycam.tensor_io import load_dataset

    expr = parse_expr(args.expr)
    kind = _metric_from_text(args.metric)
    ds = load_dataset(args.dataset)
    from sycam.metrics import check_capabilities

    check_capabilities(kind, ds)
    backend = _load_backend_for(ds, args.backend) if kind.needs_backend else None
    score = evaluate_metric(kind, expr, ds, backend)
    out = Path(args.out or "scores.csv")
    write_csv(out, kind, args.expr, score)
    print(f"csv: {out}")
    print(f"mean: {score.value!r}")
    return 0


def cmd_render(args) -> int:
    from sycam.render import render_heatmap
    from sycam.tensor_io import load_dataset

    expr = parse_expr(args.expr)
    ds = load_dataset(args.dataset)
    rec = ds.by_id(args.image_id)
    out = render_heatmap(expr, rec, args.out)
    print(f"png: {out}")
    return 0


def cmd_compare(args) -> int:
    from sycam.metrics import check_capabilities, evaluate_metric, write_csv
    from sycam.tensor_io import load_dataset

    ds = load_dataset(args.dataset)
    kinds = [_metric_from_text(m) for m in args.metrics.split(",")]
    for kind in kinds:
        check_capabilities(kind, ds)
    backend = None
    if any(k.needs_backend for k in kinds):
        backend = _load_backend_for(ds, args.backend)
    methods: list[tuple[str, str]] = [(name, text) for name, text in BASELINES.items()]
    for text in args.expr or []:
        methods.append((text, text))
    out_dir = Path(args.out_dir or "compare_out")
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, text in methods:
        expr = parse_expr(text)
        cells = {}
        for kind in kinds:
            score = evaluate_metric(kind, expr, ds, backend if kind.needs_backend else None)
            cells[str(kind)] = score.value
            safe = name.replace("+", "p").replace("*", "x").replace(" ", "").replace("/", "_")
            write_csv(out_dir / f"{safe}__{kind.name}_{kind.p or 0}.csv", kind, text, score)
        rows.append({"method": name, "expr": text, **cells})
    report = {"columns": [str(k) for k in kinds], "rows": rows}
    (out_dir / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    header = ["method"] + [str(k) for k in kinds]
    print("\t".join(header))
    for row in rows:
        print("\t".join([row["method"]] + [f"{row[str(k)]:.6f}" for k in kinds]))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sycam", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="generate a deterministic synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--per-class", type=int, default=10)
    p.add_argument("--channels", "-K", type=int, default=4, help="feature map count K")
    p.add_argument("--grid-w", type=int, default=3)
    p.add_argument("--grid-h", type=int, default=3)
    p.add_argument("--image-ch", type=int, default=1)
    p.add_argument("--image-h", type=int, default=12)
    p.add_argument("--image-w", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_make_synthetic)

    p = sub.add_parser("synth", help="run expression synthesis from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("eval", help="evaluate one expression under one metric")
    p.add_argument("--expr", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--metric", required=True, help="name or name:P, e.g. deletion:9")
    p.add_argument("--backend", default=None, help="'auto', backend json, .onnx, or URL")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("render", help="render a saliency overlay PNG")
    p.add_argument("--expr", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--image-id", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("compare", help="baselines + user expressions across metrics")
    p.add_argument("--dataset", required=True)
    p.add_argument("--metrics", required=True, help="comma list, e.g. deletion:9,mgt")
    p.add_argument("--expr", action="append", help="extra expression rows")
    p.add_argument("--backend", default=None)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(fn=cmd_compare)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, CapabilityError, ExprSyntaxError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except SycamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
