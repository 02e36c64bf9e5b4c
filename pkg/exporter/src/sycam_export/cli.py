"""sycam-export command line: run | serve | onnx.

Models are loaded from a Python factory file: `--model path/to/factory.py[:fn]`
where `fn` (default `load_model`) returns a ready `torch.nn.Module`.
"""
from __future__ import annotations

import argparse
import importlib.util
import json
import logging
import sys
from pathlib import Path

import numpy as np


def load_model_factory(spec: str):
    path, _, fn_name = spec.partition(":")
    fn_name = fn_name or "load_model"
    module_spec = importlib.util.spec_from_file_location("sycam_export_model", path)
    if module_spec is None or module_spec.loader is None:
        raise SystemExit(f"cannot import model factory {path!r}")
    module = importlib.util.module_from_spec(module_spec)
    module_spec.loader.exec_module(module)
    factory = getattr(module, fn_name, None)
    if factory is None:
        raise SystemExit(f"{path!r} has no function {fn_name!r}")
    return factory()


def cmd_run(args) -> int:
    from sycam_export.extract import ExportError, ExportJob, export, load_image_folder

    model = load_model_factory(args.model)
    size = (args.size[0], args.size[1]) if args.size else None
    images = load_image_folder(args.images, size=size)
    masks = {}
    if args.masks:
        for path in sorted(Path(args.masks).glob("*.npy")):
            masks[path.stem] = np.load(path)
    class_names = json.loads(Path(args.classes).read_text()) if args.classes else None
    try:
        manifest = export(
            ExportJob(
                model=model,
                target_layer=args.layer,
                images=images,
                out_dir=Path(args.out),
                class_names=class_names,
                masks=masks,
                batch_size=args.batch_size,
            )
        )
    except ExportError as exc:
        print(f"export failed: {exc}", file=sys.stderr)
        return 1
    print(f"manifest: {manifest}")
    return 0


def cmd_onnx(args) -> int:
    from sycam_export.extract import ExportError
    from sycam_export.onnx_write import export_onnx, verify_onnx

    model = load_model_factory(args.model)
    dims = tuple(args.dims)
    try:
        out = export_onnx(model, dims, args.out)
        if args.verify:
            rng = np.random.default_rng(0)
            probes = rng.normal(size=(10, *dims)).astype(np.float32)
            worst = verify_onnx(out, model, probes)
            print(f"verified: max |onnx - framework| = {worst:.3e} <= 1e-4")
    except ExportError as exc:
        print(f"onnx export failed: {exc}", file=sys.stderr)
        return 1
    print(f"onnx: {out}")
    return 0


def cmd_serve(args) -> int:
    from sycam_export.server import InferenceServer

    model = load_model_factory(args.model)
    server = InferenceServer(model, tuple(args.dims), host=args.host, port=args.port)
    print(f"serving on {server.url}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
    return 0


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO)
    parser = argparse.ArgumentParser(prog="sycam-export", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="extract terminals into a dataset")
    p.add_argument("--model", required=True, help="factory file, e.g. model.py:load_model")
    p.add_argument("--layer", required=True, help="dotted name of the last conv layer")
    p.add_argument("--images", required=True, help="folder of .png/.jpg/.npy inputs")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, nargs=2, default=None, help="resize H W")
    p.add_argument("--classes", default=None, help="json list of class names")
    p.add_argument("--masks", default=None, help="folder of <image_id>.npy masks")
    p.add_argument("--batch-size", type=int, default=16)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("onnx", help="export the model as ONNX")
    p.add_argument("--model", required=True)
    p.add_argument("--dims", type=int, nargs=3, required=True, metavar=("CH", "H", "W"))
    p.add_argument("--out", required=True)
    p.add_argument("--verify", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(fn=cmd_onnx)

    p = sub.add_parser("serve", help="serve the /v1 classification protocol")
    p.add_argument("--model", required=True)
    p.add_argument("--dims", type=int, nargs=3, required=True, metavar=("CH", "H", "W"))
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)
    p.set_defaults(fn=cmd_serve)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
