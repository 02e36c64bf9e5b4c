"""Writer for the SYCTNS01 tensor format and dataset manifests.

Deliberately independent of the consumer package: this module re-implements
the byte format from its definition (8-byte magic, JSON header line,
little-endian float32 payload) so the two sides cross-validate each other.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"SYCTNS01"
FORMAT_VERSION = 1


def write_tensor(arr: np.ndarray, path: str | Path) -> None:
    data = np.ascontiguousarray(arr, dtype="<f4")
    header = json.dumps({"dims": list(data.shape), "dtype": "f32", "order": "LE"})
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(header.encode("utf-8"))
        f.write(b"\n")
        f.write(data.tobytes())


def write_record(
    root: Path,
    image_id: str,
    tensors: dict[str, np.ndarray],
    true_class: int | None,
) -> str:
    rel = f"records/{image_id}"
    rec_dir = root / rel
    rec_dir.mkdir(parents=True, exist_ok=True)
    (rec_dir / "record.json").write_text(
        json.dumps({"image_id": image_id, "true_class": true_class}) + "\n"
    )
    for name, arr in tensors.items():
        write_tensor(arr, rec_dir / f"{name}.tns")
    return rel


def write_manifest(
    root: Path,
    classes: list[str],
    grid: tuple[int, int, int],
    record_rels: list[str],
    image_dims: tuple[int, int, int],
) -> Path:
    manifest = {
        "format_version": FORMAT_VERSION,
        "classes": classes,
        "grid": list(grid),
        "image_dims": list(image_dims),
        "records": record_rels,
        "stub_model": None,
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path
