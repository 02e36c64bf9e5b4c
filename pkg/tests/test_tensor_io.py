from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from sycam.errors import DatasetError, TensorFormatError
from sycam.tensor_io import (
    ImageRecord,
    load_dataset,
    load_tensor,
    make_synthetic_dataset,
    save_tensor,
    write_dataset,
)


def test_round_trip_identity(tmp_path):
    t = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    save_tensor(t, tmp_path / "t.tns")
    back = load_tensor(tmp_path / "t.tns")
    assert back.shape == (2, 2)
    assert np.array_equal(back, t)


def test_round_trip_seeded_payload_bitwise(tmp_path):
    rng = np.random.default_rng(42)
    t = rng.standard_normal(512).astype(np.float32)
    path = tmp_path / "t.tns"
    save_tensor(t, path)
    # Byte-comparison oracle: the payload after the header is exactly t's bytes.
    raw = path.read_bytes()
    payload = raw[raw.find(b"\n") + 1 :]
    assert payload == t.astype("<f4").tobytes()
    assert np.array_equal(load_tensor(path), t)


def test_dims_mismatch_rejected(tmp_path):
    path = tmp_path / "bad.tns"
    header = json.dumps({"dims": [3, 3], "dtype": "f32", "order": "LE"})
    path.write_bytes(b"SYCTNS01" + header.encode() + b"\n" + b"\x00" * 8)
    with pytest.raises(TensorFormatError, match="payload bytes"):
        load_tensor(path)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.tns"
    path.write_bytes(b"NOTMAGIC" + b"{}\n")
    with pytest.raises(TensorFormatError, match="magic"):
        load_tensor(path)


def test_non_finite_rejected(tmp_path):
    path = tmp_path / "nan.tns"
    header = json.dumps({"dims": [2], "dtype": "f32", "order": "LE"})
    payload = np.array([1.0, np.nan], dtype="<f4").tobytes()
    path.write_bytes(b"SYCTNS01" + header.encode() + b"\n" + payload)
    with pytest.raises(TensorFormatError, match="non-finite"):
        load_tensor(path)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.integers(min_value=1, max_value=5), min_size=1, max_size=3),
    st.integers(min_value=0, max_value=2**31 - 1),
)
def test_round_trip_property(tmp_path_factory, dims, seed):
    rng = np.random.default_rng(seed)
    t = rng.standard_normal(dims).astype(np.float32)
    path = tmp_path_factory.mktemp("rt") / "t.tns"
    save_tensor(t, path)
    back = load_tensor(path)
    assert back.dtype == np.float32
    assert np.array_equal(back, t)


def _tiny_record(image_id: str, k: int = 2, w: int = 2, h: int = 2) -> ImageRecord:
    probs = np.array([0.75, 0.25], dtype=np.float32)
    return ImageRecord(
        image_id=image_id,
        class_scores=probs,
        predicted_class=0,
        feature_maps=np.ones((k, w, h), dtype=np.float32),
        grads=np.zeros(k, dtype=np.float32),
        cic_scores=np.zeros(k, dtype=np.float32),
        abl_scores=np.zeros(k, dtype=np.float32),
    )


def test_load_dataset_two_records(tmp_path):
    manifest = write_dataset(
        tmp_path, ["a", "b"], (2, 2, 2), [_tiny_record("r0"), _tiny_record("r1")]
    )
    ds = load_dataset(manifest)
    assert len(ds) == 2
    assert ds.grid == (2, 2, 2)


def test_mixed_grid_names_offender(tmp_path):
    write_dataset(tmp_path, ["a", "b"], (2, 2, 2), [_tiny_record("r0")])
    # Second record with K=4 written under the same manifest by hand.
    bad = _tiny_record("r1", k=4)
    rec_dir = tmp_path / "records" / "r1"
    rec_dir.mkdir(parents=True)
    (rec_dir / "record.json").write_text(json.dumps({"image_id": "r1", "true_class": None}))
    for name in ("class_scores", "feature_maps", "grads", "cic_scores", "abl_scores"):
        save_tensor(getattr(bad, name), rec_dir / f"{name}.tns")
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["records"].append("records/r1")
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(DatasetError, match="r1"):
        load_dataset(tmp_path / "manifest.json")


def test_missing_file_rejected(tmp_path):
    manifest = write_dataset(tmp_path, ["a", "b"], (2, 2, 2), [_tiny_record("r0")])
    (tmp_path / "records" / "r0" / "grads.tns").unlink()
    with pytest.raises(DatasetError, match="grads"):
        load_dataset(manifest)


def test_generator_deterministic(tmp_path):
    args = dict(n_classes=2, images_per_class=5, K=4, w=4, h=4, ch=1, H=16, W=16, seed=7)
    m1 = make_synthetic_dataset(tmp_path / "one", **args)
    m2 = make_synthetic_dataset(tmp_path / "two", **args)
    files1 = sorted(p.relative_to(tmp_path / "one") for p in (tmp_path / "one").rglob("*") if p.is_file())
    files2 = sorted(p.relative_to(tmp_path / "two") for p in (tmp_path / "two").rglob("*") if p.is_file())
    assert files1 == files2
    for rel in files1:
        assert (tmp_path / "one" / rel).read_bytes() == (tmp_path / "two" / rel).read_bytes(), rel
    assert m1.name == m2.name


def test_generator_loads_clean(small_ds):
    assert small_ds.warnings == ()
    assert len(small_ds) == 6


def _load_stub_parts(ds):
    spec = json.loads(ds.stub_model_path.read_text())
    root = ds.stub_model_path.parent
    weights = load_tensor(root / spec["weights"]).astype(np.float64)
    filters = load_tensor(root / spec["filters"]).astype(np.float64)
    k, w, h = spec["grid"]
    return weights, filters, float(spec["temperature"]), w, h


def test_generator_abl_matches_rerun_oracle(small_ds):
    weights, filters, tau, w, h = _load_stub_parts(small_ds)
    for rec in small_ds.records[:3]:
        expected = oracles.ablation_oracle(
            rec.image.astype(np.float64), filters, weights, tau, rec.predicted_class, w, h
        )
        np.testing.assert_allclose(rec.abl_scores, expected, atol=1e-6)


def test_generator_cic_matches_rerun_oracle(small_ds):
    weights, filters, tau, w, h = _load_stub_parts(small_ds)
    for rec in small_ds.records[:3]:
        expected = oracles.cic_oracle(
            rec.image.astype(np.float64), filters, weights, tau, rec.predicted_class, w, h
        )
        np.testing.assert_allclose(rec.cic_scores, expected, atol=1e-6)


def test_generator_grads_match_fd_oracle(small_ds):
    weights, filters, tau, _, _ = _load_stub_parts(small_ds)
    for rec in small_ds.records[:2]:
        expected = oracles.fd_grads_oracle(
            rec.image.astype(np.float64), filters, weights, tau, rec.predicted_class
        )
        np.testing.assert_allclose(rec.grads, expected, atol=1e-6)


def test_generator_feature_maps_match_dot_oracle(small_ds):
    _, filters, _, w, h = _load_stub_parts(small_ds)
    rec = small_ds.records[0]
    expected = oracles.feature_maps_by_dot(rec.image.astype(np.float64), filters, w, h)
    np.testing.assert_allclose(rec.feature_maps, expected, atol=1e-5)


def test_generator_class_scores_match_stub(small_ds, small_backend):
    for rec in small_ds.records:
        probs = small_backend.classify(rec.image[None].astype(np.float64))[0]
        np.testing.assert_allclose(rec.class_scores, probs, atol=1e-6)
        assert rec.predicted_class == int(np.argmax(probs))


def test_generator_rejects_bad_dims(tmp_path):
    with pytest.raises(DatasetError, match="divisible"):
        make_synthetic_dataset(tmp_path, 2, 1, K=4, w=5, h=4, ch=1, H=16, W=16, seed=0)
    with pytest.raises(DatasetError, match="invalid dims"):
        make_synthetic_dataset(tmp_path, 2, 1, K=40, w=4, h=4, ch=1, H=16, W=16, seed=0)
