"""Classification backends: deterministic stub, ONNX file, remote HTTP server.

All backends return softmax probabilities row-per-image in input order and
advertise their expected input dims and class count at load time.
"""
from __future__ import annotations

import base64
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from sycam.errors import BackendError, ConfigError
from sycam.tensor_io import load_tensor

DEFAULT_BATCH_SIZE = 16
DEFAULT_TIMEOUT_MS = 10_000
DEFAULT_MAX_RETRIES = 3


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class BackendConfig:
    kind: str  # "stub" | "onnx" | "remote"
    path: str | None = None  # stub spec json / onnx file
    base_url: str | None = None
    timeout_ms: int = DEFAULT_TIMEOUT_MS
    max_retries: int = DEFAULT_MAX_RETRIES
    batch_size: int = DEFAULT_BATCH_SIZE
    softmax_applied_by_model: bool = False

    def __post_init__(self) -> None:
        if self.kind not in ("stub", "onnx", "remote"):
            raise ConfigError(f"unknown backend kind {self.kind!r}", field="backend.kind")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", field="backend.batch_size")
        if self.kind in ("stub", "onnx") and not self.path:
            raise ConfigError(f"{self.kind} backend needs a path", field="backend.path")
        if self.kind == "remote" and not self.base_url:
            raise ConfigError("remote backend needs base_url", field="backend.base_url")

    @classmethod
    def from_json(cls, obj: dict) -> "BackendConfig":
        if not isinstance(obj, dict) or "kind" not in obj:
            raise ConfigError("backend config must be an object with a 'kind'", field="backend")
        known = {
            "kind", "path", "base_url", "timeout_ms", "max_retries",
            "batch_size", "softmax_applied_by_model",
        }
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", field="backend")
        return cls(**obj)


class Backend:
    """Interface: classify a [n, ch, H, W] batch into [n, C] probabilities."""

    input_dims: tuple[int, int, int]
    num_classes: int

    def classify(self, imgs: np.ndarray) -> np.ndarray:
        imgs = np.asarray(imgs, dtype=np.float64)
        if imgs.ndim != 4 or tuple(imgs.shape[1:]) != self.input_dims:
            raise BackendError(
                f"batch shape {imgs.shape} does not match backend dims {self.input_dims}"
            )
        chunks = []
        for start in range(0, imgs.shape[0], self.batch_size):
            chunk = imgs[start : start + self.batch_size]
            try:
                chunks.append(self._classify_batch(chunk))
            except BackendError as exc:
                raise BackendError(
                    f"images {start}..{start + chunk.shape[0] - 1}: {exc}"
                ) from exc
        probs = np.concatenate(chunks, axis=0)
        bad = ~np.isfinite(probs).all(axis=1)
        if bad.any():
            raise BackendError(f"non-finite model output at indices {np.flatnonzero(bad).tolist()}")
        return probs

    batch_size: int = DEFAULT_BATCH_SIZE

    def _classify_batch(self, imgs: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class StubBackend(Backend):
    """Linear-softmax stub: logit_c = <W_c, image> / tau, probs = softmax.

    Bit-reproducible and fully specified by a JSON spec plus one weight tensor.
    """

    def __init__(self, spec_path: str | Path, batch_size: int = DEFAULT_BATCH_SIZE):
        spec_path = Path(spec_path)
        if not spec_path.exists():
            raise ConfigError(f"stub spec not found: {spec_path}", field="backend.path")
        spec = json.loads(spec_path.read_text())
        self.temperature = float(spec["temperature"])
        if self.temperature <= 0:
            raise ConfigError("stub temperature must be > 0", field="backend.path")
        self.weights = np.asarray(
            load_tensor(spec_path.parent / spec["weights"]), dtype=np.float64
        )
        if self.weights.ndim != 4 or self.weights.shape[0] < 2:
            raise ConfigError(
                f"stub weights must be [C>=2, ch, H, W], got {self.weights.shape}",
                field="backend.path",
            )
        self.num_classes = int(self.weights.shape[0])
        self.input_dims = tuple(self.weights.shape[1:])
        declared = spec.get("image_dims")
        if declared is not None and tuple(declared) != self.input_dims:
            raise ConfigError(
                f"stub spec image_dims {declared} disagree with weights {self.input_dims}",
                field="backend.path",
            )
        self.batch_size = batch_size

    def _classify_batch(self, imgs: np.ndarray) -> np.ndarray:
        logits = np.tensordot(imgs, self.weights, axes=([1, 2, 3], [1, 2, 3])) / self.temperature
        return softmax(logits)


class OnnxBackend(Backend):
    def __init__(
        self,
        path: str | Path,
        batch_size: int = DEFAULT_BATCH_SIZE,
        softmax_applied_by_model: bool = False,
    ):
        from sycam import onnx_rt

        path = Path(path)
        if not path.exists():
            raise ConfigError(f"onnx model not found: {path}", field="backend.path")
        self.graph = onnx_rt.parse_onnx(path)
        shape = self.graph.input_shape
        if len(shape) != 4:
            raise ConfigError(
                f"onnx input must be a 4-D image tensor, got shape {shape}",
                field="backend.path",
            )
        if any(d is None for d in shape[1:]):
            raise ConfigError(
                "onnx input dims (after batch) must be static", field="backend.path"
            )
        self.input_dims = tuple(int(d) for d in shape[1:])
        self.softmax_applied_by_model = softmax_applied_by_model
        self.batch_size = batch_size
        # Probe once: validates the op set and determines the class count.
        probe = self._classify_batch(np.zeros((1, *self.input_dims)))
        self.num_classes = int(probe.shape[1])

    def _classify_batch(self, imgs: np.ndarray) -> np.ndarray:
        from sycam import onnx_rt

        out = onnx_rt.run_graph(self.graph, imgs)
        if out.ndim != 2:
            raise BackendError(f"onnx output must be [n, C], got shape {out.shape}")
        return out if self.softmax_applied_by_model else softmax(out)


class RemoteBackend(Backend):
    """Client for the /v1 HTTP protocol with exponential-backoff retries."""

    def __init__(
        self,
        base_url: str,
        timeout_ms: int = DEFAULT_TIMEOUT_MS,
        max_retries: int = DEFAULT_MAX_RETRIES,
        batch_size: int = DEFAULT_BATCH_SIZE,
    ):
        import requests

        self.base_url = base_url.rstrip("/")
        self.timeout = timeout_ms / 1000.0
        self.max_retries = max_retries
        self.batch_size = batch_size
        self.session = requests.Session()
        try:
            resp = self.session.get(f"{self.base_url}/v1/meta", timeout=self.timeout)
            resp.raise_for_status()
            meta = resp.json()
        except Exception as exc:
            raise ConfigError(f"probe of {self.base_url}/v1/meta failed: {exc}", field="backend.base_url")
        try:
            self.input_dims = tuple(int(d) for d in meta["dims"])
            self.num_classes = int(meta["num_classes"])
            self.server_softmax = bool(meta["softmax"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed /v1/meta response: {exc}", field="backend.base_url")

    def _classify_batch(self, imgs: np.ndarray) -> np.ndarray:
        payload = {
            "dims": list(imgs.shape),
            "data_b64": base64.b64encode(
                np.ascontiguousarray(imgs, dtype="<f4").tobytes()
            ).decode("ascii"),
        }
        delay = 0.1
        last_exc: Exception | None = None
        for _attempt in range(self.max_retries + 1):
            try:
                resp = self.session.post(
                    f"{self.base_url}/v1/classify", json=payload, timeout=self.timeout
                )
                resp.raise_for_status()
                scores = np.asarray(resp.json()["scores"], dtype=np.float64)
                if scores.shape[0] != imgs.shape[0]:
                    raise BackendError(
                        f"server returned {scores.shape[0]} rows for {imgs.shape[0]} images"
                    )
                return scores if self.server_softmax else softmax(scores)
            except BackendError:
                raise
            except Exception as exc:
                last_exc = exc
                time.sleep(delay)
                delay *= 2
        raise BackendError(f"remote classify failed after {self.max_retries} retries: {last_exc}")


def load_backend(
    cfg: BackendConfig,
    expect_dims: tuple[int, int, int] | None = None,
    expect_classes: int | None = None,
) -> Backend:
    """Instantiate a backend and fail fast on any dims/classes mismatch."""
    if cfg.kind == "stub":
        backend: Backend = StubBackend(cfg.path, batch_size=cfg.batch_size)
    elif cfg.kind == "onnx":
        backend = OnnxBackend(
            cfg.path,
            batch_size=cfg.batch_size,
            softmax_applied_by_model=cfg.softmax_applied_by_model,
        )
    else:
        backend = RemoteBackend(
            cfg.base_url,
            timeout_ms=cfg.timeout_ms,
            max_retries=cfg.max_retries,
            batch_size=cfg.batch_size,
        )
    if expect_dims is not None and backend.input_dims != tuple(expect_dims):
        raise ConfigError(
            f"backend input dims {backend.input_dims} disagree with dataset image_dims {tuple(expect_dims)}",
            field="backend",
        )
    if expect_classes is not None and backend.num_classes != expect_classes:
        raise ConfigError(
            f"backend has {backend.num_classes} classes, dataset declares {expect_classes}",
            field="backend",
        )
    return backend
