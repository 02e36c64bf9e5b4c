"""HTTP inference server implementing the /v1 classification protocol.

GET  /v1/meta     -> {"dims": [ch, H, W], "num_classes": k, "softmax": true}
POST /v1/classify <- {"dims": [n, ch, H, W], "data_b64": "<LE f32 payload>"}
                  -> {"scores": [[...], ...]}
Malformed requests get HTTP 400 with a JSON error body.
"""
from __future__ import annotations

import base64
import json
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import torch
import torch.nn.functional as F

MAX_BATCH = 256


class InferenceServer:
    def __init__(
        self,
        model: torch.nn.Module,
        input_dims: tuple[int, int, int],
        host: str = "127.0.0.1",
        port: int = 8008,
        max_batch: int = MAX_BATCH,
    ):
        model = model.eval()
        with torch.no_grad():
            num_classes = int(model(torch.zeros((1, *input_dims))).shape[1])
        outer_dims = tuple(input_dims)

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def _json(self, code: int, obj) -> None:
                body = json.dumps(obj).encode()
                self.send_response(code)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_GET(self):
                if self.path != "/v1/meta":
                    self._json(404, {"error": "unknown endpoint"})
                    return
                self._json(
                    200,
                    {"dims": list(outer_dims), "num_classes": num_classes, "softmax": True},
                )

            def do_POST(self):
                if self.path != "/v1/classify":
                    self._json(404, {"error": "unknown endpoint"})
                    return
                try:
                    length = int(self.headers.get("Content-Length", "0"))
                    payload = json.loads(self.rfile.read(length))
                    dims = payload["dims"]
                    raw = base64.b64decode(payload["data_b64"])
                except (KeyError, ValueError, json.JSONDecodeError) as exc:
                    self._json(400, {"error": f"malformed request: {exc}"})
                    return
                if len(dims) != 4 or tuple(dims[1:]) != outer_dims:
                    self._json(400, {"error": f"dims must be [n, {', '.join(map(str, outer_dims))}]"})
                    return
                if dims[0] > max_batch:
                    self._json(400, {"error": "batch too large"})
                    return
                if len(raw) != 4 * int(np.prod(dims)):
                    self._json(400, {"error": "payload length disagrees with dims"})
                    return
                batch = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
                with torch.no_grad():
                    scores = F.softmax(model(torch.from_numpy(batch)), dim=1).numpy()
                self._json(200, {"scores": [[float(v) for v in row] for row in scores]})

        self.server = ThreadingHTTPServer((host, port), Handler)

    @property
    def url(self) -> str:
        host, port = self.server.server_address
        return f"http://{host}:{port}"

    def serve_forever(self) -> None:
        self.server.serve_forever()

    def shutdown(self) -> None:
        self.server.shutdown()
        self.server.server_close()
