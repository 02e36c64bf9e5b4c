"""ONNX export by walking a torch.fx trace and serializing ModelProto directly.

Covers the feed-forward classifier vocabulary: Conv2d, ReLU, MaxPool2d,
AvgPool2d, AdaptiveAvgPool2d(1), Flatten, Linear, elementwise add, Softmax.
Anything else aborts with an unsupported-operator report. The protobuf wire
encoding is written by hand, so exporting needs no onnx package.
"""
from __future__ import annotations

import operator
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import fx, nn

from sycam_export.extract import ExportError

OPSET = 13


# --- protobuf wire helpers ------------------------------------------------------


def _varint(n: int) -> bytes:
    if n < 0:
        n += 1 << 64
    out = bytearray()
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def _key(fno: int, wtype: int) -> bytes:
    return _varint((fno << 3) | wtype)


def _bytes_field(fno: int, payload: bytes) -> bytes:
    return _key(fno, 2) + _varint(len(payload)) + payload


def _str_field(fno: int, s: str) -> bytes:
    return _bytes_field(fno, s.encode("utf-8"))


def _int_field(fno: int, v: int) -> bytes:
    return _key(fno, 0) + _varint(v)


def _float_field(fno: int, v: float) -> bytes:
    return _key(fno, 5) + struct.pack("<f", v)


def _tensor_proto(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    data_type = {np.dtype(np.float32): 1, np.dtype(np.int64): 7}[arr.dtype]
    out = b""
    for d in arr.shape:
        out += _int_field(1, d)
    out += _int_field(2, data_type)
    out += _str_field(8, name)
    out += _bytes_field(9, arr.tobytes())
    return out


def _attr_int(name: str, v: int) -> bytes:
    return _str_field(1, name) + _key(3, 0) + _varint(v) + _int_field(20, 2)


def _attr_ints(name: str, vals) -> bytes:
    out = _str_field(1, name)
    for v in vals:
        out += _key(8, 0) + _varint(int(v))
    return out + _int_field(20, 7)


def _attr_float(name: str, v: float) -> bytes:
    return _str_field(1, name) + _float_field(2, float(v)) + _int_field(20, 1)


def _node(op_type: str, inputs: list[str], outputs: list[str], attrs: list[bytes] = ()) -> bytes:
    out = b""
    for i in inputs:
        out += _str_field(1, i)
    for o in outputs:
        out += _str_field(2, o)
    out += _str_field(4, op_type)
    for a in attrs:
        out += _bytes_field(5, a)
    return out


def _value_info(name: str, dims: list[int | None]) -> bytes:
    shape = b""
    for d in dims:
        dim = _int_field(1, d) if d is not None else _str_field(2, "batch")
        shape += _bytes_field(1, dim)
    tensor_type = _int_field(1, 1) + _bytes_field(2, shape)
    return _str_field(1, name) + _bytes_field(2, _bytes_field(1, tensor_type))


def _model(nodes, initializers, input_vi, output_vi) -> bytes:
    graph = b""
    for n in nodes:
        graph += _bytes_field(1, n)
    graph += _str_field(2, "sycam_export")
    for t in initializers:
        graph += _bytes_field(5, t)
    graph += _bytes_field(11, input_vi)
    graph += _bytes_field(12, output_vi)
    opset = _str_field(1, "") + _int_field(2, OPSET)
    return (
        _int_field(1, 8)  # ir_version
        + _str_field(2, "sycam-export")
        + _bytes_field(7, graph)
        + _bytes_field(8, opset)
    )


# --- fx graph translation --------------------------------------------------------


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else tuple(v)


class _Translator:
    def __init__(self, model: nn.Module):
        self.model = model.eval()
        self.gm = fx.symbolic_trace(model)
        self.modules = dict(self.gm.named_modules())
        self.nodes: list[bytes] = []
        self.initializers: list[bytes] = []
        self.unsupported: list[str] = []
        self.input_name: str | None = None
        self.output_of: dict[fx.Node, str] = {}

    def _init_tensor(self, name: str, t: torch.Tensor) -> str:
        self.initializers.append(_tensor_proto(name, t.detach().numpy().astype(np.float32)))
        return name

    def _emit(self, op_type, inputs, out_name, attrs=()):
        self.nodes.append(_node(op_type, inputs, [out_name], list(attrs)))

    def _translate_module(self, node: fx.Node, out: str) -> None:
        mod = self.modules[node.target]
        src = self.output_of[node.args[0]]
        if isinstance(mod, nn.Conv2d):
            if mod.groups != 1:
                self.unsupported.append(f"{node.target} (grouped conv)")
                return
            inputs = [src, self._init_tensor(f"{node.target}.weight", mod.weight)]
            if mod.bias is not None:
                inputs.append(self._init_tensor(f"{node.target}.bias", mod.bias))
            ph, pw = _pair(mod.padding)
            self._emit(
                "Conv",
                inputs,
                out,
                [
                    _attr_ints("kernel_shape", _pair(mod.kernel_size)),
                    _attr_ints("strides", _pair(mod.stride)),
                    _attr_ints("pads", [ph, pw, ph, pw]),
                    _attr_ints("dilations", _pair(mod.dilation)),
                    _attr_int("group", 1),
                ],
            )
        elif isinstance(mod, nn.ReLU):
            self._emit("Relu", [src], out)
        elif isinstance(mod, nn.MaxPool2d):
            ph, pw = _pair(mod.padding)
            stride = mod.stride if mod.stride is not None else mod.kernel_size
            self._emit(
                "MaxPool",
                [src],
                out,
                [
                    _attr_ints("kernel_shape", _pair(mod.kernel_size)),
                    _attr_ints("strides", _pair(stride)),
                    _attr_ints("pads", [ph, pw, ph, pw]),
                ],
            )
        elif isinstance(mod, nn.AvgPool2d):
            ph, pw = _pair(mod.padding)
            stride = mod.stride if mod.stride is not None else mod.kernel_size
            self._emit(
                "AveragePool",
                [src],
                out,
                [
                    _attr_ints("kernel_shape", _pair(mod.kernel_size)),
                    _attr_ints("strides", _pair(stride)),
                    _attr_ints("pads", [ph, pw, ph, pw]),
                ],
            )
        elif isinstance(mod, nn.AdaptiveAvgPool2d):
            if _pair(mod.output_size if mod.output_size is not None else 1) != (1, 1):
                self.unsupported.append(f"{node.target} (adaptive pool > 1x1)")
                return
            self._emit("GlobalAveragePool", [src], out)
        elif isinstance(mod, nn.Flatten):
            self._emit("Flatten", [src], out, [_attr_int("axis", mod.start_dim)])
        elif isinstance(mod, nn.Linear):
            inputs = [src, self._init_tensor(f"{node.target}.weight", mod.weight)]
            attrs = [_attr_float("alpha", 1.0), _attr_float("beta", 1.0), _attr_int("transB", 1)]
            if mod.bias is not None:
                inputs.append(self._init_tensor(f"{node.target}.bias", mod.bias))
            self._emit("Gemm", inputs, out, attrs)
        elif isinstance(mod, nn.Softmax):
            self._emit("Softmax", [src], out, [_attr_int("axis", mod.dim if mod.dim is not None else -1)])
        elif isinstance(mod, (nn.Dropout, nn.Identity)):
            self._emit("Identity", [src], out)
        else:
            self.unsupported.append(f"{node.target} ({type(mod).__name__})")

    def _translate_function(self, node: fx.Node, out: str) -> None:
        fn = node.target
        if fn in (F.relu, torch.relu):
            self._emit("Relu", [self.output_of[node.args[0]]], out)
        elif fn in (operator.add, torch.add):
            self._emit(
                "Add", [self.output_of[node.args[0]], self.output_of[node.args[1]]], out
            )
        elif fn is torch.flatten:
            axis = node.args[1] if len(node.args) > 1 else node.kwargs.get("start_dim", 0)
            self._emit("Flatten", [self.output_of[node.args[0]]], out, [_attr_int("axis", axis)])
        elif fn is F.softmax:
            axis = node.kwargs.get("dim", node.args[1] if len(node.args) > 1 else -1)
            self._emit("Softmax", [self.output_of[node.args[0]]], out, [_attr_int("axis", axis)])
        else:
            name = getattr(fn, "__name__", repr(fn))
            self.unsupported.append(f"{node.name} (function {name})")

    def translate(self, input_dims: tuple[int, int, int]) -> bytes:
        out_name = None
        for node in self.gm.graph.nodes:
            if node.op == "placeholder":
                if self.input_name is not None:
                    raise ExportError("model must take a single image tensor input")
                self.input_name = "image"
                self.output_of[node] = "image"
            elif node.op == "call_module":
                self.output_of[node] = node.name
                self._translate_module(node, node.name)
            elif node.op == "call_function":
                self.output_of[node] = node.name
                self._translate_function(node, node.name)
            elif node.op == "call_method":
                if node.target == "flatten":
                    axis = node.args[1] if len(node.args) > 1 else 0
                    self.output_of[node] = node.name
                    self._emit(
                        "Flatten", [self.output_of[node.args[0]]], node.name,
                        [_attr_int("axis", axis)],
                    )
                else:
                    self.unsupported.append(f"{node.name} (method {node.target})")
            elif node.op == "output":
                src = node.args[0]
                if isinstance(src, (tuple, list)):
                    raise ExportError("model must produce a single output tensor")
                out_name = self.output_of[src]
        if self.unsupported:
            raise ExportError("unsupported operators: " + ", ".join(sorted(self.unsupported)))
        if out_name is None:
            raise ExportError("traced graph has no output")
        # Rewire the final node to the canonical output name.
        nodes = self.nodes
        renamed = []
        for raw in nodes:
            renamed.append(raw)
        # Determine class count from a dry forward pass.
        with torch.no_grad():
            probe = torch.zeros((1, *input_dims))
            n_classes = int(self.model(probe).shape[1])
        return _model(
            renamed,
            self.initializers,
            _value_info("image", [None, *input_dims]),
            _value_info(out_name, [None, n_classes]),
        )


def export_onnx(model: nn.Module, input_dims: tuple[int, int, int], out_path, opset: int = OPSET) -> Path:
    """Serialize the model as ONNX (opset 13, single input/output)."""
    if opset < 13:
        raise ExportError("opset must be >= 13")
    data = _Translator(model).translate(input_dims)
    out_path = Path(out_path)
    out_path.write_bytes(data)
    return out_path


def verify_onnx(
    onnx_path,
    model: nn.Module,
    probe_images: np.ndarray,
    tol: float = 1e-4,
) -> float:
    """Compare the exported file (run by the sycam ONNX executor) against
    in-framework inference on probe images; raises ExportError beyond tol.
    Returns the max absolute softmax disagreement."""
    try:
        from sycam.backend import OnnxBackend
    except ImportError as exc:
        raise ExportError(f"verification needs the sycam package: {exc}") from exc

    backend = OnnxBackend(onnx_path)
    got = backend.classify(np.asarray(probe_images, dtype=np.float64))
    with torch.no_grad():
        expected = F.softmax(
            model(torch.from_numpy(np.asarray(probe_images, dtype=np.float32))), dim=1
        ).numpy()
    worst = float(np.max(np.abs(got - expected)))
    if worst > tol:
        raise ExportError(f"onnx/framework disagreement {worst:.3e} exceeds {tol:.0e}")
    return worst
