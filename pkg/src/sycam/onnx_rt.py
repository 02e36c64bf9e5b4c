"""Self-contained ONNX model reader and numpy executor.

Covers single-input single-output image classifiers built from a restricted
op set: Conv (group 1, dilation 1), Relu, MaxPool, AveragePool,
GlobalAveragePool, Flatten, Reshape, Gemm, MatMul, Add, Softmax, Identity,
Constant. Anything else raises BackendError naming the operator.

The reader decodes the protobuf wire format directly so no onnx/onnxruntime
dependency is needed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sycam.errors import BackendError

_WIRE_VARINT = 0
_WIRE_FIXED64 = 1
_WIRE_LEN = 2
_WIRE_FIXED32 = 5


def _read_varint(buf: bytes, i: int) -> tuple[int, int]:
    result = 0
    shift = 0
    while True:
        if i >= len(buf):
            raise BackendError("truncated varint in ONNX file")
        b = buf[i]
        i += 1
        result |= (b & 0x7F) << shift
        if not (b & 0x80):
            break
        shift += 7
        if shift > 70:
            raise BackendError("malformed varint in ONNX file")
    return result, i


def _signed(value: int) -> int:
    return value - (1 << 64) if value >= (1 << 63) else value


def _fields(buf: bytes):
    """Yield (field_number, wire_type, payload) triples from a message."""
    i = 0
    n = len(buf)
    while i < n:
        key, i = _read_varint(buf, i)
        fno, wtype = key >> 3, key & 0x7
        if wtype == _WIRE_VARINT:
            val, i = _read_varint(buf, i)
            yield fno, wtype, val
        elif wtype == _WIRE_LEN:
            length, i = _read_varint(buf, i)
            yield fno, wtype, buf[i : i + length]
            i += length
        elif wtype == _WIRE_FIXED32:
            yield fno, wtype, buf[i : i + 4]
            i += 4
        elif wtype == _WIRE_FIXED64:
            yield fno, wtype, buf[i : i + 8]
            i += 8
        else:
            raise BackendError(f"unsupported protobuf wire type {wtype}")


def _packed_varints(payload: bytes) -> list[int]:
    out = []
    i = 0
    while i < len(payload):
        v, i = _read_varint(payload, i)
        out.append(_signed(v))
    return out


@dataclass
class OnnxTensor:
    name: str
    array: np.ndarray


@dataclass
class OnnxNode:
    op_type: str
    inputs: list[str]
    outputs: list[str]
    attrs: dict[str, object]


@dataclass
class OnnxGraph:
    nodes: list[OnnxNode] = field(default_factory=list)
    initializers: dict[str, np.ndarray] = field(default_factory=dict)
    input_name: str = ""
    input_shape: list[int | None] = field(default_factory=list)
    output_name: str = ""


_DTYPES = {1: np.float32, 6: np.int32, 7: np.int64, 11: np.float64}


def _parse_tensor(buf: bytes) -> OnnxTensor:
    dims: list[int] = []
    data_type = 1
    raw = b""
    floats: list[float] = []
    int64s: list[int] = []
    name = ""
    for fno, wtype, val in _fields(buf):
        if fno == 1:
            if wtype == _WIRE_VARINT:
                dims.append(_signed(val))
            else:
                dims.extend(_packed_varints(val))
        elif fno == 2 and wtype == _WIRE_VARINT:
            data_type = val
        elif fno == 4:  # float_data, packed
            floats.extend(np.frombuffer(val, dtype="<f4").tolist())
        elif fno == 7:
            if wtype == _WIRE_VARINT:
                int64s.append(_signed(val))
            else:
                int64s.extend(_packed_varints(val))
        elif fno == 8:
            name = val.decode("utf-8")
        elif fno == 9:
            raw = val
    dtype = _DTYPES.get(data_type)
    if dtype is None:
        raise BackendError(f"unsupported ONNX tensor data_type {data_type}")
    count = int(np.prod(dims)) if dims else 1
    if raw:
        arr = np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<")).copy()
    elif floats:
        arr = np.array(floats, dtype=dtype)
    elif int64s:
        arr = np.array(int64s, dtype=dtype)
    else:
        arr = np.zeros(count, dtype=dtype)
    return OnnxTensor(name=name, array=arr.reshape(dims) if dims else arr)


def _parse_attr(buf: bytes) -> tuple[str, object]:
    name = ""
    value: object = None
    ints: list[int] = []
    floats: list[float] = []
    for fno, wtype, val in _fields(buf):
        if fno == 1:
            name = val.decode("utf-8")
        elif fno == 2:  # f, fixed32
            value = float(np.frombuffer(val, dtype="<f4")[0])
        elif fno == 3:  # i
            value = _signed(val)
        elif fno == 4:  # s
            value = val.decode("utf-8", errors="replace")
        elif fno == 5:  # t
            value = _parse_tensor(val).array
        elif fno == 7:  # floats
            if wtype == _WIRE_LEN:
                floats.extend(np.frombuffer(val, dtype="<f4").tolist())
            else:
                floats.append(float(np.frombuffer(val, dtype="<f4")[0]))
        elif fno == 8:  # ints
            if wtype == _WIRE_VARINT:
                ints.append(_signed(val))
            else:
                ints.extend(_packed_varints(val))
    if ints:
        value = ints
    elif floats:
        value = floats
    return name, value


def _parse_node(buf: bytes) -> OnnxNode:
    node = OnnxNode(op_type="", inputs=[], outputs=[], attrs={})
    for fno, _wtype, val in _fields(buf):
        if fno == 1:
            node.inputs.append(val.decode("utf-8"))
        elif fno == 2:
            node.outputs.append(val.decode("utf-8"))
        elif fno == 4:
            node.op_type = val.decode("utf-8")
        elif fno == 5:
            k, v = _parse_attr(val)
            node.attrs[k] = v
    return node


def _parse_value_info(buf: bytes) -> tuple[str, list[int | None]]:
    name = ""
    shape: list[int | None] = []
    for fno, _wtype, val in _fields(buf):
        if fno == 1:
            name = val.decode("utf-8")
        elif fno == 2:  # TypeProto
            for f2, _w2, v2 in _fields(val):
                if f2 == 1:  # tensor_type
                    for f3, _w3, v3 in _fields(v2):
                        if f3 == 2:  # shape
                            for f4, _w4, v4 in _fields(v3):
                                if f4 == 1:  # dim
                                    dim_value: int | None = None
                                    for f5, w5, v5 in _fields(v4):
                                        if f5 == 1 and w5 == _WIRE_VARINT:
                                            dim_value = _signed(v5)
                                    shape.append(dim_value)
    return name, shape


def parse_onnx(path: str | Path) -> OnnxGraph:
    buf = Path(path).read_bytes()
    graph_buf = None
    for fno, wtype, val in _fields(buf):
        if fno == 7 and wtype == _WIRE_LEN:  # ModelProto.graph
            graph_buf = val
    if graph_buf is None:
        raise BackendError(f"{path}: no graph found (not an ONNX model?)")
    g = OnnxGraph()
    inputs: list[tuple[str, list[int | None]]] = []
    outputs: list[tuple[str, list[int | None]]] = []
    for fno, _wtype, val in _fields(graph_buf):
        if fno == 1:
            g.nodes.append(_parse_node(val))
        elif fno == 5:
            t = _parse_tensor(val)
            g.initializers[t.name] = t.array
        elif fno == 11:
            inputs.append(_parse_value_info(val))
        elif fno == 12:
            outputs.append(_parse_value_info(val))
    real_inputs = [(n, s) for n, s in inputs if n not in g.initializers]
    if len(real_inputs) != 1 or len(outputs) != 1:
        raise BackendError(
            f"{path}: expected one image input and one output, "
            f"got {len(real_inputs)} inputs / {len(outputs)} outputs"
        )
    g.input_name, g.input_shape = real_inputs[0]
    g.output_name = outputs[0][0]
    return g


# --- executor -----------------------------------------------------------------


def _pool2d(x: np.ndarray, kernel, strides, pads, reduce_fn, pad_value=0.0):
    kh, kw = kernel
    sh, sw = strides
    pt, pl, pb, pr = pads
    x = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)), constant_values=pad_value)
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    return reduce_fn(win[:, :, ::sh, ::sw], axis=(-2, -1))


def _conv(env, node):
    x = env[node.inputs[0]]
    w = env[node.inputs[1]]
    b = env[node.inputs[2]] if len(node.inputs) > 2 else None
    attrs = node.attrs
    if attrs.get("group", 1) != 1:
        raise BackendError("Conv: only group=1 supported")
    if any(d != 1 for d in attrs.get("dilations", [1, 1])):
        raise BackendError("Conv: only dilation=1 supported")
    kh, kw = attrs.get("kernel_shape", w.shape[2:])
    sh, sw = attrs.get("strides", [1, 1])
    pads = attrs.get("pads", [0, 0, 0, 0])
    pt, pl, pb, pr = pads
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw]
    out = np.einsum("nchwuv,mcuv->nmhw", win, w, optimize=True)
    if b is not None:
        out = out + b[None, :, None, None]
    return out


def _gemm(env, node):
    a = env[node.inputs[0]]
    b = env[node.inputs[1]]
    c = env[node.inputs[2]] if len(node.inputs) > 2 else 0.0
    alpha = node.attrs.get("alpha", 1.0)
    beta = node.attrs.get("beta", 1.0)
    if node.attrs.get("transA", 0):
        a = a.T
    if node.attrs.get("transB", 0):
        b = b.T
    return alpha * (a @ b) + beta * c


def _softmax_rows(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def run_graph(g: OnnxGraph, x: np.ndarray) -> np.ndarray:
    env: dict[str, np.ndarray] = {k: np.asarray(v, dtype=np.float64) if v.dtype.kind == "f" else v
                                  for k, v in g.initializers.items()}
    env[g.input_name] = np.asarray(x, dtype=np.float64)
    for node in g.nodes:
        op = node.op_type
        if op == "Conv":
            out = _conv(env, node)
        elif op == "Relu":
            out = np.maximum(env[node.inputs[0]], 0.0)
        elif op == "Add":
            out = env[node.inputs[0]] + env[node.inputs[1]]
        elif op == "MaxPool":
            out = _pool2d(
                env[node.inputs[0]],
                node.attrs["kernel_shape"],
                node.attrs.get("strides", [1, 1]),
                node.attrs.get("pads", [0, 0, 0, 0]),
                np.max,
                pad_value=-np.inf,
            )
        elif op == "AveragePool":
            out = _pool2d(
                env[node.inputs[0]],
                node.attrs["kernel_shape"],
                node.attrs.get("strides", [1, 1]),
                node.attrs.get("pads", [0, 0, 0, 0]),
                np.mean,
            )
        elif op == "GlobalAveragePool":
            out = env[node.inputs[0]].mean(axis=(2, 3), keepdims=True)
        elif op == "Flatten":
            a = env[node.inputs[0]]
            axis = node.attrs.get("axis", 1)
            out = a.reshape(int(np.prod(a.shape[:axis])) if axis else 1, -1)
        elif op == "Reshape":
            a = env[node.inputs[0]]
            shape = [int(s) for s in env[node.inputs[1]]]
            shape = [a.shape[i] if s == 0 else s for i, s in enumerate(shape)]
            out = a.reshape(shape)
        elif op == "Gemm":
            out = _gemm(env, node)
        elif op == "MatMul":
            out = env[node.inputs[0]] @ env[node.inputs[1]]
        elif op == "Softmax":
            out = _softmax_rows(env[node.inputs[0]], node.attrs.get("axis", -1))
        elif op == "Identity":
            out = env[node.inputs[0]]
        elif op == "Constant":
            out = np.asarray(node.attrs["value"])
        else:
            raise BackendError(f"unsupported ONNX operator {op!r}")
        for name in node.outputs:
            env[name] = out
    if g.output_name not in env:
        raise BackendError(f"graph produced no output {g.output_name!r}")
    return env[g.output_name]
