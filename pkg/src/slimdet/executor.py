"""Reference forward executor.

Deliberately unoptimized but numerically trustworthy: convolutions
accumulate in float64 and round once to float32, so transform-equivalence
tests compare against a stable baseline. Runs are pure functions of
(graph, weights, input); repeated calls are bit-identical and concurrent
runs over shared weights are safe.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .graph import (
    INPUT_ID, ConvSpec, Graph, PoolSpec, TensorShape, validate,
)


class ExecutionError(RuntimeError):
    """Run-time failure; the message names the offending layer or file."""


@dataclass
class Tensor:
    """Dense (n, c, h, w) float32 tensor."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 4:
            raise ValueError(f"tensor must be 4-D (n, c, h, w), got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr, dtype=np.float32)

    @property
    def shape(self) -> TensorShape:
        n, c, h, w = self.data.shape
        return TensorShape(n, c, h, w)

    @classmethod
    def zeros(cls, shape: TensorShape) -> "Tensor":
        return cls(np.zeros(shape.as_tuple(), dtype=np.float32))


class WeightStore:
    """Named parameter tensors per layer id.

    conv/depthwise entries: "weight" [out_c, in_c/groups, kh, kw] and
    optionally "bias" [out_c]; batch_norm entries: "gamma", "beta", "mean",
    "variance", each [c].
    """

    def __init__(self, entries: dict[str, dict[str, np.ndarray]] | None = None):
        self.entries: dict[str, dict[str, np.ndarray]] = {}
        if entries:
            for layer, tensors in entries.items():
                for name, arr in tensors.items():
                    self.set(layer, name, arr)

    def set(self, layer_id: str, name: str, arr: np.ndarray) -> None:
        if "/" in layer_id or "/" in name:
            raise ValueError(f"'/' not allowed in names: {layer_id!r}/{name!r}")
        self.entries.setdefault(layer_id, {})[name] = np.ascontiguousarray(arr, dtype=np.float32)

    def get(self, layer_id: str, name: str) -> np.ndarray:
        try:
            return self.entries[layer_id][name]
        except KeyError:
            raise KeyError(f"missing weights {layer_id!r}/{name!r}") from None

    def layer(self, layer_id: str) -> dict[str, np.ndarray]:
        return self.entries.get(layer_id, {})

    def has(self, layer_id: str, name: str) -> bool:
        return name in self.entries.get(layer_id, {})

    def drop_layer(self, layer_id: str) -> None:
        self.entries.pop(layer_id, None)

    def copy(self) -> "WeightStore":
        out = WeightStore()
        for layer, tensors in self.entries.items():
            for name, arr in tensors.items():
                out.set(layer, name, arr.copy())
        return out

    def validate_against(self, graph: Graph) -> list[str]:
        """Shape-check every conv/bn entry against the graph; returns a list
        of problems (empty when complete and consistent)."""
        from .graph import infer_shapes
        problems = []
        shapes = infer_shapes(graph)
        in_shape = {INPUT_ID: graph.input_shape, **shapes}
        for node in graph.nodes:
            if node.kind in ("conv", "depthwise_conv"):
                spec: ConvSpec = node.spec
                ic = in_shape[node.inputs[0]].c
                want = (spec.out_channels, ic // spec.groups, spec.kernel_h, spec.kernel_w)
                if not self.has(node.id, "weight"):
                    problems.append(f"{node.id}: missing 'weight'")
                elif self.get(node.id, "weight").shape != want:
                    problems.append(
                        f"{node.id}: weight shape {self.get(node.id, 'weight').shape} != {want}")
                if spec.has_bias:
                    if not self.has(node.id, "bias"):
                        problems.append(f"{node.id}: missing 'bias'")
                    elif self.get(node.id, "bias").shape != (spec.out_channels,):
                        problems.append(f"{node.id}: bias shape mismatch")
            elif node.kind == "batch_norm":
                c = in_shape[node.inputs[0]].c
                for name in ("gamma", "beta", "mean", "variance"):
                    if not self.has(node.id, name):
                        problems.append(f"{node.id}: missing {name!r}")
                    elif self.get(node.id, name).shape != (c,):
                        problems.append(f"{node.id}: {name} shape mismatch (want ({c},))")
        return problems


def _conv_geometry(x: np.ndarray, spec) -> tuple[int, int]:
    ekh, ekw = spec.effective_kernel()
    oh = (x.shape[2] + 2 * spec.pad[0] - ekh) // spec.stride[0] + 1
    ow = (x.shape[3] + 2 * spec.pad[1] - ekw) // spec.stride[1] + 1
    if oh < 1 or ow < 1:
        raise ExecutionError(f"non-positive output size {oh}x{ow}")
    return oh, ow


def _tap_view(xp: np.ndarray, i: int, j: int, spec, oh: int, ow: int) -> np.ndarray:
    """Strided slice of the padded input selecting tap (i, j) for every
    output position."""
    sh, sw = spec.stride
    dh, dw = spec.dilation
    y0 = i * dh
    x0 = j * dw
    return xp[:, :, y0:y0 + (oh - 1) * sh + 1:sh, x0:x0 + (ow - 1) * sw + 1:sw]


def conv2d(x: Tensor, spec: ConvSpec, weights: dict[str, np.ndarray]) -> Tensor:
    """Grouped 2-D convolution with zero padding.

    out[n,o,y,x] = bias[o] + sum_{c,i,j} w[o,c,i,j] * in[n, g(o,c), y*s-p+i*d, x*s-p+j*d]
    """
    w = weights["weight"]
    n, c, _, _ = x.data.shape
    if c % spec.groups != 0:
        raise ExecutionError(f"input channels {c} not divisible by groups {spec.groups}")
    icg = c // spec.groups
    ocg = spec.out_channels // spec.groups
    if w.shape != (spec.out_channels, icg, spec.kernel_h, spec.kernel_w):
        raise ExecutionError(
            f"weight shape {w.shape} does not match spec "
            f"({spec.out_channels}, {icg}, {spec.kernel_h}, {spec.kernel_w})")
    oh, ow = _conv_geometry(x.data, spec)
    xp = np.pad(x.data.astype(np.float64),
                ((0, 0), (0, 0), (spec.pad[0], spec.pad[0]), (spec.pad[1], spec.pad[1])))
    w64 = w.astype(np.float64)
    out = np.zeros((n, spec.out_channels, oh, ow), dtype=np.float64)
    for g in range(spec.groups):
        xg = xp[:, g * icg:(g + 1) * icg]
        wg = w64[g * ocg:(g + 1) * ocg]
        acc = out[:, g * ocg:(g + 1) * ocg]
        for i in range(spec.kernel_h):
            for j in range(spec.kernel_w):
                patch = _tap_view(xg, i, j, spec, oh, ow)
                acc += np.einsum("nchw,oc->nohw", patch, wg[:, :, i, j])
    if "bias" in weights:
        out += weights["bias"].astype(np.float64)[None, :, None, None]
    return Tensor(out.astype(np.float32))


def depthwise_conv2d(x: Tensor, spec: ConvSpec, weights: dict[str, np.ndarray]) -> Tensor:
    """Per-channel spatial convolution (groups == in == out channels)."""
    w = weights["weight"]
    n, c, _, _ = x.data.shape
    if not (spec.groups == c == spec.out_channels):
        raise ExecutionError(
            f"depthwise requires groups == in == out channels, got groups={spec.groups}, in={c}, out={spec.out_channels}")
    if w.shape != (c, 1, spec.kernel_h, spec.kernel_w):
        raise ExecutionError(f"weight shape {w.shape} does not match (C, 1, kh, kw)")
    oh, ow = _conv_geometry(x.data, spec)
    xp = np.pad(x.data.astype(np.float64),
                ((0, 0), (0, 0), (spec.pad[0], spec.pad[0]), (spec.pad[1], spec.pad[1])))
    w64 = w.astype(np.float64)
    out = np.zeros((n, c, oh, ow), dtype=np.float64)
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            out += _tap_view(xp, i, j, spec, oh, ow) * w64[None, :, 0, i, j, None, None]
    if "bias" in weights:
        out += weights["bias"].astype(np.float64)[None, :, None, None]
    return Tensor(out.astype(np.float32))


def batch_norm(x: Tensor, params: dict[str, np.ndarray], epsilon: float) -> Tensor:
    """Inference-mode normalization: gamma * (x - mean) / sqrt(var + eps) + beta."""
    c = x.data.shape[1]
    for name in ("gamma", "beta", "mean", "variance"):
        if params[name].shape != (c,):
            raise ExecutionError(f"{name} must have shape ({c},), got {params[name].shape}")
    var = params["variance"].astype(np.float64) + epsilon
    if np.any(var <= 0):
        raise ExecutionError("variance + epsilon must be positive")
    inv = 1.0 / np.sqrt(var)
    x64 = x.data.astype(np.float64)
    out = (x64 - params["mean"].astype(np.float64)[None, :, None, None]) * inv[None, :, None, None]
    out = out * params["gamma"].astype(np.float64)[None, :, None, None] \
        + params["beta"].astype(np.float64)[None, :, None, None]
    return Tensor(out.astype(np.float32))


def _pool(x: Tensor, spec: PoolSpec, mode: str) -> Tensor:
    oh, ow = _conv_geometry(x.data, spec)
    n, c = x.data.shape[:2]
    ph, pw = spec.pad
    if mode == "max":
        fill = -np.inf
    else:
        fill = 0.0
    xp = np.pad(x.data.astype(np.float64), ((0, 0), (0, 0), (ph, ph), (pw, pw)),
                constant_values=fill)
    kh, kw = spec.kernel
    if mode == "max":
        out = np.full((n, c, oh, ow), -np.inf)
        for i in range(kh):
            for j in range(kw):
                np.maximum(out, _tap_view(xp, i, j, spec, oh, ow), out=out)
    else:
        # average over in-bounds taps only: padding contributes neither sum
        # nor count
        ones = np.pad(np.ones(x.data.shape[2:]), ((ph, ph), (pw, pw)))[None, None]
        out = np.zeros((n, c, oh, ow))
        cnt = np.zeros((1, 1, oh, ow))
        for i in range(kh):
            for j in range(kw):
                out += _tap_view(xp, i, j, spec, oh, ow)
                cnt += _tap_view(ones, i, j, spec, oh, ow)
        out /= np.maximum(cnt, 1.0)
    return Tensor(out.astype(np.float32))


def relu(x: Tensor) -> Tensor:
    return Tensor(np.maximum(x.data, 0.0))


def softmax_channels(x: Tensor) -> Tensor:
    x64 = x.data.astype(np.float64)
    x64 = x64 - x64.max(axis=1, keepdims=True)
    e = np.exp(x64)
    return Tensor((e / e.sum(axis=1, keepdims=True)).astype(np.float32))


def _node_mac_count(kind: str, spec, in_c: int, out_shape: TensorShape) -> int:
    """Multiplies the reference kernels actually perform for one sample
    (padded zero taps included; the tap loops never skip them)."""
    if kind in ("conv", "depthwise_conv"):
        return (out_shape.c * out_shape.h * out_shape.w
                * (in_c // spec.groups) * spec.kernel_h * spec.kernel_w)
    if kind == "batch_norm":
        # (x - mean) * inv_std then * gamma: two multiplies per element
        return 2 * out_shape.c * out_shape.h * out_shape.w
    return 0


def run(graph: Graph, weights: WeightStore, x: Tensor, *,
        return_all: bool = False,
        mac_tally: dict[str, int] | None = None) -> dict[str, Tensor]:
    """Execute the graph in topological order.

    Returns tensors for ``graph.output_ids`` (or every node with
    ``return_all``). ``mac_tally``, when given, is filled with the per-node
    multiply count actually performed for one sample.
    """
    issues = validate(graph)
    if issues:
        raise ExecutionError("invalid graph: " + "; ".join(str(i) for i in issues))
    if x.shape != graph.input_shape:
        raise ExecutionError(f"input shape {x.shape} does not match graph input {graph.input_shape}")
    problems = weights.validate_against(graph)
    if problems:
        raise ExecutionError("incomplete weights: " + "; ".join(problems))

    acts: dict[str, Tensor] = {INPUT_ID: x}
    for node in graph.topo_order():
        ins = [acts[src] for src in node.inputs]
        try:
            if node.kind == "conv":
                out = conv2d(ins[0], node.spec, weights.layer(node.id))
            elif node.kind == "depthwise_conv":
                out = depthwise_conv2d(ins[0], node.spec, weights.layer(node.id))
            elif node.kind == "batch_norm":
                out = batch_norm(ins[0], weights.layer(node.id), node.spec.epsilon)
            elif node.kind == "relu":
                out = relu(ins[0])
            elif node.kind == "max_pool":
                out = _pool(ins[0], node.spec, "max")
            elif node.kind == "avg_pool":
                out = _pool(ins[0], node.spec, "avg")
            elif node.kind == "eltwise_add":
                acc = ins[0].data.astype(np.float64)
                for t in ins[1:]:
                    if t.data.shape != ins[0].data.shape:
                        raise ExecutionError(f"add input shapes differ: {ins[0].data.shape} vs {t.data.shape}")
                    acc = acc + t.data
                out = Tensor(acc.astype(np.float32))
            elif node.kind == "concat":
                out = Tensor(np.concatenate([t.data for t in ins], axis=1))
            elif node.kind == "softmax":
                out = softmax_channels(ins[0])
            else:
                raise ExecutionError(f"unhandled kind {node.kind}")
        except (ExecutionError, KeyError) as e:
            raise ExecutionError(f"layer {node.id!r}: {e}") from e
        acts[node.id] = out
        if mac_tally is not None:
            mac_tally[node.id] = _node_mac_count(node.kind, node.spec,
                                                 ins[0].shape.c if ins else 0, out.shape)
    if return_all:
        del acts[INPUT_ID]
        return acts
    return {out_id: acts[out_id] for out_id in graph.output_ids}


# ---------------------------------------------------------------------------
# Binary file formats
# ---------------------------------------------------------------------------

_TENSOR_MAGIC = b"TNSR"
_WEIGHTS_MAGIC = b"WSTR"
_FORMAT_VERSION = 1


def save_tensor(path, tensor: Tensor) -> None:
    """magic "TNSR", u32 version, u32 rank, u32 dims, f32 data; little-endian."""
    arr = tensor.data
    with open(path, "wb") as f:
        f.write(_TENSOR_MAGIC)
        f.write(struct.pack("<II", _FORMAT_VERSION, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.astype("<f4").tobytes())


def load_tensor(path) -> Tensor:
    with open(path, "rb") as f:
        data = f.read()
    try:
        if data[:4] != _TENSOR_MAGIC:
            raise ExecutionError(f"{path}: bad magic, not a tensor file")
        version, rank = struct.unpack_from("<II", data, 4)
        if version != _FORMAT_VERSION:
            raise ExecutionError(f"{path}: unsupported version {version}")
        dims = struct.unpack_from(f"<{rank}I", data, 12)
        arr = np.frombuffer(data, dtype="<f4", offset=12 + 4 * rank).reshape(dims)
    except (struct.error, ValueError) as e:
        raise ExecutionError(f"{path}: truncated or corrupt tensor file: {e}") from e
    return Tensor(arr.copy())


def save_weights(path, store: WeightStore) -> None:
    """magic "WSTR", u32 version, u32 count, then per entry: u32 name length,
    UTF-8 "layerid/tensorname", u32 rank, u32 dims, f32 data."""
    names = sorted((layer, name) for layer, tensors in store.entries.items() for name in tensors)
    with open(path, "wb") as f:
        f.write(_WEIGHTS_MAGIC)
        f.write(struct.pack("<II", _FORMAT_VERSION, len(names)))
        for layer, name in names:
            arr = store.get(layer, name)
            full = f"{layer}/{name}".encode("utf-8")
            f.write(struct.pack("<I", len(full)))
            f.write(full)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f4").tobytes())


def load_weights(path) -> WeightStore:
    with open(path, "rb") as f:
        data = f.read()
    store = WeightStore()
    try:
        if data[:4] != _WEIGHTS_MAGIC:
            raise ExecutionError(f"{path}: bad magic, not a weight-store file")
        version, count = struct.unpack_from("<II", data, 4)
        if version != _FORMAT_VERSION:
            raise ExecutionError(f"{path}: unsupported version {version}")
        off = 12
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", data, off)
            off += 4
            full = data[off:off + name_len].decode("utf-8")
            off += name_len
            layer, _, name = full.partition("/")
            if not layer or not name:
                raise ExecutionError(f"{path}: malformed entry name {full!r}")
            (rank,) = struct.unpack_from("<I", data, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            nbytes = 4 * int(np.prod(dims)) if rank else 4
            arr = np.frombuffer(data, dtype="<f4", count=int(np.prod(dims)), offset=off).reshape(dims)
            off += nbytes
            store.set(layer, name, arr.copy())
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise ExecutionError(f"{path}: truncated or corrupt weight-store file: {e}") from e
    return store
