"""Immutable computation-graph IR for small convolutional detection networks.

A :class:`Graph` is an acyclic list of :class:`LayerNode` values wired by
producer ids. The reserved id ``"input"`` names the network input tensor.
Graphs are plain frozen values: every analysis here (validation, shape
inference, receptive fields, residual coupling) is a pure function and safe
to call concurrently on shared graphs.

All shape math uses (n, c, h, w) semantics. Pooling uses floor (ceil-mode
off); conv/pool output spatial size is
``floor((in + 2*pad - (dilation*(kernel-1)+1)) / stride) + 1``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields

INPUT_ID = "input"

LAYER_KINDS = frozenset({
    "conv", "depthwise_conv", "batch_norm", "relu",
    "max_pool", "avg_pool", "eltwise_add", "concat", "softmax",
})

SPATIAL_KINDS = frozenset({"conv", "depthwise_conv", "max_pool", "avg_pool"})
CONV_KINDS = frozenset({"conv", "depthwise_conv"})

# Unary ops that pass channels through untouched (spatial size may change
# for pools); channel selections and masks propagate through these.
CHANNEL_PRESERVING_UNARY = frozenset({"batch_norm", "relu", "softmax", "max_pool", "avg_pool"})


class GraphFormatError(ValueError):
    """Malformed graph document (bad JSON schema, unknown field, bad value)."""


class ShapeInferenceError(ValueError):
    """A layer produced an impossible shape; the message names the layer."""


def _pair(v, name: str) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ValueError(f"{name} must be an int or a (h, w) pair, got {v!r}")
        h, w = int(v[0]), int(v[1])
    else:
        h = w = int(v)
    if h < 0 or w < 0:
        raise ValueError(f"{name} must be non-negative, got {v!r}")
    return (h, w)


def _positive_pair(v, name: str) -> tuple[int, int]:
    p = _pair(v, name)
    if p[0] < 1 or p[1] < 1:
        raise ValueError(f"{name} must be >= 1, got {v!r}")
    return p


@dataclass(frozen=True)
class TensorShape:
    """Dense 4-D tensor shape: batch, channels, height, width."""

    n: int
    c: int
    h: int
    w: int

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"TensorShape.{f.name} must be an int >= 1, got {v!r}")

    def nelems(self) -> int:
        return self.n * self.c * self.h * self.w

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.n, self.c, self.h, self.w)


@dataclass(frozen=True)
class ConvSpec:
    """Convolution hyperparameters.

    stride/pad/dilation accept an int or a (h, w) pair and are stored as
    pairs. The effective kernel extent per axis is dilation*(kernel-1)+1.
    """

    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: tuple[int, int] = (1, 1)
    pad: tuple[int, int] = (0, 0)
    dilation: tuple[int, int] = (1, 1)
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self):
        if self.out_channels < 1:
            raise ValueError(f"out_channels must be >= 1, got {self.out_channels}")
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ValueError(f"kernel must be >= 1, got {self.kernel_h}x{self.kernel_w}")
        if self.groups < 1:
            raise ValueError(f"groups must be >= 1, got {self.groups}")
        object.__setattr__(self, "stride", _positive_pair(self.stride, "stride"))
        object.__setattr__(self, "pad", _pair(self.pad, "pad"))
        object.__setattr__(self, "dilation", _positive_pair(self.dilation, "dilation"))

    def effective_kernel(self) -> tuple[int, int]:
        return (self.dilation[0] * (self.kernel_h - 1) + 1,
                self.dilation[1] * (self.kernel_w - 1) + 1)


@dataclass(frozen=True)
class PoolSpec:
    """Pooling window parameters. Dilation is honored so pools survive
    stride-to-dilation rewrites; it defaults to 1."""

    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)
    pad: tuple[int, int] = (0, 0)
    dilation: tuple[int, int] = (1, 1)

    def __post_init__(self):
        object.__setattr__(self, "kernel", _positive_pair(self.kernel, "kernel"))
        object.__setattr__(self, "stride", _positive_pair(self.stride, "stride"))
        object.__setattr__(self, "pad", _pair(self.pad, "pad"))
        object.__setattr__(self, "dilation", _positive_pair(self.dilation, "dilation"))

    def effective_kernel(self) -> tuple[int, int]:
        return (self.dilation[0] * (self.kernel[0] - 1) + 1,
                self.dilation[1] * (self.kernel[1] - 1) + 1)


@dataclass(frozen=True)
class BatchNormSpec:
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")


Spec = ConvSpec | PoolSpec | BatchNormSpec | None


@dataclass(frozen=True)
class LayerNode:
    """One layer: unique id, kind, ordered producer ids, kind-specific spec."""

    id: str
    kind: str
    inputs: tuple[str, ...]
    spec: Spec = None

    def __post_init__(self):
        if not self.id or "/" in self.id:
            raise ValueError(f"layer id must be non-empty and '/'-free, got {self.id!r}")
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r} (layer {self.id!r})")
        object.__setattr__(self, "inputs", tuple(self.inputs))


@dataclass(frozen=True)
class Graph:
    """Immutable DAG of layers. ``output_ids`` name the tensors consumed by
    whatever sits after the network (e.g. detection decoding)."""

    nodes: tuple[LayerNode, ...]
    input_shape: TensorShape
    output_ids: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "output_ids", tuple(self.output_ids))

    def node(self, node_id: str) -> LayerNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(f"no layer named {node_id!r}")

    def has_node(self, node_id: str) -> bool:
        return any(n.id == node_id for n in self.nodes)

    def node_map(self) -> dict[str, LayerNode]:
        return {n.id: n for n in self.nodes}

    def consumers(self, node_id: str) -> list[LayerNode]:
        return [n for n in self.nodes if node_id in n.inputs]

    def topo_order(self) -> list[LayerNode]:
        """Deterministic topological order (declaration order among ready
        nodes). Raises GraphFormatError on cycles or dangling inputs."""
        known = {INPUT_ID} | {n.id for n in self.nodes}
        for n in self.nodes:
            for src in n.inputs:
                if src not in known:
                    raise GraphFormatError(f"layer {n.id!r} references missing input {src!r}")
        done = {INPUT_ID}
        order: list[LayerNode] = []
        pending = list(self.nodes)
        while pending:
            progressed = False
            remaining = []
            for n in pending:
                if all(src in done for src in n.inputs):
                    order.append(n)
                    done.add(n.id)
                    progressed = True
                else:
                    remaining.append(n)
            if not progressed:
                cyc = ", ".join(n.id for n in remaining)
                raise GraphFormatError(f"cycle involving layers: {cyc}")
            pending = remaining
        return order


@dataclass(frozen=True)
class CoupledGroup:
    """Convolutions whose outputs meet at elementwise adds and therefore
    share one channel mask. ``frozen`` marks groups whose add chain also
    draws on the graph input or a concat, so no consistent mask exists."""

    member_layer_ids: frozenset[str]
    frozen: bool = False


@dataclass(frozen=True)
class ReceptiveField:
    """Input-pixel extent and stride of one output activation."""

    size_h: int
    size_w: int
    stride_h: int
    stride_w: int


@dataclass(frozen=True)
class GraphIssue:
    layer_id: str
    message: str

    def __str__(self):
        return f"[{self.layer_id}] {self.message}"


def _spatial_out(size: int, pad: int, eff_kernel: int, stride: int) -> int:
    return (size + 2 * pad - eff_kernel) // stride + 1


def _infer_node_shape(node: LayerNode, in_shapes: list[TensorShape]) -> TensorShape:
    """Shape rule for one node. Raises ShapeInferenceError on violations."""
    def err(msg: str):
        raise ShapeInferenceError(f"layer {node.id!r}: {msg}")

    if node.kind in CONV_KINDS:
        (s,) = in_shapes
        spec: ConvSpec = node.spec
        if spec.groups == 0 or s.c % spec.groups != 0:
            err(f"groups {spec.groups} does not divide input channels {s.c}")
        if spec.out_channels % spec.groups != 0:
            err(f"groups {spec.groups} does not divide out_channels {spec.out_channels}")
        if node.kind == "depthwise_conv" and not (spec.groups == s.c == spec.out_channels):
            err(f"depthwise requires groups == in == out channels, got groups={spec.groups}, in={s.c}, out={spec.out_channels}")
        ekh, ekw = spec.effective_kernel()
        oh = _spatial_out(s.h, spec.pad[0], ekh, spec.stride[0])
        ow = _spatial_out(s.w, spec.pad[1], ekw, spec.stride[1])
        if oh < 1 or ow < 1:
            err(f"non-positive output size {oh}x{ow} for input {s.h}x{s.w}")
        return TensorShape(s.n, spec.out_channels, oh, ow)

    if node.kind in ("max_pool", "avg_pool"):
        (s,) = in_shapes
        spec: PoolSpec = node.spec
        ekh, ekw = spec.effective_kernel()
        oh = _spatial_out(s.h, spec.pad[0], ekh, spec.stride[0])
        ow = _spatial_out(s.w, spec.pad[1], ekw, spec.stride[1])
        if oh < 1 or ow < 1:
            err(f"non-positive output size {oh}x{ow} for input {s.h}x{s.w}")
        return TensorShape(s.n, s.c, oh, ow)

    if node.kind in ("batch_norm", "relu", "softmax"):
        (s,) = in_shapes
        return s

    if node.kind == "eltwise_add":
        first = in_shapes[0]
        for s in in_shapes[1:]:
            if s != first:
                if s.c != first.c:
                    err(f"channel mismatch across add inputs: {first.c} vs {s.c}")
                err(f"shape mismatch across add inputs: {first} vs {s}")
        return first

    if node.kind == "concat":
        first = in_shapes[0]
        for s in in_shapes[1:]:
            if (s.n, s.h, s.w) != (first.n, first.h, first.w):
                err(f"concat inputs disagree on n/h/w: {first} vs {s}")
        return TensorShape(first.n, sum(s.c for s in in_shapes), first.h, first.w)

    raise AssertionError(f"unhandled kind {node.kind}")


_ARITY = {"conv": 1, "depthwise_conv": 1, "batch_norm": 1, "relu": 1,
          "max_pool": 1, "avg_pool": 1, "softmax": 1, "eltwise_add": None,
          "concat": None}
_SPEC_TYPE = {"conv": ConvSpec, "depthwise_conv": ConvSpec,
              "max_pool": PoolSpec, "avg_pool": PoolSpec,
              "batch_norm": BatchNormSpec}


def validate(graph: Graph) -> list[GraphIssue]:
    """Collect structural problems; empty list means the graph is well formed.

    Reports every violation it can reach (duplicate/dangling ids, cycles,
    bad arity, missing specs, shape-incompatible adds/concats, group
    mismatches) rather than stopping at the first.
    """
    issues: list[GraphIssue] = []
    seen: set[str] = set()
    for n in graph.nodes:
        if n.id in seen or n.id == INPUT_ID:
            issues.append(GraphIssue(n.id, "duplicate layer id"))
        seen.add(n.id)

    known = seen | {INPUT_ID}
    for n in graph.nodes:
        for src in n.inputs:
            if src not in known:
                issues.append(GraphIssue(n.id, f"dangling input {src!r}"))
        expected = _ARITY.get(n.kind)
        if expected is not None and len(n.inputs) != expected:
            issues.append(GraphIssue(n.id, f"{n.kind} takes exactly {expected} input, got {len(n.inputs)}"))
        if n.kind in ("eltwise_add", "concat") and len(n.inputs) < 2:
            issues.append(GraphIssue(n.id, f"{n.kind} needs >= 2 inputs"))
        want = _SPEC_TYPE.get(n.kind)
        if want is not None and not isinstance(n.spec, want):
            issues.append(GraphIssue(n.id, f"{n.kind} requires a {want.__name__}"))
        elif want is None and n.spec is not None:
            issues.append(GraphIssue(n.id, f"{n.kind} takes no spec"))

    # outputs may name any layer or the graph input itself (passthrough)
    for out in graph.output_ids:
        if out not in known:
            issues.append(GraphIssue(out, "output id does not name a layer"))

    # Tolerant shape pass: skip nodes already flagged or fed by unresolved
    # producers so one upstream failure does not drown everything downstream.
    try:
        order = graph.topo_order()
    except GraphFormatError as e:
        issues.append(GraphIssue("<graph>", str(e)))
        return issues

    flagged = {i.layer_id for i in issues}
    shapes: dict[str, TensorShape] = {INPUT_ID: graph.input_shape}
    for n in order:
        if n.id in flagged:
            continue
        ins = [shapes.get(src) for src in n.inputs]
        if not ins or any(s is None for s in ins):
            continue
        try:
            shapes[n.id] = _infer_node_shape(n, ins)
        except ShapeInferenceError as e:
            issues.append(GraphIssue(n.id, str(e)))
    return issues


def infer_shapes(graph: Graph) -> dict[str, TensorShape]:
    """Map every layer id to its output shape. Requires a valid graph;
    raises ShapeInferenceError naming the first offending layer."""
    shapes: dict[str, TensorShape] = {INPUT_ID: graph.input_shape}
    for n in graph.topo_order():
        shapes[n.id] = _infer_node_shape(n, [shapes[src] for src in n.inputs])
    del shapes[INPUT_ID]
    return shapes


def receptive_field(graph: Graph, layer_id: str) -> ReceptiveField:
    """Input extent and stride of one activation of ``layer_id``.

    Composes per-layer (kernel, stride, dilation) along paths from the
    input; at multi-input nodes the maximum extent over paths is taken
    (conservative: branches merging at adds/concats have equal strides in
    any shape-valid graph).
    """
    if not graph.has_node(layer_id):
        raise KeyError(f"no layer named {layer_id!r}")
    # state per tensor: (rf_h, rf_w, jump_h, jump_w)
    state: dict[str, tuple[int, int, int, int]] = {INPUT_ID: (1, 1, 1, 1)}
    for n in graph.topo_order():
        ins = [state[src] for src in n.inputs]
        rf_h = max(s[0] for s in ins)
        rf_w = max(s[1] for s in ins)
        j_h = max(s[2] for s in ins)
        j_w = max(s[3] for s in ins)
        if n.kind in SPATIAL_KINDS:
            spec = n.spec
            ekh, ekw = spec.effective_kernel()
            rf_h += (ekh - 1) * j_h
            rf_w += (ekw - 1) * j_w
            j_h *= spec.stride[0]
            j_w *= spec.stride[1]
        state[n.id] = (rf_h, rf_w, j_h, j_w)
        if n.id == layer_id:
            return ReceptiveField(rf_h, rf_w, j_h, j_w)
    raise KeyError(f"no layer named {layer_id!r}")


def coupled_groups(graph: Graph) -> list[CoupledGroup]:
    """Sets of conv layers forced to share one pruning mask.

    Producers whose outputs meet at any eltwise_add (directly or through
    channel-preserving unary ops and further adds) form one group. A group
    is ``frozen`` when the add chain also draws on the graph input or a
    concat output (no conv owns those channels).
    """
    nodes = graph.node_map()

    def trace(tensor_id: str, members: set[str]) -> bool:
        """Walk upward to the convs owning the channels of ``tensor_id``.
        Returns False when ownership is untraceable (input/concat)."""
        if tensor_id == INPUT_ID:
            return False
        node = nodes[tensor_id]
        if node.kind in CONV_KINDS:
            members.add(node.id)
            return True
        if node.kind in CHANNEL_PRESERVING_UNARY:
            return trace(node.inputs[0], members)
        if node.kind == "eltwise_add":
            ok = True
            for src in node.inputs:
                ok = trace(src, members) and ok
            return ok
        return False  # concat: channel ownership is split

    raw: list[tuple[set[str], bool]] = []
    for n in graph.nodes:
        if n.kind != "eltwise_add":
            continue
        members: set[str] = set()
        ok = True
        for src in n.inputs:
            ok = trace(src, members) and ok
        if members:
            raw.append((members, not ok))

    # Merge overlapping groups (transitive closure over shared members).
    merged: list[tuple[set[str], bool]] = []
    for members, frozen in raw:
        acc, acc_frozen = set(members), frozen
        keep = []
        for m, f in merged:
            if m & acc:
                acc |= m
                acc_frozen = acc_frozen or f
            else:
                keep.append((m, f))
        keep.append((acc, acc_frozen))
        merged = keep

    order = {n.id: i for i, n in enumerate(graph.nodes)}
    merged.sort(key=lambda g: min(order[m] for m in g[0]))
    return [CoupledGroup(frozenset(m), f) for m, f in merged]


# ---------------------------------------------------------------------------
# JSON serialization
# ---------------------------------------------------------------------------

def _int_or_pair(p: tuple[int, int]):
    return p[0] if p[0] == p[1] else [p[0], p[1]]


def _spec_to_dict(node: LayerNode):
    s = node.spec
    if isinstance(s, ConvSpec):
        return {
            "out_channels": s.out_channels,
            "kernel_h": s.kernel_h,
            "kernel_w": s.kernel_w,
            "stride": _int_or_pair(s.stride),
            "pad": _int_or_pair(s.pad),
            "dilation": _int_or_pair(s.dilation),
            "groups": s.groups,
            "has_bias": s.has_bias,
        }
    if isinstance(s, PoolSpec):
        return {
            "kernel": _int_or_pair(s.kernel),
            "stride": _int_or_pair(s.stride),
            "pad": _int_or_pair(s.pad),
            "dilation": _int_or_pair(s.dilation),
        }
    if isinstance(s, BatchNormSpec):
        return {"epsilon": s.epsilon}
    return None


_CONV_KEYS = {"out_channels", "kernel_h", "kernel_w", "stride", "pad",
              "dilation", "groups", "has_bias"}
_POOL_KEYS = {"kernel", "stride", "pad", "dilation"}


def _spec_from_dict(kind: str, d, where: str) -> Spec:
    want = _SPEC_TYPE.get(kind)
    if want is None:
        if d not in (None, {}):
            raise GraphFormatError(f"{where}: kind {kind!r} takes no spec")
        return None
    if not isinstance(d, dict):
        raise GraphFormatError(f"{where}: missing spec object for kind {kind!r}")
    try:
        if want is ConvSpec:
            unknown = set(d) - _CONV_KEYS
            if unknown:
                raise GraphFormatError(f"{where}: unknown spec fields {sorted(unknown)}")
            for k in ("out_channels", "kernel_h", "kernel_w"):
                if k not in d:
                    raise GraphFormatError(f"{where}: spec missing field {k!r}")
            return ConvSpec(
                out_channels=int(d["out_channels"]),
                kernel_h=int(d["kernel_h"]),
                kernel_w=int(d["kernel_w"]),
                stride=d.get("stride", 1),
                pad=d.get("pad", 0),
                dilation=d.get("dilation", 1),
                groups=int(d.get("groups", 1)),
                has_bias=bool(d.get("has_bias", False)),
            )
        if want is PoolSpec:
            unknown = set(d) - _POOL_KEYS
            if unknown:
                raise GraphFormatError(f"{where}: unknown spec fields {sorted(unknown)}")
            if "kernel" not in d:
                raise GraphFormatError(f"{where}: spec missing field 'kernel'")
            return PoolSpec(kernel=d["kernel"], stride=d.get("stride", 1),
                            pad=d.get("pad", 0), dilation=d.get("dilation", 1))
        unknown = set(d) - {"epsilon"}
        if unknown:
            raise GraphFormatError(f"{where}: unknown spec fields {sorted(unknown)}")
        return BatchNormSpec(epsilon=float(d.get("epsilon", 1e-5)))
    except ValueError as e:
        raise GraphFormatError(f"{where}: {e}") from e


def graph_to_dict(graph: Graph) -> dict:
    nodes = []
    for n in graph.nodes:
        entry = {"id": n.id, "kind": n.kind, "inputs": list(n.inputs)}
        spec = _spec_to_dict(n)
        if spec is not None:
            entry["spec"] = spec
        nodes.append(entry)
    return {
        "input_shape": list(graph.input_shape.as_tuple()),
        "nodes": nodes,
        "outputs": list(graph.output_ids),
    }


def graph_from_dict(doc: dict) -> Graph:
    if not isinstance(doc, dict):
        raise GraphFormatError("graph document must be a JSON object")
    unknown = set(doc) - {"input_shape", "nodes", "outputs"}
    if unknown:
        raise GraphFormatError(f"unknown top-level fields {sorted(unknown)}")
    for k in ("input_shape", "nodes", "outputs"):
        if k not in doc:
            raise GraphFormatError(f"missing top-level field {k!r}")
    ish = doc["input_shape"]
    if not (isinstance(ish, list) and len(ish) == 4):
        raise GraphFormatError(f"input_shape must be [n, c, h, w], got {ish!r}")
    try:
        input_shape = TensorShape(*(int(v) for v in ish))
    except ValueError as e:
        raise GraphFormatError(f"input_shape: {e}") from e

    nodes = []
    for i, nd in enumerate(doc["nodes"]):
        where = f"nodes[{i}]"
        if not isinstance(nd, dict):
            raise GraphFormatError(f"{where}: must be an object")
        unknown = set(nd) - {"id", "kind", "inputs", "spec"}
        if unknown:
            raise GraphFormatError(f"{where}: unknown fields {sorted(unknown)}")
        for k in ("id", "kind", "inputs"):
            if k not in nd:
                raise GraphFormatError(f"{where}: missing field {k!r}")
        try:
            nodes.append(LayerNode(
                id=str(nd["id"]),
                kind=str(nd["kind"]),
                inputs=tuple(str(s) for s in nd["inputs"]),
                spec=_spec_from_dict(str(nd["kind"]), nd.get("spec"), where),
            ))
        except ValueError as e:
            raise GraphFormatError(f"{where}: {e}") from e

    return Graph(nodes=tuple(nodes), input_shape=input_shape,
                 output_ids=tuple(str(s) for s in doc["outputs"]))


def save_graph(path, graph: Graph) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(graph_to_dict(graph), f, indent=2, sort_keys=True)
        f.write("\n")


def load_graph(path) -> Graph:
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise GraphFormatError(f"{path}: invalid JSON: {e}") from e
    return graph_from_dict(doc)


# ---------------------------------------------------------------------------
# Structural comparison
# ---------------------------------------------------------------------------

def subgraph_signature(graph: Graph, node_id: str, *, include_channels: bool = True,
                       skip_kinds: frozenset[str] = frozenset(),
                       bypass_pointwise_shortcuts: bool = False):
    """Canonical nested-tuple signature of the cone feeding ``node_id``.

    Two graphs match structurally at given outputs iff signatures are equal,
    independent of layer naming. ``skip_kinds`` treats listed unary kinds as
    transparent. With ``bypass_pointwise_shortcuts``, a 1x1 stride-1
    same-channel conv feeding an add is treated as a wire, so rewritten
    trunks compare equal to natively built ones whose blocks dropped the
    now-redundant projection.
    """
    nodes = graph.node_map()
    memo: dict[str, tuple] = {}

    def chans(tensor_id: str) -> int:
        if tensor_id == INPUT_ID:
            return graph.input_shape.c
        n = nodes[tensor_id]
        if n.kind in CONV_KINDS:
            return n.spec.out_channels
        if n.kind == "concat":
            return sum(chans(s) for s in n.inputs)
        return chans(n.inputs[0])

    def sig(tensor_id: str, into_add: bool = False):
        if tensor_id == INPUT_ID:
            return ("input",)
        if tensor_id in memo and not into_add:
            return memo[tensor_id]
        n = nodes[tensor_id]
        if n.kind in skip_kinds and n.kind in CHANNEL_PRESERVING_UNARY:
            return sig(n.inputs[0], into_add)
        if (bypass_pointwise_shortcuts and into_add and n.kind == "conv"
                and n.spec.kernel_h == n.spec.kernel_w == 1
                and n.spec.stride == (1, 1) and n.spec.groups == 1
                # with channels compared, only width-preserving projections
                # are redundant; without, any pointwise mix is a wire
                and (not include_channels
                     or n.spec.out_channels == chans(n.inputs[0]))):
            return sig(n.inputs[0], False)
        if n.kind == "eltwise_add":
            parts = tuple(sorted(sig(s, True) for s in n.inputs))
            out = ("eltwise_add", parts)
        else:
            spec = _spec_to_dict(n)
            if spec is not None and not include_channels:
                spec.pop("out_channels", None)
            spec_key = tuple(sorted(spec.items())) if spec else ()
            spec_key = tuple((k, tuple(v) if isinstance(v, list) else v) for k, v in spec_key)
            parts = tuple(sig(s) for s in n.inputs)
            out = (n.kind, spec_key, parts)
        memo[tensor_id] = out
        return out

    return sig(node_id)
