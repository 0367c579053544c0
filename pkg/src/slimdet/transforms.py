"""Graph-to-graph compression passes.

Every pass is pure: it returns fresh graph/weight values and leaves its
inputs untouched, so repeated application with identical arguments is
idempotent and concurrent use is safe. Passes that change numerics come
with an executor-checkable contract (see the pipeline runner's equivalence
summaries):

* fold_bn            - output preserving
* rewrite_stride_to_dilation - output preserving at the subsampled grid
* pca_decompose      - output preserving at full rank
* channel selection  - equivalent to zero-masking the dropped channels

Fine-tuning between pruning rounds is deliberately a no-op hook recorded in
the history: this toolkit performs no training, so the accuracy-recovery
half of iterative pruning is out of its hands.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .cost import report as cost_report
from .executor import WeightStore
from .graph import (
    CHANNEL_PRESERVING_UNARY, CONV_KINDS, INPUT_ID, SPATIAL_KINDS,
    ConvSpec, Graph, LayerNode, PoolSpec, coupled_groups, infer_shapes,
)

logger = logging.getLogger(__name__)


class TransformError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelSelection:
    """Output channels to keep for one conv layer."""

    layer_id: str
    kept_indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(int(i) for i in self.kept_indices)
        if not idx:
            raise ValueError(f"selection for {self.layer_id!r} keeps no channels")
        if any(b <= a for a, b in zip(idx, idx[1:])) or idx[0] < 0:
            raise ValueError(f"kept_indices must be strictly increasing and >= 0, got {idx}")
        object.__setattr__(self, "kept_indices", idx)


@dataclass(frozen=True)
class PruneSchedule:
    """Per-round pruning fractions. Layers in the first (topological) half of
    the prunable list lose first_half_fraction of their filters, the rest
    second_half_fraction; target_macs switches iteration to a budget."""

    first_half_fraction: float = 0.05
    second_half_fraction: float = 0.10
    iterations: int = 1
    target_macs: int | None = None

    def __post_init__(self):
        for name in ("first_half_fraction", "second_half_fraction"):
            v = getattr(self, name)
            if not (0.0 <= v < 1.0):
                raise ValueError(f"{name} must be in [0, 1), got {v}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass(frozen=True)
class FilterMetric:
    """Per-output-channel L1 weight mass of one conv layer."""

    layer_id: str
    values: tuple[float, ...]

    def __post_init__(self):
        if any(v < 0 for v in self.values):
            raise ValueError("metric values must be >= 0")


def _rebuild(graph: Graph, nodes, outputs=None) -> Graph:
    return Graph(tuple(nodes), graph.input_shape,
                 tuple(outputs) if outputs is not None else graph.output_ids)


def _rewire(nodes, old: str, new: str):
    out = []
    for n in nodes:
        if old in n.inputs:
            n = LayerNode(n.id, n.kind, tuple(new if s == old else s for s in n.inputs), n.spec)
        out.append(n)
    return out


# ---------------------------------------------------------------------------
# Batch-norm folding
# ---------------------------------------------------------------------------

def fold_bn(graph: Graph, weights: WeightStore) -> tuple[Graph, WeightStore]:
    """Absorb inference-mode batch norms into their producing convolutions.

    A norm folds when its single input is a conv/depthwise layer consumed by
    nothing else; each fold scales that conv's filters by
    gamma/sqrt(var+eps) and rewrites its bias, so outputs are preserved.
    Norms that cannot fold (input is not a conv, or the conv feeds other
    consumers) are left in place and logged.
    """
    nodes = list(graph.nodes)
    outputs = list(graph.output_ids)
    new_weights = weights.copy()
    skipped: dict[str, str] = {}
    changed = True
    while changed:
        changed = False
        by_id = {n.id: n for n in nodes}
        for bn in list(nodes):
            if bn.kind != "batch_norm":
                continue
            src = bn.inputs[0]
            producer = by_id.get(src)
            if producer is None or producer.kind not in CONV_KINDS:
                skipped[bn.id] = f"input {src!r} is not a conv"
                continue
            others = [c for c in nodes if src in c.inputs and c.id != bn.id]
            if others or src in outputs:
                skipped[bn.id] = f"conv {src!r} has other consumers"
                continue
            skipped.pop(bn.id, None)

            eps = bn.spec.epsilon
            gamma = new_weights.get(bn.id, "gamma").astype(np.float64)
            beta = new_weights.get(bn.id, "beta").astype(np.float64)
            mean = new_weights.get(bn.id, "mean").astype(np.float64)
            var = new_weights.get(bn.id, "variance").astype(np.float64)
            scale = gamma / np.sqrt(var + eps)
            w = new_weights.get(producer.id, "weight").astype(np.float64)
            b = (new_weights.get(producer.id, "bias").astype(np.float64)
                 if producer.spec.has_bias else np.zeros(producer.spec.out_channels))
            new_weights.set(producer.id, "weight", (w * scale[:, None, None, None]).astype(np.float32))
            new_weights.set(producer.id, "bias", (scale * (b - mean) + beta).astype(np.float32))
            new_weights.drop_layer(bn.id)

            spec = producer.spec
            nodes = [LayerNode(n.id, n.kind, n.inputs,
                               ConvSpec(spec.out_channels, spec.kernel_h, spec.kernel_w,
                                        spec.stride, spec.pad, spec.dilation, spec.groups, True))
                     if n.id == producer.id else n for n in nodes]
            nodes = [n for n in nodes if n.id != bn.id]
            nodes = _rewire(nodes, bn.id, producer.id)
            outputs = [producer.id if o == bn.id else o for o in outputs]
            changed = True
            break
    for bn_id, reason in sorted(skipped.items()):
        logger.warning("fold_bn: %r left in place (%s)", bn_id, reason)
    return _rebuild(graph, nodes, outputs), new_weights


# ---------------------------------------------------------------------------
# Stride removal / dilation rewrite
# ---------------------------------------------------------------------------

def stride_removal_multipliers(graph: Graph, reduction_layer_ids) -> dict[str, tuple[int, int]]:
    """Per-tensor grid-density multiplier after removing the named strides:
    the product of removed strides crossed on the path from the input.
    Raises when paths disagree (no consistent rewrite exists)."""
    removed = set(reduction_layer_ids)
    by_id = graph.node_map()
    for rid in removed:
        node = by_id.get(rid)
        if node is None or node.kind not in SPATIAL_KINDS:
            raise TransformError(f"reduction layer {rid!r} not found or not spatial")
        if node.spec.stride == (1, 1):
            raise TransformError(f"reduction layer {rid!r} already has stride 1")
    mult: dict[str, tuple[int, int]] = {INPUT_ID: (1, 1)}
    for n in graph.topo_order():
        ins = [mult[s] for s in n.inputs]
        if any(m != ins[0] for m in ins):
            raise TransformError(
                f"layer {n.id!r}: inconsistent stride-removal multipliers across inputs {ins}")
        m = ins[0]
        if n.id in removed:
            m = (m[0] * n.spec.stride[0], m[1] * n.spec.stride[1])
        mult[n.id] = m
    return mult


def rewrite_stride_to_dilation(graph: Graph, reduction_layer_ids) -> Graph:
    """Remove spatial reductions and compensate downstream.

    Each named layer keeps its weights but drops to stride 1; every spatial
    layer strictly downstream has its dilation *and* padding multiplied by
    the product of removed strides crossed on the way, so the rewritten
    network computes the original outputs on a denser grid:
    original[y, x] == rewritten[y*s_total, x*s_total].
    """
    removed = set(reduction_layer_ids)
    mult = stride_removal_multipliers(graph, reduction_layer_ids)
    in_mult: dict[str, tuple[int, int]] = {}
    for n in graph.nodes:
        in_mult[n.id] = mult[n.inputs[0]] if n.inputs else (1, 1)

    new_nodes = []
    for n in graph.nodes:
        if n.kind not in SPATIAL_KINDS:
            new_nodes.append(n)
            continue
        m = in_mult[n.id]
        spec = n.spec
        dilation = (spec.dilation[0] * m[0], spec.dilation[1] * m[1])
        pad = (spec.pad[0] * m[0], spec.pad[1] * m[1])
        stride = (1, 1) if n.id in removed else spec.stride
        if isinstance(spec, ConvSpec):
            spec = ConvSpec(spec.out_channels, spec.kernel_h, spec.kernel_w,
                            stride, pad, dilation, spec.groups, spec.has_bias)
        else:
            spec = PoolSpec(spec.kernel, stride, pad, dilation)
        new_nodes.append(LayerNode(n.id, n.kind, n.inputs, spec))
    return _rebuild(graph, new_nodes)


# ---------------------------------------------------------------------------
# Kernel subsampling
# ---------------------------------------------------------------------------

def _following_spatial_layer(graph: Graph, layer_id: str) -> str:
    """The unique spatial layer reached from ``layer_id`` through unary
    channel-preserving non-spatial ops. Raises when absent or ambiguous."""
    current = layer_id
    while True:
        consumers = graph.consumers(current)
        if len(consumers) != 1:
            raise TransformError(
                f"layer {layer_id!r} needs exactly one downstream spatial layer, "
                f"found {len(consumers)} consumers at {current!r}")
        nxt = consumers[0]
        if nxt.kind in SPATIAL_KINDS:
            return nxt.id
        if nxt.kind in ("batch_norm", "relu", "softmax"):
            current = nxt.id
            continue
        raise TransformError(
            f"layer {layer_id!r}: downstream {nxt.id!r} ({nxt.kind}) cannot absorb dilation")


def subsample_kernel(graph: Graph, weights: WeightStore, layer_id: str,
                     factor: int) -> tuple[Graph, WeightStore]:
    """Keep every factor-th kernel tap (starting at tap 0) of one conv and
    enlarge the next spatial layer's dilation so the composed receptive
    field is unchanged.

    The required dilation multiplier must come out integral; otherwise no
    exact compensation exists and the pass fails without touching anything.
    """
    if factor < 1:
        raise TransformError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return _rebuild(graph, graph.nodes), weights.copy()
    if not graph.has_node(layer_id):
        raise TransformError(f"layer {layer_id!r} not found")
    node = graph.node(layer_id)
    if node.kind not in CONV_KINDS:
        raise TransformError(f"layer {layer_id!r} is not a convolution")
    spec: ConvSpec = node.spec
    if spec.kernel_h < factor or spec.kernel_w < factor:
        raise TransformError(
            f"kernel {spec.kernel_h}x{spec.kernel_w} too small for factor {factor}")

    follower_id = _following_spatial_layer(graph, layer_id)
    follower = graph.node(follower_id)
    fspec = follower.spec
    fk = (fspec.kernel_h, fspec.kernel_w) if isinstance(fspec, ConvSpec) else fspec.kernel

    new_k = (math.ceil(spec.kernel_h / factor), math.ceil(spec.kernel_w / factor))
    mults = []
    for axis, (k_old, k_new) in enumerate(zip((spec.kernel_h, spec.kernel_w), new_k)):
        deficit = spec.dilation[axis] * (k_old - k_new)
        if deficit == 0:
            mults.append(1)
            continue
        denom = fspec.dilation[axis] * (fk[axis] - 1) * spec.stride[axis]
        if denom == 0:
            raise TransformError(
                f"follower {follower_id!r} has no spatial extent on axis {axis} "
                "to absorb the lost receptive field")
        if deficit % denom != 0:
            raise TransformError(
                f"receptive field cannot be preserved exactly: axis {axis} needs "
                f"dilation multiplier 1 + {deficit}/{denom}")
        mults.append(1 + deficit // denom)

    new_spec = ConvSpec(spec.out_channels, new_k[0], new_k[1], spec.stride,
                        spec.pad, spec.dilation, spec.groups, spec.has_bias)
    new_fdil = (fspec.dilation[0] * mults[0], fspec.dilation[1] * mults[1])
    if isinstance(fspec, ConvSpec):
        new_fspec = ConvSpec(fspec.out_channels, fspec.kernel_h, fspec.kernel_w,
                             fspec.stride, fspec.pad, new_fdil, fspec.groups, fspec.has_bias)
    else:
        new_fspec = PoolSpec(fspec.kernel, fspec.stride, fspec.pad, new_fdil)

    nodes = [LayerNode(n.id, n.kind, n.inputs,
                       new_spec if n.id == layer_id else new_fspec if n.id == follower_id else n.spec)
             for n in graph.nodes]
    new_weights = weights.copy()
    w = new_weights.get(layer_id, "weight")
    new_weights.set(layer_id, "weight", w[:, :, ::factor, ::factor].copy())
    return _rebuild(graph, nodes), new_weights


# ---------------------------------------------------------------------------
# Channel selection machinery
# ---------------------------------------------------------------------------

def compute_l1_metrics(weights: WeightStore, layer_id: str) -> FilterMetric:
    """Per-filter L1 norm (sum of absolute weight values; bias excluded)."""
    w = weights.get(layer_id, "weight").astype(np.float64)
    return FilterMetric(layer_id, tuple(np.abs(w).sum(axis=(1, 2, 3)).tolist()))


def _out_channels(graph: Graph) -> dict[str, int]:
    shapes = infer_shapes(graph)
    return {nid: s.c for nid, s in shapes.items()}


def _kept_output_map(graph: Graph, selections: dict[str, tuple[int, ...]]
                     ) -> dict[str, list[int]]:
    """Kept channel indices (in each tensor's original channel space) for
    every tensor after applying the selections."""
    chans = _out_channels(graph)
    km: dict[str, list[int]] = {INPUT_ID: list(range(graph.input_shape.c))}
    for n in graph.topo_order():
        if n.kind == "conv":
            if n.id in selections:
                kept = list(selections[n.id])
                if kept[-1] >= n.spec.out_channels:
                    raise TransformError(
                        f"selection for {n.id!r} references channel {kept[-1]} "
                        f">= out_channels {n.spec.out_channels}")
                km[n.id] = kept
            else:
                km[n.id] = list(range(n.spec.out_channels))
        elif n.kind == "depthwise_conv":
            if n.id in selections and list(selections[n.id]) != km[n.inputs[0]]:
                raise TransformError(
                    f"depthwise layer {n.id!r} cannot be selected independently of its input")
            km[n.id] = km[n.inputs[0]]
        elif n.kind in CHANNEL_PRESERVING_UNARY:
            km[n.id] = km[n.inputs[0]]
            if n.kind == "softmax" and len(km[n.id]) != chans[n.id]:
                raise TransformError(
                    f"cannot prune through softmax {n.id!r}: channel removal changes "
                    "the normalization")
        elif n.kind == "eltwise_add":
            first = km[n.inputs[0]]
            for src in n.inputs[1:]:
                if km[src] != first:
                    raise TransformError(
                        f"add {n.id!r}: coupled-group mask mismatch across inputs "
                        f"({n.inputs[0]!r} vs {src!r})")
            km[n.id] = first
        elif n.kind == "concat":
            merged = []
            offset = 0
            for src in n.inputs:
                src_orig = graph.input_shape.c if src == INPUT_ID else chans[src]
                merged.extend(offset + i for i in km[src])
                offset += src_orig
            km[n.id] = merged
        else:
            raise AssertionError(n.kind)
    return km


def _selection_dict(graph: Graph, selections) -> dict[str, tuple[int, ...]]:
    by_id = {}
    for sel in selections:
        if not graph.has_node(sel.layer_id):
            raise TransformError(f"selection references unknown layer {sel.layer_id!r}")
        if graph.node(sel.layer_id).kind not in CONV_KINDS:
            raise TransformError(f"selection target {sel.layer_id!r} is not a convolution")
        if sel.layer_id in by_id and by_id[sel.layer_id] != sel.kept_indices:
            raise TransformError(f"conflicting selections for {sel.layer_id!r}")
        by_id[sel.layer_id] = sel.kept_indices
    return by_id


def apply_selection(graph: Graph, weights: WeightStore, selections
                    ) -> tuple[Graph, WeightStore]:
    """Physically remove non-kept output channels.

    Selected convs lose weight rows/bias entries; every consumer's
    input-channel slices (conv columns, depthwise rows, norm parameters)
    shrink to match, through adds and concats. Coupled groups must carry
    identical selections.
    """
    sel = _selection_dict(graph, selections)
    km = _kept_output_map(graph, sel)
    chans = _out_channels(graph)

    new_nodes = []
    new_weights = WeightStore()
    for n in graph.topo_order():
        in_kept = km[n.inputs[0]] if n.inputs else []
        in_orig = (graph.input_shape.c if n.inputs and n.inputs[0] == INPUT_ID
                   else chans[n.inputs[0]] if n.inputs else 0)
        in_full = bool(n.inputs) and len(in_kept) == in_orig
        if n.kind == "conv":
            spec: ConvSpec = n.spec
            kept = km[n.id]
            if spec.groups != 1 and (len(kept) != spec.out_channels or not in_full):
                raise TransformError(
                    f"cannot reslice grouped conv {n.id!r} (groups={spec.groups})")
            w = weights.get(n.id, "weight")
            w = w[np.ix_(kept, in_kept)] if spec.groups == 1 else w.copy()
            new_weights.set(n.id, "weight", w)
            if spec.has_bias:
                new_weights.set(n.id, "bias", weights.get(n.id, "bias")[kept].copy())
            new_spec = ConvSpec(len(kept), spec.kernel_h, spec.kernel_w, spec.stride,
                                spec.pad, spec.dilation, spec.groups, spec.has_bias)
            new_nodes.append(LayerNode(n.id, n.kind, n.inputs, new_spec))
        elif n.kind == "depthwise_conv":
            spec = n.spec
            w = weights.get(n.id, "weight")[in_kept].copy()
            new_weights.set(n.id, "weight", w)
            if spec.has_bias:
                new_weights.set(n.id, "bias", weights.get(n.id, "bias")[in_kept].copy())
            new_spec = ConvSpec(len(in_kept), spec.kernel_h, spec.kernel_w, spec.stride,
                                spec.pad, spec.dilation, len(in_kept), spec.has_bias)
            new_nodes.append(LayerNode(n.id, n.kind, n.inputs, new_spec))
        elif n.kind == "batch_norm":
            for name in ("gamma", "beta", "mean", "variance"):
                new_weights.set(n.id, name, weights.get(n.id, name)[in_kept].copy())
            new_nodes.append(n)
        else:
            new_nodes.append(n)
    return _rebuild(graph, new_nodes), new_weights


def mask_channels(graph: Graph, weights: WeightStore, selections) -> WeightStore:
    """Zero the dropped channels' outgoing contributions without changing any
    shape: weight rows, biases, and the gamma/beta of every norm the dead
    channels flow through (so the channels stay exactly zero all the way to
    the convolutions that absorb them)."""
    sel = _selection_dict(graph, selections)
    _kept_output_map(graph, sel)  # same preconditions as apply_selection
    masked = weights.copy()

    def zero_rows(layer_id: str, idx):
        w = masked.get(layer_id, "weight").copy()
        w[idx] = 0.0
        masked.set(layer_id, "weight", w)
        if masked.has(layer_id, "bias"):
            b = masked.get(layer_id, "bias").copy()
            b[idx] = 0.0
            masked.set(layer_id, "bias", b)

    chans = _out_channels(graph)
    for layer_id, kept in sel.items():
        node = graph.node(layer_id)
        pruned = sorted(set(range(node.spec.out_channels)) - set(kept))
        if not pruned:
            continue
        zero_rows(layer_id, pruned)
        seen: set[tuple[str, tuple[int, ...]]] = set()
        queue: list[tuple[str, tuple[int, ...]]] = [(layer_id, tuple(pruned))]
        while queue:
            tid, idx = queue.pop()
            if (tid, idx) in seen:
                continue
            seen.add((tid, idx))
            for consumer in graph.consumers(tid):
                if consumer.kind == "batch_norm":
                    for name in ("gamma", "beta"):
                        arr = masked.get(consumer.id, name).copy()
                        arr[list(idx)] = 0.0
                        masked.set(consumer.id, name, arr)
                    queue.append((consumer.id, idx))
                elif consumer.kind in ("relu", "max_pool", "avg_pool", "eltwise_add"):
                    queue.append((consumer.id, idx))
                elif consumer.kind == "softmax":
                    raise TransformError(
                        f"cannot mask through softmax {consumer.id!r}")
                elif consumer.kind == "concat":
                    offset = 0
                    for src in consumer.inputs:
                        if src == tid:
                            queue.append((consumer.id,
                                          tuple(offset + i for i in idx)))
                        offset += graph.input_shape.c if src == INPUT_ID else chans[src]
                elif consumer.kind == "depthwise_conv":
                    zero_rows(consumer.id, list(idx))
                    queue.append((consumer.id, idx))
                # plain/grouped convs absorb exactly-zero inputs; stop there
    return masked


# ---------------------------------------------------------------------------
# Pruning policies
# ---------------------------------------------------------------------------

def _prunable_layers(graph: Graph):
    """Topologically ordered prunable convs, their half-split fractions'
    positions, and the coupled-group lookup. Detection-head convs (graph
    outputs), depthwise layers, and frozen groups are excluded."""
    groups = coupled_groups(graph)
    frozen = set()
    for g in groups:
        if g.frozen:
            frozen |= g.member_layer_ids
    head_ids = set(graph.output_ids)
    prunable = [n for n in graph.topo_order()
                if n.kind == "conv" and n.id not in head_ids and n.id not in frozen]
    group_of = {}
    for g in groups:
        if g.frozen:
            continue
        for m in g.member_layer_ids:
            group_of[m] = g
    return prunable, group_of


def select_prune(graph: Graph, weights: WeightStore,
                 schedule: PruneSchedule) -> list[ChannelSelection]:
    """Pick the channels each prunable conv keeps for one round.

    Filters are ranked by L1 mass; a layer prunes floor(fraction * channels)
    of its smallest filters (never emptying below one). Coupled groups share
    one mask ranked by the summed metrics of their non-1x1 members, so
    pointwise shortcuts are pruned by the mask without voting on it. Ties
    prune the lower index first.
    """
    prunable, group_of = _prunable_layers(graph)
    n_first = math.ceil(len(prunable) / 2)
    position = {n.id: i for i, n in enumerate(prunable)}

    selections: list[ChannelSelection] = []
    done: set[str] = set()
    for i, node in enumerate(prunable):
        if node.id in done:
            continue
        frac = (schedule.first_half_fraction if i < n_first
                else schedule.second_half_fraction)
        group = group_of.get(node.id)
        if group is not None:
            members = sorted(group.member_layer_ids,
                             key=lambda m: position.get(m, len(prunable)))
            out_c = graph.node(members[0]).spec.out_channels
            voting = [m for m in members
                      if not (graph.node(m).spec.kernel_h == graph.node(m).spec.kernel_w == 1)]
            if not voting:
                voting = members
            metric = np.zeros(out_c)
            for m in voting:
                metric += np.asarray(compute_l1_metrics(weights, m).values)
        else:
            members = [node.id]
            out_c = node.spec.out_channels
            metric = np.asarray(compute_l1_metrics(weights, node.id).values)

        n_prune = min(int(frac * out_c), out_c - 1)
        done.update(members)
        if n_prune <= 0:
            continue
        order = sorted(range(out_c), key=lambda c: (metric[c], c))
        kept = tuple(sorted(set(range(out_c)) - set(order[:n_prune])))
        for m in members:
            selections.append(ChannelSelection(m, kept))
    return selections


def sample_channel_selections(graph: Graph, keep_counts: dict[str, int], *,
                              mode: str = "random", seed: int = 0
                              ) -> list[ChannelSelection]:
    """Selections keeping ``keep_counts[layer]`` channels per layer: the
    first N indices ("first") or a seeded uniform draw without replacement
    ("random"). Counts silently extend to coupled-group partners; explicit
    disagreeing counts are an error."""
    _, group_of = _prunable_layers(graph)
    counts = dict(keep_counts)
    for layer_id, count in keep_counts.items():
        group = group_of.get(layer_id)
        if group is None:
            continue
        for m in group.member_layer_ids:
            if counts.setdefault(m, count) != count:
                raise TransformError(
                    f"coupled layers {layer_id!r}/{m!r} given different keep counts")
    rng = np.random.default_rng(seed)
    selections = []
    done: set[str] = set()
    for n in graph.topo_order():
        if n.id not in counts or n.id in done:
            continue
        if n.kind not in CONV_KINDS:
            raise TransformError(f"keep count given for non-conv layer {n.id!r}")
        out_c = n.spec.out_channels
        count = counts[n.id]
        if not 1 <= count <= out_c:
            raise TransformError(
                f"keep count {count} out of range [1, {out_c}] for layer {n.id!r}")
        if mode == "first":
            kept = tuple(range(count))
        elif mode == "random":
            kept = tuple(sorted(rng.choice(out_c, size=count, replace=False).tolist()))
        else:
            raise TransformError(f"unknown sampling mode {mode!r}")
        group = group_of.get(n.id)
        members = sorted(group.member_layer_ids) if group else [n.id]
        for m in members:
            selections.append(ChannelSelection(m, kept))
            done.add(m)
    return selections


def random_sample_channels(graph: Graph, weights: WeightStore,
                           keep_counts: dict[str, int], seed: int = 0
                           ) -> tuple[Graph, WeightStore]:
    """Uniformly sampled channel reduction, deterministic under the seed."""
    sels = sample_channel_selections(graph, keep_counts, mode="random", seed=seed)
    return apply_selection(graph, weights, sels)


def one_shot_prune(graph: Graph, weights: WeightStore, schedule: PruneSchedule
                   ) -> tuple[Graph, WeightStore]:
    """One metric -> select -> apply round."""
    sels = select_prune(graph, weights, schedule)
    if not sels:
        return _rebuild(graph, graph.nodes), weights.copy()
    return apply_selection(graph, weights, sels)


def iterative_prune(graph: Graph, weights: WeightStore, schedule: PruneSchedule
                    ) -> tuple[Graph, WeightStore, list[dict]]:
    """Repeat one-shot rounds until the iteration budget runs out or total
    MACs drop to ``schedule.target_macs``.

    The history records cost after every round plus the (skipped) fine-tune
    hook; without training, accuracy recovery between rounds is explicitly
    out of scope. If a round can make no progress before reaching the
    target, pruning stops and the shortfall is logged and recorded.
    """
    rep = cost_report(graph)
    history: list[dict] = [{"round": 0, "macs": rep.total_macs, "params": rep.total_params,
                            "fine_tune": None}]
    target = schedule.target_macs
    max_rounds = 1000 if target is not None else schedule.iterations
    rnd = 0
    while rnd < max_rounds:
        if target is not None and rep.total_macs <= target:
            break
        sels = select_prune(graph, weights, schedule)
        if not sels:
            # no layer can lose a channel; mark the stall without duplicating
            # a history row so the per-round costs stay strictly decreasing
            msg = ("pruning stalled: every prunable layer is at its floor"
                   + (f" before reaching target {target}" if target is not None else ""))
            logger.warning(msg)
            history[-1]["stalled"] = True
            break
        graph, weights = apply_selection(graph, weights, sels)
        rep = cost_report(graph)
        rnd += 1
        history.append({"round": rnd, "macs": rep.total_macs, "params": rep.total_params,
                        "fine_tune": "skipped (training out of scope)"})
    return graph, weights, history


# ---------------------------------------------------------------------------
# Low-rank decomposition
# ---------------------------------------------------------------------------

def pca_decompose(graph: Graph, weights: WeightStore, layer_id: str,
                  rank: int | None = None, energy_fraction: float | None = None
                  ) -> tuple[Graph, WeightStore]:
    """Split one conv into a rank-r filter-basis conv followed by a 1x1
    recombination.

    Filters flatten to M[out_c, in_c*kh*kw]; an uncentered SVD M = U S Vt
    yields the basis conv (rows of S*Vt, inheriting stride/pad/dilation, no
    bias) and the pointwise conv (columns of U, carrying the original
    bias). ``energy_fraction`` picks the smallest rank whose leading
    squared singular values reach that share of the total.
    """
    if (rank is None) == (energy_fraction is None):
        raise TransformError("give exactly one of rank / energy_fraction")
    if not graph.has_node(layer_id):
        raise TransformError(f"layer {layer_id!r} not found")
    node = graph.node(layer_id)
    if node.kind != "conv" or node.spec.groups != 1:
        raise TransformError(f"layer {layer_id!r} must be an ungrouped convolution")
    spec: ConvSpec = node.spec
    w = weights.get(layer_id, "weight").astype(np.float64)
    out_c, in_c, kh, kw = w.shape
    m = w.reshape(out_c, in_c * kh * kw)
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    total = float((s ** 2).sum())
    if total == 0.0:
        raise TransformError(f"layer {layer_id!r} is all-zero; nothing to decompose")
    if rank is None:
        cum = np.cumsum(s ** 2) / total
        rank = int(np.searchsorted(cum, energy_fraction) + 1)
    if rank < 1:
        raise TransformError(f"rank must be >= 1, got {rank}")
    r = min(rank, len(s))

    basis_id = f"{layer_id}_pca_basis"
    combine_id = f"{layer_id}_pca_combine"
    for nid in (basis_id, combine_id):
        if graph.has_node(nid):
            raise TransformError(f"layer id {nid!r} already exists")

    basis_spec = ConvSpec(r, spec.kernel_h, spec.kernel_w, spec.stride, spec.pad,
                          spec.dilation, 1, False)
    combine_spec = ConvSpec(out_c, 1, 1, (1, 1), (0, 0), (1, 1), 1, spec.has_bias)

    nodes = []
    for n in graph.nodes:
        if n.id == layer_id:
            nodes.append(LayerNode(basis_id, "conv", n.inputs, basis_spec))
            nodes.append(LayerNode(combine_id, "conv", (basis_id,), combine_spec))
        else:
            nodes.append(n)
    nodes = _rewire(nodes, layer_id, combine_id)
    outputs = [combine_id if o == layer_id else o for o in graph.output_ids]

    new_weights = weights.copy()
    new_weights.drop_layer(layer_id)
    new_weights.set(basis_id, "weight",
                    (s[:r, None] * vt[:r]).reshape(r, in_c, kh, kw).astype(np.float32))
    new_weights.set(combine_id, "weight", u[:, :r].reshape(out_c, r, 1, 1).astype(np.float32))
    if spec.has_bias:
        new_weights.set(combine_id, "bias", weights.get(layer_id, "bias").copy())
    return _rebuild(graph, nodes, outputs), new_weights
