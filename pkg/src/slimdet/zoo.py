"""Programmatic model builders with deterministic initialization.

Two families are provided: the plain residual trunk with SSD heads
(``resnet10_ssd``) and its dense-feature-map derivative (``ssdr_*``), which
trades the last two spatial reductions for dilations and cuts channel
counts. Builders give every transform and cost target a concrete,
reproducible subject; no weights are ever trained here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detection import PriorConfig, default_prior_config
from .executor import WeightStore
from .graph import (
    BatchNormSpec, ConvSpec, Graph, LayerNode, PoolSpec, TensorShape,
    infer_shapes,
)
from .transforms import apply_selection, sample_channel_selections

NUM_CLASSES = 2  # background + vehicle
PRIORS_PER_CELL = 6  # two squares + four listed non-unit ratios

DEFAULT_INPUT = TensorShape(1, 3, 256, 320)


@dataclass(frozen=True)
class SsdrVariant:
    """Channel plan per architecture row (conv1, pool1, rb1, rb2, rb3, rb4,
    conv16_det, conv32_det)."""

    name: str
    channel_plan: tuple[int, int, int, int, int, int, int, int]


SSDR_VARIANTS = {
    "1.5": SsdrVariant("1.5", (64, 64, 64, 64, 128, 128, 128, 128)),
    "0.75": SsdrVariant("0.75", (49, 49, 49, 49, 76, 76, 76, 76)),
    "0.47": SsdrVariant("0.47", (41, 41, 41, 41, 49, 49, 49, 49)),
}


def _res_block(nodes, prefix: str, in_id: str, in_c: int, out_c: int,
               stride: int, dilations=(1, 1), eps: float = 1e-5) -> str:
    """Pre-activation residual block: bn-relu-conv twice, plus a 1x1
    stride-matched projection shortcut when the shape changes. Returns the
    add output id."""
    d1, d2 = dilations
    nodes.append(LayerNode(f"{prefix}_bn_a", "batch_norm", (in_id,), BatchNormSpec(eps)))
    nodes.append(LayerNode(f"{prefix}_relu_a", "relu", (f"{prefix}_bn_a",)))
    nodes.append(LayerNode(f"{prefix}_conv_a", "conv", (f"{prefix}_relu_a",),
                           ConvSpec(out_c, 3, 3, stride, d1, d1)))
    nodes.append(LayerNode(f"{prefix}_bn_b", "batch_norm", (f"{prefix}_conv_a",), BatchNormSpec(eps)))
    nodes.append(LayerNode(f"{prefix}_relu_b", "relu", (f"{prefix}_bn_b",)))
    nodes.append(LayerNode(f"{prefix}_conv_b", "conv", (f"{prefix}_relu_b",),
                           ConvSpec(out_c, 3, 3, 1, d2, d2)))
    if stride != 1 or in_c != out_c:
        nodes.append(LayerNode(f"{prefix}_shortcut", "conv", (in_id,),
                               ConvSpec(out_c, 1, 1, stride, 0, 1)))
        shortcut = f"{prefix}_shortcut"
    else:
        shortcut = in_id
    nodes.append(LayerNode(f"{prefix}_add", "eltwise_add", (f"{prefix}_conv_b", shortcut)))
    return f"{prefix}_add"


def _stem(nodes, out_c: int) -> str:
    nodes.append(LayerNode("conv1", "conv", ("input",), ConvSpec(out_c, 7, 7, 2, 3, 1)))
    nodes.append(LayerNode("conv1_bn", "batch_norm", ("conv1",), BatchNormSpec()))
    nodes.append(LayerNode("conv1_relu", "relu", ("conv1_bn",)))
    nodes.append(LayerNode("pool1", "max_pool", ("conv1_relu",), PoolSpec(3, 2, 1)))
    return "pool1"


def _heads(nodes, taps: list[str]) -> list[str]:
    outputs = []
    for i, tap in enumerate(taps):
        cls_id, loc_id = f"head{i}_cls", f"head{i}_loc"
        nodes.append(LayerNode(cls_id, "conv", (tap,),
                               ConvSpec(PRIORS_PER_CELL * NUM_CLASSES, 3, 3, 1, 1, 1, 1, True)))
        nodes.append(LayerNode(loc_id, "conv", (tap,),
                               ConvSpec(PRIORS_PER_CELL * 4, 3, 3, 1, 1, 1, 1, True)))
        outputs += [cls_id, loc_id]
    return outputs


def init_weights(graph: Graph, seed: int = 0, scheme: str = "he") -> WeightStore:
    """Deterministic fill: conv filters scaled by fan-in (He normal or
    scaled uniform), zero biases, identity norm statistics. Same seed, same
    bits."""
    if scheme not in ("he", "uniform"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    shapes = infer_shapes(graph)
    in_shape = {"input": graph.input_shape, **shapes}
    store = WeightStore()
    for node in graph.topo_order():
        if node.kind in ("conv", "depthwise_conv"):
            spec: ConvSpec = node.spec
            in_c = in_shape[node.inputs[0]].c
            fan_in = (in_c // spec.groups) * spec.kernel_h * spec.kernel_w
            shape = (spec.out_channels, in_c // spec.groups, spec.kernel_h, spec.kernel_w)
            if scheme == "he":
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
            else:
                lim = np.sqrt(6.0 / fan_in)
                w = rng.uniform(-lim, lim, size=shape)
            store.set(node.id, "weight", w.astype(np.float32))
            if spec.has_bias:
                store.set(node.id, "bias", np.zeros(spec.out_channels, dtype=np.float32))
        elif node.kind == "batch_norm":
            c = in_shape[node.inputs[0]].c
            store.set(node.id, "gamma", np.ones(c, dtype=np.float32))
            store.set(node.id, "beta", np.zeros(c, dtype=np.float32))
            store.set(node.id, "mean", np.zeros(c, dtype=np.float32))
            store.set(node.id, "variance", np.ones(c, dtype=np.float32))
    return store


def build_ssdr(variant: SsdrVariant | str, input_shape: TensorShape = DEFAULT_INPUT,
               seed: int = 0, trunk_only: bool = False) -> tuple[Graph, WeightStore]:
    """Dense-feature-map detector: the last two block reductions are gone
    (dilations 1,2 and 2,4 instead), two extra strided convs recreate the
    16x20 and 8x10 scales for the heads."""
    if isinstance(variant, str):
        try:
            variant = SSDR_VARIANTS[variant]
        except KeyError:
            raise ValueError(f"unknown variant {variant!r}; have {sorted(SSDR_VARIANTS)}") from None
    plan = variant.channel_plan
    nodes: list[LayerNode] = []
    tap = _stem(nodes, plan[0])
    tap = _res_block(nodes, "rb1", tap, plan[1], plan[2], stride=1)
    tap = _res_block(nodes, "rb2", tap, plan[2], plan[3], stride=2)
    tap = _res_block(nodes, "rb3", tap, plan[3], plan[4], stride=1, dilations=(1, 2))
    tap = _res_block(nodes, "rb4", tap, plan[4], plan[5], stride=1, dilations=(2, 4))
    if trunk_only:
        graph = Graph(tuple(nodes), input_shape, (tap,))
        return graph, init_weights(graph, seed)
    nodes.append(LayerNode("conv16_det", "conv", (tap,), ConvSpec(plan[6], 3, 3, 2, 1, 1)))
    nodes.append(LayerNode("conv16_det_bn", "batch_norm", ("conv16_det",), BatchNormSpec()))
    nodes.append(LayerNode("conv16_det_relu", "relu", ("conv16_det_bn",)))
    nodes.append(LayerNode("conv32_det", "conv", ("conv16_det_relu",), ConvSpec(plan[7], 3, 3, 2, 1, 1)))
    nodes.append(LayerNode("conv32_det_bn", "batch_norm", ("conv32_det",), BatchNormSpec()))
    nodes.append(LayerNode("conv32_det_relu", "relu", ("conv32_det_bn",)))
    outputs = _heads(nodes, [tap, "conv16_det_relu", "conv32_det_relu"])
    graph = Graph(tuple(nodes), input_shape, tuple(outputs))
    return graph, init_weights(graph, seed)


def build_resnet10_trunk(input_shape: TensorShape = DEFAULT_INPUT, seed: int = 0
                         ) -> tuple[Graph, WeightStore]:
    """Plain residual trunk: stem then blocks 64/1, 128/2, 256/2, 512/2."""
    nodes: list[LayerNode] = []
    tap = _stem(nodes, 64)
    tap = _res_block(nodes, "rb1", tap, 64, 64, stride=1)
    tap = _res_block(nodes, "rb2", tap, 64, 128, stride=2)
    tap = _res_block(nodes, "rb3", tap, 128, 256, stride=2)
    tap = _res_block(nodes, "rb4", tap, 256, 512, stride=2)
    graph = Graph(tuple(nodes), input_shape, (tap,))
    return graph, init_weights(graph, seed)


def build_resnet10_ssd(input_shape: TensorShape = DEFAULT_INPUT, seed: int = 0
                       ) -> tuple[Graph, WeightStore]:
    """Residual trunk with SSD heads on its last three scales.

    The final block's 512 output channels are sampled down to 256 (first
    indices kept, which reslices the block's coupled output convs) so the
    head widths line up across trunks."""
    nodes: list[LayerNode] = []
    tap = _stem(nodes, 64)
    tap1 = _res_block(nodes, "rb1", tap, 64, 64, stride=1)
    tap2 = _res_block(nodes, "rb2", tap1, 64, 128, stride=2)
    tap3 = _res_block(nodes, "rb3", tap2, 128, 256, stride=2)
    tap4 = _res_block(nodes, "rb4", tap3, 256, 512, stride=2)
    outputs = _heads(nodes, [tap2, tap3, tap4])
    graph = Graph(tuple(nodes), input_shape, tuple(outputs))
    weights = init_weights(graph, seed)
    sels = sample_channel_selections(graph, {"rb4_conv_b": 256}, mode="first")
    return apply_selection(graph, weights, sels)


_ZOO = {
    "resnet10_ssd": lambda shape, seed: build_resnet10_ssd(shape, seed),
    "resnet10_trunk": lambda shape, seed: build_resnet10_trunk(shape, seed),
    "ssdr_1.5": lambda shape, seed: build_ssdr("1.5", shape, seed),
    "ssdr_0.75": lambda shape, seed: build_ssdr("0.75", shape, seed),
    "ssdr_0.47": lambda shape, seed: build_ssdr("0.47", shape, seed),
    "ssdr_1.5_trunk": lambda shape, seed: build_ssdr("1.5", shape, seed, trunk_only=True),
    "ssdr_0.75_trunk": lambda shape, seed: build_ssdr("0.75", shape, seed, trunk_only=True),
    "ssdr_0.47_trunk": lambda shape, seed: build_ssdr("0.47", shape, seed, trunk_only=True),
}


def zoo_names() -> list[str]:
    return sorted(_ZOO)


def build(name: str, input_shape: TensorShape = DEFAULT_INPUT, seed: int = 0
          ) -> tuple[Graph, WeightStore]:
    try:
        builder = _ZOO[name]
    except KeyError:
        raise ValueError(f"unknown zoo model {name!r}; have {zoo_names()}") from None
    return builder(input_shape, seed)


def prior_config_for_heads(graph: Graph) -> PriorConfig:
    """Prior layout matching a detector graph: one level per (cls, loc)
    output pair, feature maps read off the head shapes."""
    if len(graph.output_ids) % 2 != 0:
        raise ValueError("detector graphs pair class and offset outputs per level")
    shapes = infer_shapes(graph)
    feature_maps = []
    for i in range(0, len(graph.output_ids), 2):
        s = shapes[graph.output_ids[i]]
        feature_maps.append((s.h, s.w))
    return default_prior_config(image=(graph.input_shape.h, graph.input_shape.w),
                                feature_maps=feature_maps)
