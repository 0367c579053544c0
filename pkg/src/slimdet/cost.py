"""Multiply-accumulate and parameter accounting.

The headline number counts each multiply-accumulate once (a k*k conv over
an output element costs in_c/groups * k * k MACs), which is the convention
the model budgets in this toolkit are quoted in; pooling, ReLU, eltwise
and concat cost zero under it. A verbose mode additionally reports the
elementwise op counts those layers perform. ``flops2x`` doubles the MAC
count for consumers that count multiply and add separately.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .graph import INPUT_ID, Graph, LayerNode, TensorShape, infer_shapes


@dataclass(frozen=True)
class LayerCost:
    layer_id: str
    macs: int
    params: int
    elementwise_ops: int = 0


@dataclass
class CostReport:
    per_layer: list[LayerCost]
    total_macs: int
    total_params: int
    total_elementwise_ops: int = 0

    def gmacs(self) -> float:
        return self.total_macs / 1e9

    def mparams(self) -> float:
        return self.total_params / 1e6


def layer_cost(node: LayerNode, in_shape: TensorShape, out_shape: TensorShape) -> LayerCost:
    """Cost of one layer given its inferred input/output shapes (per sample;
    the batch dimension is not multiplied in)."""
    macs = 0
    params = 0
    elementwise = 0
    if node.kind in ("conv", "depthwise_conv"):
        spec = node.spec
        per_out = (in_shape.c // spec.groups) * spec.kernel_h * spec.kernel_w
        macs = out_shape.c * out_shape.h * out_shape.w * per_out
        params = spec.out_channels * per_out
        if spec.has_bias:
            params += spec.out_channels
    elif node.kind == "batch_norm":
        c, h, w = out_shape.c, out_shape.h, out_shape.w
        macs = 2 * c * h * w
        params = 4 * c
    elif node.kind in ("max_pool", "avg_pool"):
        k = node.spec.kernel
        elementwise = out_shape.c * out_shape.h * out_shape.w * k[0] * k[1]
    elif node.kind in ("relu", "eltwise_add"):
        elementwise = out_shape.c * out_shape.h * out_shape.w
    elif node.kind == "softmax":
        elementwise = 3 * out_shape.c * out_shape.h * out_shape.w
    return LayerCost(node.id, macs, params, elementwise)


def report(graph: Graph, input_shape: TensorShape | None = None) -> CostReport:
    """Full per-layer and total accounting for a valid graph."""
    if input_shape is not None and input_shape != graph.input_shape:
        graph = Graph(graph.nodes, input_shape, graph.output_ids)
    shapes = infer_shapes(graph)
    shapes_in = {INPUT_ID: graph.input_shape, **shapes}
    per_layer = []
    for node in graph.topo_order():
        in_shape = shapes_in[node.inputs[0]] if node.inputs else graph.input_shape
        per_layer.append(layer_cost(node, in_shape, shapes[node.id]))
    return CostReport(
        per_layer=per_layer,
        total_macs=sum(c.macs for c in per_layer),
        total_params=sum(c.params for c in per_layer),
        total_elementwise_ops=sum(c.elementwise_ops for c in per_layer),
    )


def report_to_dict(rep: CostReport, *, units: str = "macs", verbose: bool = False) -> dict:
    scale = 2 if units == "flops2x" else 1
    doc = {
        "units": units,
        "per_layer": [
            {"layer_id": c.layer_id, "macs": c.macs * scale, "params": c.params,
             **({"elementwise_ops": c.elementwise_ops} if verbose else {})}
            for c in rep.per_layer
        ],
        "total_macs": rep.total_macs * scale,
        "total_params": rep.total_params,
        "gflops": rep.total_macs * scale / 1e9,
        "mparams": rep.total_params / 1e6,
    }
    if verbose:
        doc["total_elementwise_ops"] = rep.total_elementwise_ops
    return doc


def format_report(rep: CostReport, *, units: str = "macs", verbose: bool = False) -> str:
    """Aligned-column text rendering."""
    scale = 2 if units == "flops2x" else 1
    unit_name = "FLOPs" if units == "flops2x" else "MACs"
    rows = [(c.layer_id, c.macs * scale, c.params, c.elementwise_ops) for c in rep.per_layer]
    wide = max([len("layer")] + [len(r[0]) for r in rows])
    header = f"{'layer':<{wide}}  {unit_name:>14}  {'params':>12}"
    if verbose:
        header += f"  {'eltwise':>12}"
    lines = [header, "-" * len(header)]
    for layer_id, macs, params, el in rows:
        line = f"{layer_id:<{wide}}  {macs:>14,}  {params:>12,}"
        if verbose:
            line += f"  {el:>12,}"
        lines.append(line)
    lines.append("-" * len(header))
    total = f"{'total':<{wide}}  {rep.total_macs * scale:>14,}  {rep.total_params:>12,}"
    if verbose:
        total += f"  {rep.total_elementwise_ops:>12,}"
    lines.append(total)
    lines.append(f"{'':<{wide}}  {rep.total_macs * scale / 1e9:>11.4f} G  {rep.total_params / 1e6:>10.4f} M")
    return "\n".join(lines)


def save_report(path, rep: CostReport, *, units: str = "macs", verbose: bool = False,
                extra: dict | None = None) -> None:
    doc = report_to_dict(rep, units=units, verbose=verbose)
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
