"""Ordered execution of compression passes from a JSON config.

A pipeline file is a JSON array of descriptors
``{"pass": name, "params": {...}, "seed": n}``; passes run in order and each
one yields a cost report plus, where the pass has a checkable contract, an
equivalence summary measured with the reference executor on a seeded random
input (output-preserving passes report max output differences; stride
rewrites compare on the subsampled grid; pruning compares against the
channel-masking oracle; kernel subsampling re-verifies receptive fields).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import transforms
from .cost import CostReport, report as cost_report
from .executor import Tensor, WeightStore, run
from .graph import Graph, receptive_field
from .transforms import (
    PruneSchedule, TransformError, _following_spatial_layer, _kept_output_map,
    _selection_dict, mask_channels, stride_removal_multipliers,
)

_KNOWN_KEYS = {"pass", "params", "seed"}


@dataclass
class PassStep:
    name: str
    params: dict
    seed: int = 0


@dataclass
class PassReport:
    name: str
    params: dict
    seed: int
    cost: CostReport
    equivalence: dict | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        from .cost import report_to_dict
        return {
            "pass": self.name,
            "params": self.params,
            "seed": self.seed,
            "cost": report_to_dict(self.cost),
            "equivalence": self.equivalence,
            **({"extra": self.extra} if self.extra else {}),
        }


def parse_pipeline_config(doc) -> list[PassStep]:
    if not isinstance(doc, list):
        raise TransformError("pipeline config must be a JSON array of pass descriptors")
    steps = []
    for i, entry in enumerate(doc):
        where = f"pipeline[{i}]"
        if not isinstance(entry, dict):
            raise TransformError(f"{where}: descriptor must be an object")
        unknown = set(entry) - _KNOWN_KEYS
        if unknown:
            raise TransformError(f"{where}: unknown keys {sorted(unknown)}")
        if "pass" not in entry:
            raise TransformError(f"{where}: missing 'pass'")
        name = str(entry["pass"])
        if name not in PASS_NAMES:
            raise TransformError(f"{where}: unknown pass {name!r}; have {sorted(PASS_NAMES)}")
        steps.append(PassStep(name=name, params=dict(entry.get("params", {})),
                              seed=int(entry.get("seed", 0))))
    return steps


def load_pipeline_config(path) -> list[PassStep]:
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise TransformError(f"{path}: invalid JSON: {e}") from e
    return parse_pipeline_config(doc)


def _schedule_from(params: dict) -> PruneSchedule:
    allowed = {"first_half_fraction", "second_half_fraction", "iterations", "target_macs"}
    unknown = set(params) - allowed
    if unknown:
        raise TransformError(f"unknown schedule params {sorted(unknown)}")
    return PruneSchedule(**params)


def _apply_fold_bn(graph, weights, params, seed):
    if params:
        raise TransformError(f"fold_bn takes no params, got {sorted(params)}")
    g, w = transforms.fold_bn(graph, weights)
    return g, w, {}


def _apply_rewrite(graph, weights, params, seed):
    ids = params.get("reduction_layer_ids")
    if set(params) != {"reduction_layer_ids"} or not isinstance(ids, list):
        raise TransformError("rewrite_stride_to_dilation needs params {'reduction_layer_ids': [...]}")
    g = transforms.rewrite_stride_to_dilation(graph, [str(s) for s in ids])
    return g, weights.copy(), {"reduction_layer_ids": list(ids)}


def _apply_subsample(graph, weights, params, seed):
    if set(params) != {"layer_id", "factor"}:
        raise TransformError("subsample_kernel needs params {'layer_id', 'factor'}")
    g, w = transforms.subsample_kernel(graph, weights, str(params["layer_id"]),
                                       int(params["factor"]))
    return g, w, {"layer_id": str(params["layer_id"])}


def _apply_sample(mode_default):
    def apply(graph, weights, params, seed):
        allowed = {"keep_counts", "mode"}
        if set(params) - allowed or "keep_counts" not in params:
            raise TransformError("channel sampling needs params {'keep_counts': {...}}")
        mode = str(params.get("mode", mode_default))
        counts = {str(k): int(v) for k, v in params["keep_counts"].items()}
        sels = transforms.sample_channel_selections(graph, counts, mode=mode, seed=seed)
        g, w = transforms.apply_selection(graph, weights, sels)
        return g, w, {"selections": sels}
    return apply


def _apply_one_shot(graph, weights, params, seed):
    schedule = _schedule_from(params)
    sels = transforms.select_prune(graph, weights, schedule)
    if not sels:
        return graph, weights.copy(), {"selections": []}
    g, w = transforms.apply_selection(graph, weights, sels)
    return g, w, {"selections": sels}


def _apply_iterative(graph, weights, params, seed):
    schedule = _schedule_from(params)
    g, w, history = transforms.iterative_prune(graph, weights, schedule)
    return g, w, {"history": history}


def _apply_pca(graph, weights, params, seed):
    allowed = {"layer_id", "rank", "energy_fraction"}
    if set(params) - allowed or "layer_id" not in params:
        raise TransformError("pca_decompose needs params {'layer_id', 'rank' | 'energy_fraction'}")
    g, w = transforms.pca_decompose(
        graph, weights, str(params["layer_id"]),
        rank=int(params["rank"]) if "rank" in params else None,
        energy_fraction=float(params["energy_fraction"]) if "energy_fraction" in params else None)
    return g, w, {"layer_id": str(params["layer_id"])}


PASS_NAMES = {
    "fold_bn": _apply_fold_bn,
    "rewrite_stride_to_dilation": _apply_rewrite,
    "subsample_kernel": _apply_subsample,
    "sample_channels": _apply_sample("first"),
    "random_sample_channels": _apply_sample("random"),
    "one_shot_prune": _apply_one_shot,
    "iterative_prune": _apply_iterative,
    "pca_decompose": _apply_pca,
}

_OUTPUT_PRESERVING = {"fold_bn", "pca_decompose"}
_MASK_CHECKED = {"sample_channels", "random_sample_channels", "one_shot_prune",
                 "iterative_prune"}


def _rand_input(graph: Graph, seed: int) -> Tensor:
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal(graph.input_shape.as_tuple()).astype(np.float32))


def _max_diffs(a: dict, b: dict) -> dict:
    abs_diff = 0.0
    rel_diff = 0.0
    for key in a:
        x, y = a[key].data.astype(np.float64), b[key].data.astype(np.float64)
        d = np.abs(x - y)
        abs_diff = max(abs_diff, float(d.max(initial=0.0)))
        rel_diff = max(rel_diff, float((d / (np.abs(x) + 1e-8)).max(initial=0.0)))
    return {"max_abs_diff": abs_diff, "max_rel_diff": rel_diff}


def _equivalence(step: PassStep, before: tuple[Graph, WeightStore],
                 after: tuple[Graph, WeightStore], extra: dict, seed: int) -> dict | None:
    g0, w0 = before
    g1, w1 = after
    if step.name in _OUTPUT_PRESERVING:
        x = _rand_input(g0, seed)
        out0 = run(g0, w0, x)
        out1 = run(g1, w1, x)
        return {"kind": "output_preserving", **_max_diffs(out0, out1)}
    if step.name == "rewrite_stride_to_dilation":
        mult = stride_removal_multipliers(g0, extra["reduction_layer_ids"])
        x = _rand_input(g0, seed)
        out0 = run(g0, w0, x)
        out1 = run(g1, w1, x)
        abs_diff = rel_diff = 0.0
        for key in out0:
            mh, mw = mult[key]
            o = out0[key].data.astype(np.float64)
            r = out1[key].data[:, :, ::mh, ::mw][:, :, :o.shape[2], :o.shape[3]].astype(np.float64)
            d = np.abs(o - r)
            abs_diff = max(abs_diff, float(d.max(initial=0.0)))
            rel_diff = max(rel_diff, float((d / (np.abs(o) + 1e-8)).max(initial=0.0)))
        return {"kind": "subsampled_grid", "max_abs_diff": abs_diff, "max_rel_diff": rel_diff}
    if step.name in _MASK_CHECKED:
        sels = extra.get("selections")
        if sels is None or not sels:
            return None
        masked = mask_channels(g0, w0, sels)
        x = _rand_input(g0, seed)
        out_masked = run(g0, masked, x)
        out_pruned = run(g1, w1, x)
        kept = _kept_output_map(g0, _selection_dict(g0, sels))
        abs_diff = 0.0
        for key in out_masked:
            m = out_masked[key].data[:, kept[key]].astype(np.float64)
            p = out_pruned[key].data.astype(np.float64)
            abs_diff = max(abs_diff, float(np.abs(m - p).max(initial=0.0)))
        return {"kind": "mask_equivalence", "max_abs_diff": abs_diff}
    if step.name == "subsample_kernel":
        follower = _following_spatial_layer(g0, extra["layer_id"])
        rf0 = receptive_field(g0, follower)
        rf1 = receptive_field(g1, follower)
        return {"kind": "receptive_field", "preserved": rf0 == rf1,
                "size": [rf0.size_h, rf0.size_w]}
    return None


def run_pipeline(graph: Graph, weights: WeightStore, steps: list[PassStep], *,
                 check: bool = True, check_seed: int = 0
                 ) -> tuple[Graph, WeightStore, list[PassReport]]:
    """Apply the steps in order. With ``check`` on, each checkable pass is
    re-verified with the executor and its summary embedded in the report."""
    reports: list[PassReport] = []
    for step in steps:
        if step.name not in PASS_NAMES:  # parse_pipeline_config already rejects
            raise TransformError(f"unknown pass {step.name!r}")
    for step in steps:
        before = (graph, weights)
        graph, weights, extra = PASS_NAMES[step.name](graph, weights, step.params, step.seed)
        equivalence = None
        if check:
            equivalence = _equivalence(step, before, (graph, weights), extra, check_seed)
        serializable_extra = {}
        if "history" in extra:
            serializable_extra["history"] = extra["history"]
        if "selections" in extra:
            serializable_extra["selections"] = [
                {"layer_id": s.layer_id, "kept": len(s.kept_indices)} for s in extra["selections"]]
        reports.append(PassReport(step.name, step.params, step.seed,
                                  cost_report(graph), equivalence, serializable_extra))
    return graph, weights, reports
