"""Command-line pipeline driver.

Subcommands: zoo, inspect, transform, infer, eval, priors. Every command is
deterministic given its arguments and --seed values; reports embed the tool
version, seeds and a pipeline hash so runs can be reproduced byte for byte.
Exit codes: 0 success, 2 usage/input error, 1 internal failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import traceback

from . import __version__, zoo
from .cost import format_report, report as cost_report, report_to_dict
from .detection import (
    cluster_priors, decode_predictions, generate_priors, nms,
    prior_config_from_dict, prior_config_to_dict, priors_to_json,
)
from .evaluation import (
    DatasetFormatError, EvalConfig, evaluate_dataset, load_ground_truth,
    save_detections,
)
from .executor import (
    ExecutionError, load_tensor, load_weights, run, save_weights,
)
from .graph import (
    GraphFormatError, ShapeInferenceError, TensorShape, infer_shapes,
    load_graph, receptive_field, save_graph, validate,
)
from .pipeline import PassReport, load_pipeline_config, run_pipeline
from .transforms import TransformError


class UsageError(ValueError):
    pass


def _parse_shape(text: str) -> TensorShape:
    parts = text.split(",")
    if len(parts) != 4:
        raise UsageError(f"--input-shape must be n,c,h,w, got {text!r}")
    return TensorShape(*(int(p) for p in parts))


def _load_model(args) -> tuple:
    if args.model:
        if not args.model.startswith("zoo:"):
            raise UsageError(f"--model must look like zoo:<name>, got {args.model!r}")
        shape = _parse_shape(args.input_shape) if getattr(args, "input_shape", None) \
            else zoo.DEFAULT_INPUT
        try:
            return zoo.build(args.model[4:], shape, seed=args.seed)
        except ValueError as e:
            raise UsageError(str(e)) from e
    if not (args.graph and args.weights):
        raise UsageError("give either --model zoo:<name> or both --graph and --weights")
    graph = load_graph(args.graph)
    weights = load_weights(args.weights)
    issues = validate(graph)
    if issues:
        raise UsageError("invalid model: " + "; ".join(str(i) for i in issues))
    problems = weights.validate_against(graph)
    if problems:
        raise UsageError("weights do not match graph: " + "; ".join(problems))
    return graph, weights


def _add_model_args(p: argparse.ArgumentParser):
    p.add_argument("--model", help="zoo model, e.g. zoo:ssdr_1.5")
    p.add_argument("--graph", help="graph JSON file")
    p.add_argument("--weights", help="weight-store file")
    p.add_argument("--input-shape", help="n,c,h,w override for zoo models")


def _meta(args, **extra) -> dict:
    return {"tool_version": __version__, "seed": args.seed, **extra}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_zoo(args) -> int:
    if args.zoo_action == "list":
        for name in zoo.zoo_names():
            print(name)
        return 0
    graph, weights = _load_model(args)
    save_graph(args.out_graph, graph)
    save_weights(args.out_weights, weights)
    print(f"wrote {args.out_graph} and {args.out_weights}")
    return 0


def cmd_inspect(args) -> int:
    graph, weights = _load_model(args)
    shapes = infer_shapes(graph)
    rep = cost_report(graph)
    rf = {n.id: receptive_field(graph, n.id) for n in graph.nodes}
    doc = {
        "meta": _meta(args),
        "input_shape": list(graph.input_shape.as_tuple()),
        "outputs": list(graph.output_ids),
        "layers": [
            {"id": n.id, "kind": n.kind,
             "shape": list(shapes[n.id].as_tuple()),
             "receptive_field": [rf[n.id].size_h, rf[n.id].size_w],
             "rf_stride": [rf[n.id].stride_h, rf[n.id].stride_w]}
            for n in graph.topo_order()
        ],
        "cost": report_to_dict(rep, units=args.cost_units, verbose=args.verbose),
    }
    if args.json:
        print(json.dumps(doc, indent=2, sort_keys=True))
    else:
        wide = max((len(n.id) for n in graph.nodes), default=5)
        print(f"input {graph.input_shape.as_tuple()}")
        for entry in doc["layers"]:
            n, c, h, w = entry["shape"]
            rfs = entry["receptive_field"]
            print(f"{entry['id']:<{wide}}  {entry['kind']:<14} "
                  f"{c:>4}x{h}x{w:<8} rf {rfs[0]}x{rfs[1]} /{entry['rf_stride'][0]}")
        print()
        print(format_report(rep, units=args.cost_units, verbose=args.verbose))
    if args.report_dir:
        from .report import render_cost_figure, write_cost_csv
        os.makedirs(args.report_dir, exist_ok=True)
        with open(os.path.join(args.report_dir, "report.json"), "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")
        write_cost_csv(os.path.join(args.report_dir, "cost.csv"), rep, args.cost_units)
        render_cost_figure(os.path.join(args.report_dir, "cost.png"), rep)
    return 0


def _flush_transform_reports(args, reports: list[PassReport], pipeline_hash: str,
                             status: str):
    if not args.report_dir:
        return
    from .report import (
        render_cost_figure, render_history_figure, write_cost_csv,
        write_history_csv,
    )
    os.makedirs(args.report_dir, exist_ok=True)
    doc = {
        "meta": _meta(args, pipeline_hash=pipeline_hash, status=status),
        "passes": [r.to_dict() for r in reports],
    }
    with open(os.path.join(args.report_dir, "report.json"), "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    if reports:
        write_cost_csv(os.path.join(args.report_dir, "cost.csv"), reports[-1].cost,
                       args.cost_units)
        render_cost_figure(os.path.join(args.report_dir, "cost.png"), reports[-1].cost,
                           title=f"after {reports[-1].name}")
        for r in reports:
            if "history" in r.extra:
                write_history_csv(os.path.join(args.report_dir, "history.csv"),
                                  r.extra["history"])
                render_history_figure(os.path.join(args.report_dir, "history.png"),
                                      r.extra["history"])


def cmd_transform(args) -> int:
    steps = load_pipeline_config(args.pipeline)  # rejects unknown passes up front
    with open(args.pipeline, "rb") as f:
        pipeline_hash = hashlib.sha256(f.read()).hexdigest()
    graph, weights = _load_model(args)
    reports: list[PassReport] = []
    try:
        for step in steps:
            graph, weights, step_reports = run_pipeline(
                graph, weights, [step], check=not args.no_check, check_seed=args.seed)
            reports.extend(step_reports)
    except (TransformError, ExecutionError, ShapeInferenceError) as e:
        _flush_transform_reports(args, reports, pipeline_hash, f"failed: {e}")
        print(f"error: pass {len(reports) + 1} failed: {e}", file=sys.stderr)
        return 1
    save_graph(args.out_graph, graph)
    save_weights(args.out_weights, weights)
    _flush_transform_reports(args, reports, pipeline_hash, "ok")
    for r in reports:
        line = f"[{r.name}] {r.cost.total_macs / 1e9:.4f} GMACs, {r.cost.total_params / 1e6:.4f} MParams"
        if r.equivalence:
            if "max_abs_diff" in r.equivalence:
                line += f", check {r.equivalence['kind']}: max abs diff {r.equivalence['max_abs_diff']:.2e}"
            elif "preserved" in r.equivalence:
                line += f", check {r.equivalence['kind']}: preserved={r.equivalence['preserved']}"
        print(line)
    return 0


def _load_priors_for(args, graph):
    if getattr(args, "priors", None):
        with open(args.priors, "r", encoding="utf-8") as f:
            doc = json.load(f)
        if isinstance(doc, dict) and "levels" in doc:
            config = prior_config_from_dict(doc)
        else:
            raise UsageError(f"{args.priors}: expected a prior-config object with levels")
    else:
        config = zoo.prior_config_for_heads(graph)
    priors = generate_priors(config)
    per_level = []
    off = 0
    for level in config.levels:
        count = level.feature_map[0] * level.feature_map[1] * level.boxes_per_cell()
        per_level.append(priors[off:off + count])
        off += count
    return config, per_level


def cmd_infer(args) -> int:
    graph, weights = _load_model(args)
    config, priors_per_level = _load_priors_for(args, graph)
    num_classes = zoo.NUM_CLASSES
    detections = {}
    for path in args.inputs:
        x = load_tensor(path)
        if x.shape != graph.input_shape:
            raise UsageError(f"{path}: tensor shape {x.shape.as_tuple()} does not match "
                             f"model input {graph.input_shape.as_tuple()}")
        outputs = run(graph, weights, x)
        cls_maps = [outputs[graph.output_ids[i]].data for i in range(0, len(graph.output_ids), 2)]
        loc_maps = [outputs[graph.output_ids[i]].data for i in range(1, len(graph.output_ids), 2)]
        dets = decode_predictions(cls_maps, loc_maps, priors_per_level, num_classes,
                                  config.variances, score_threshold=args.score_threshold)
        by_class = {}
        for d in dets:
            by_class.setdefault(d.class_id, []).append(d)
        kept = []
        for cls in sorted(by_class):
            kept.extend(nms(by_class[cls], args.nms_iou, args.max_keep))
        image_id = os.path.splitext(os.path.basename(path))[0]
        detections[image_id] = kept
    save_detections(args.out, detections)
    total = sum(len(v) for v in detections.values())
    print(f"wrote {total} detections for {len(detections)} image(s) to {args.out}")
    return 0


def cmd_eval(args) -> int:
    config = EvalConfig(iou_threshold=args.iou, ioa_threshold=args.ioa,
                        interpolation=args.interpolation)
    result, per_image = evaluate_dataset(args.gt, args.det, config)
    doc = {
        "meta": _meta(args, iou_threshold=args.iou, ioa_threshold=args.ioa,
                      interpolation=args.interpolation),
        "ap": result.ap,
        "counts": result.counts,
        "flags": result.flags,
        "per_image": per_image,
        "precision": result.precision,
        "recall": result.recall,
    }
    if args.json:
        print(json.dumps(doc, indent=2, sort_keys=True))
    else:
        print(f"AP {result.ap:.4f}")
        c = result.counts
        print(f"tp {c['tp']}  fp {c['fp']}  gt {c['n_gt']}")
        for flag in result.flags:
            print(f"note: {flag}")
    if args.report_dir:
        from .report import render_pr_figure, write_pr_csv
        os.makedirs(args.report_dir, exist_ok=True)
        with open(os.path.join(args.report_dir, "eval.json"), "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")
        write_pr_csv(os.path.join(args.report_dir, "pr_curve.csv"), result)
        render_pr_figure(os.path.join(args.report_dir, "pr_curve.png"), result)
    return 0


def cmd_priors(args) -> int:
    if args.mode == "cluster":
        if not args.gt:
            raise UsageError("--mode cluster needs --gt")
        gts = load_ground_truth(args.gt)
        boxes = [b for g in gts for b, _ in g.boxes]
        try:
            priors = cluster_priors(boxes, n_scales=args.n_scales,
                                    n_per_scale=args.n_per_scale, seed=args.seed)
        except ValueError as e:
            raise UsageError(str(e)) from e
    else:
        if args.config:
            with open(args.config, "r", encoding="utf-8") as f:
                config = prior_config_from_dict(json.load(f))
        elif args.model or (args.graph and args.weights):
            graph, _ = _load_model(args)
            config = zoo.prior_config_for_heads(graph)
        else:
            raise UsageError("--mode ssd needs --config or a model")
        priors = generate_priors(config)
    doc = {"meta": _meta(args, mode=args.mode), "priors": priors_to_json(priors)}
    if args.mode == "ssd" and (args.config or args.model or args.graph):
        doc["config"] = prior_config_to_dict(config)
    with open(args.out, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {len(priors)} priors to {args.out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slimdet",
        description="Inspect, compress, run and score small detection CNNs.")
    parser.add_argument("--version", action="version", version=f"slimdet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0, help="seed recorded in outputs")
        p.add_argument("--json", action="store_true", help="machine-readable stdout")
        p.add_argument("--cost-units", choices=("macs", "flops2x"), default="macs")

    p = sub.add_parser("zoo", help="list or emit built-in models")
    common(p)
    zsub = p.add_subparsers(dest="zoo_action", required=True)
    zl = zsub.add_parser("list", help="print model names")
    common(zl)
    zl.set_defaults(func=cmd_zoo, zoo_action="list")
    ze = zsub.add_parser("emit", help="write graph + weights files")
    common(ze)
    _add_model_args(ze)
    ze.add_argument("--out-graph", required=True)
    ze.add_argument("--out-weights", required=True)
    ze.set_defaults(func=cmd_zoo, zoo_action="emit")
    p.set_defaults(func=cmd_zoo)

    p = sub.add_parser("inspect", help="shapes, receptive fields and cost")
    common(p)
    _add_model_args(p)
    p.add_argument("--verbose", action="store_true", help="include elementwise op counts")
    p.add_argument("--report-dir", help="write report.json, cost.csv and cost.png here")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("transform", help="apply a pass pipeline")
    common(p)
    _add_model_args(p)
    p.add_argument("--pipeline", required=True, help="pipeline config JSON")
    p.add_argument("--out-graph", required=True)
    p.add_argument("--out-weights", required=True)
    p.add_argument("--report-dir", help="write per-pass reports and figures here")
    p.add_argument("--no-check", action="store_true",
                   help="skip executor equivalence checks")
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("infer", help="run the model and decode detections")
    common(p)
    _add_model_args(p)
    p.add_argument("--inputs", nargs="+", required=True, help="input tensor files")
    p.add_argument("--priors", help="prior config JSON (defaults to the model layout)")
    p.add_argument("--score-threshold", type=float, default=0.01)
    p.add_argument("--nms-iou", type=float, default=0.45)
    p.add_argument("--max-keep", type=int, default=200)
    p.add_argument("--out", required=True, help="detections JSON-lines file")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score detections against ground truth")
    common(p)
    p.add_argument("--gt", required=True, help="ground-truth JSON-lines file")
    p.add_argument("--det", required=True, help="detections JSON-lines file")
    p.add_argument("--iou", type=float, default=0.7)
    p.add_argument("--ioa", type=float, default=0.5,
                   help="ignore-region intersection-over-detection-area threshold")
    p.add_argument("--interpolation", choices=("all_point", "11_point"), default="all_point")
    p.add_argument("--report-dir", help="write eval.json, pr_curve.csv and pr_curve.png here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("priors", help="emit generated or clustered priors")
    common(p)
    _add_model_args(p)
    p.add_argument("--mode", choices=("ssd", "cluster"), required=True)
    p.add_argument("--gt", help="ground truth for clustering")
    p.add_argument("--config", help="prior config JSON for ssd mode")
    p.add_argument("--n-scales", type=int, default=3)
    p.add_argument("--n-per-scale", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_priors)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, GraphFormatError, ShapeInferenceError, TransformError,
            DatasetFormatError, ExecutionError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
