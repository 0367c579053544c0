import json
import os

import numpy as np
import pytest

from slimdet import zoo
from slimdet.cli import main
from slimdet.cost import report
from slimdet.detection import priors_from_json
from slimdet.evaluation import evaluate_dataset
from slimdet.executor import Tensor, save_tensor
from slimdet.graph import load_graph, subgraph_signature
from slimdet.oracles import make_clustered_box_fixture, write_fixture_bundle
from slimdet.transforms import fold_bn


def run_cli(*args):
    return main([str(a) for a in args])


@pytest.fixture
def small_model(tmp_path):
    g = tmp_path / "g.json"
    w = tmp_path / "w.wstr"
    rc = run_cli("zoo", "emit", "--model", "zoo:ssdr_0.47", "--input-shape", "1,3,64,80",
                 "--out-graph", g, "--out-weights", w)
    assert rc == 0
    return g, w


class TestZooAndInspect:
    def test_zoo_list(self, capsys):
        assert run_cli("zoo", "list") == 0
        out = capsys.readouterr().out
        assert "ssdr_1.5" in out and "resnet10_ssd" in out

    def test_inspect_full_scale_totals(self, capsys):
        assert run_cli("inspect", "--model", "zoo:ssdr_1.5", "--json") == 0
        doc = json.loads(capsys.readouterr().out)
        assert abs(doc["cost"]["total_macs"] - 1.5e9) / 1.5e9 < 0.10
        assert abs(doc["cost"]["total_params"] - 1.1e6) / 1.1e6 < 0.10

    def test_inspect_json_round_trips(self, small_model, capsys):
        g, w = small_model
        assert run_cli("inspect", "--graph", g, "--weights", w, "--json") == 0
        doc = json.loads(capsys.readouterr().out)
        assert json.loads(json.dumps(doc)) == doc
        assert {"meta", "layers", "cost", "input_shape", "outputs"} <= set(doc)

    def test_inspect_empty_graph(self, tmp_path, capsys):
        g = tmp_path / "g.json"
        g.write_text(json.dumps({"input_shape": [1, 2, 4, 4], "nodes": [],
                                 "outputs": ["input"]}))
        w = tmp_path / "w.wstr"
        from slimdet.executor import WeightStore, save_weights
        save_weights(w, WeightStore())
        assert run_cli("inspect", "--graph", g, "--weights", w, "--json") == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["cost"]["total_macs"] == 0
        assert doc["input_shape"] == [1, 2, 4, 4]

    def test_malformed_model_exit_2(self, tmp_path):
        g = tmp_path / "g.json"
        g.write_text(json.dumps({"input_shape": [1, 2, 4, 4], "outputs": [],
                                 "nodes": [{"id": "a", "kind": "conv", "inputs": ["ghost"],
                                            "spec": {"out_channels": 2, "kernel_h": 1,
                                                     "kernel_w": 1}}]}))
        w = tmp_path / "w.wstr"
        from slimdet.executor import WeightStore, save_weights
        save_weights(w, WeightStore())
        assert run_cli("inspect", "--graph", g, "--weights", w) == 2

    def test_report_dir_artifacts(self, small_model, tmp_path):
        g, w = small_model
        rep = tmp_path / "rep"
        assert run_cli("inspect", "--graph", g, "--weights", w, "--report-dir", rep) == 0
        assert (rep / "report.json").exists()
        assert (rep / "cost.csv").exists()
        assert (rep / "cost.png").exists()
        header = (rep / "cost.csv").read_text().splitlines()[0]
        assert header == "layer_id,macs,params"


class TestTransform:
    def test_empty_pipeline_byte_identical(self, small_model, tmp_path):
        g, w = small_model
        cfg = tmp_path / "pipe.json"
        cfg.write_text("[]")
        og, ow = tmp_path / "o.json", tmp_path / "o.wstr"
        assert run_cli("transform", "--graph", g, "--weights", w, "--pipeline", cfg,
                       "--out-graph", og, "--out-weights", ow) == 0
        assert og.read_bytes() == g.read_bytes()
        assert ow.read_bytes() == w.read_bytes()

    def test_unknown_pass_exit_2_before_work(self, small_model, tmp_path):
        g, w = small_model
        cfg = tmp_path / "pipe.json"
        cfg.write_text(json.dumps([{"pass": "quantize"}]))
        og, ow = tmp_path / "o.json", tmp_path / "o.wstr"
        assert run_cli("transform", "--graph", g, "--weights", w, "--pipeline", cfg,
                       "--out-graph", og, "--out-weights", ow) == 2
        assert not og.exists() and not ow.exists()

    def test_mid_pipeline_failure_flushes_reports(self, small_model, tmp_path):
        g, w = small_model
        cfg = tmp_path / "pipe.json"
        cfg.write_text(json.dumps([
            {"pass": "fold_bn"},
            {"pass": "pca_decompose", "params": {"layer_id": "ghost", "rank": 2}},
        ]))
        og, ow = tmp_path / "o.json", tmp_path / "o.wstr"
        rep = tmp_path / "rep"
        rc = run_cli("transform", "--graph", g, "--weights", w, "--pipeline", cfg,
                     "--out-graph", og, "--out-weights", ow, "--report-dir", rep)
        assert rc == 1
        doc = json.loads((rep / "report.json").read_text())
        assert doc["meta"]["status"].startswith("failed")
        assert len(doc["passes"]) == 1  # the fold report survived

    def test_fold_and_rewrite_match_dense_trunk(self, tmp_path):
        g = tmp_path / "g.json"
        w = tmp_path / "w.wstr"
        assert run_cli("zoo", "emit", "--model", "zoo:resnet10_trunk",
                       "--out-graph", g, "--out-weights", w) == 0
        cfg = tmp_path / "pipe.json"
        cfg.write_text(json.dumps([
            {"pass": "fold_bn"},
            {"pass": "rewrite_stride_to_dilation",
             "params": {"reduction_layer_ids": ["rb3_conv_a", "rb3_shortcut",
                                                "rb4_conv_a", "rb4_shortcut"]}},
        ]))
        og, ow = tmp_path / "o.json", tmp_path / "o.wstr"
        assert run_cli("transform", "--graph", g, "--weights", w, "--pipeline", cfg,
                       "--out-graph", og, "--out-weights", ow, "--no-check") == 0
        got = load_graph(og)
        dense, dw = zoo.build("ssdr_1.5_trunk")
        dense_folded, _ = fold_bn(dense, dw)
        a = subgraph_signature(got, "rb4_add", include_channels=False,
                               bypass_pointwise_shortcuts=True)
        b = subgraph_signature(dense_folded, "rb4_add", include_channels=False,
                               bypass_pointwise_shortcuts=True)
        assert a == b

    def test_budget_pipeline(self, tmp_path):
        g = tmp_path / "g.json"
        w = tmp_path / "w.wstr"
        assert run_cli("zoo", "emit", "--model", "zoo:ssdr_1.5",
                       "--out-graph", g, "--out-weights", w) == 0
        cfg = tmp_path / "pipe.json"
        cfg.write_text(json.dumps([{"pass": "iterative_prune",
                                    "params": {"target_macs": 470_000_000}}]))
        og, ow = tmp_path / "o.json", tmp_path / "o.wstr"
        assert run_cli("transform", "--graph", g, "--weights", w, "--pipeline", cfg,
                       "--out-graph", og, "--out-weights", ow, "--no-check") == 0
        final = report(load_graph(og))
        assert final.total_macs <= 494_000_000


class TestInferAndEval:
    def make_input(self, path, shape=(1, 3, 64, 80), seed=0):
        rng = np.random.default_rng(seed)
        save_tensor(path, Tensor(rng.standard_normal(shape).astype(np.float32)))

    def test_detections_schema_and_determinism(self, small_model, tmp_path):
        g, w = small_model
        t = tmp_path / "img000.tnsr"
        self.make_input(t)
        d1, d2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        for out in (d1, d2):
            assert run_cli("infer", "--graph", g, "--weights", w, "--inputs", t,
                           "--out", out, "--score-threshold", "0.2") == 0
        assert d1.read_bytes() == d2.read_bytes()
        for line in d1.read_text().splitlines():
            rec = json.loads(line)
            assert set(rec) == {"image_id", "x", "y", "w", "h", "score", "class"}
            assert rec["image_id"] == "img000"

    def test_pruned_and_masked_models_detect_identically(self, tmp_path):
        from slimdet.executor import save_weights
        from slimdet.graph import TensorShape, save_graph
        from slimdet.transforms import (
            PruneSchedule, apply_selection, mask_channels, select_prune,
        )
        shape = (1, 3, 64, 80)
        g, w = zoo.build("ssdr_0.47", TensorShape(*shape), seed=13)
        sels = select_prune(g, w, PruneSchedule(0.10, 0.20))
        pruned_g, pruned_w = apply_selection(g, w, sels)
        masked_w = mask_channels(g, w, sels)
        pg, pw = tmp_path / "p.json", tmp_path / "p.wstr"
        mg, mw = tmp_path / "m.json", tmp_path / "m.wstr"
        save_graph(pg, pruned_g), save_weights(pw, pruned_w)
        save_graph(mg, g), save_weights(mw, masked_w)
        t = tmp_path / "img000.tnsr"
        self.make_input(t, shape=shape, seed=3)
        dp, dm = tmp_path / "dp.jsonl", tmp_path / "dm.jsonl"
        assert run_cli("infer", "--graph", pg, "--weights", pw, "--inputs", t,
                       "--out", dp, "--score-threshold", "0.2") == 0
        assert run_cli("infer", "--graph", mg, "--weights", mw, "--inputs", t,
                       "--out", dm, "--score-threshold", "0.2") == 0
        assert dp.read_bytes() == dm.read_bytes()

    def test_shape_mismatch_names_file(self, small_model, tmp_path, capsys):
        g, w = small_model
        t = tmp_path / "wrong.tnsr"
        self.make_input(t, shape=(1, 3, 32, 40))
        rc = run_cli("infer", "--graph", g, "--weights", w, "--inputs", t,
                     "--out", tmp_path / "d.jsonl")
        assert rc == 2
        assert "wrong.tnsr" in capsys.readouterr().err

    def test_eval_perfect_and_empty(self, tmp_path, capsys):
        gt = tmp_path / "gt.jsonl"
        gt.write_text(json.dumps({"image_id": "a",
                                  "boxes": [{"x": 10, "y": 10, "w": 20, "h": 20, "class": 1}],
                                  "ignore": []}) + "\n")
        det = tmp_path / "d.jsonl"
        det.write_text(json.dumps({"image_id": "a", "x": 10.0, "y": 10.0, "w": 20.0,
                                   "h": 20.0, "score": 0.9, "class": 1}) + "\n")
        assert run_cli("eval", "--gt", gt, "--det", det) == 0
        assert "AP 1.0000" in capsys.readouterr().out
        det.write_text("")
        assert run_cli("eval", "--gt", gt, "--det", det) == 0
        assert "AP 0.0000" in capsys.readouterr().out

    def test_eval_matches_library(self, tmp_path, capsys):
        root = write_fixture_bundle(tmp_path, seed=4)
        gt, det = os.path.join(root, "gt.jsonl"), os.path.join(root, "dets.jsonl")
        assert run_cli("eval", "--gt", gt, "--det", det, "--json") == 0
        doc = json.loads(capsys.readouterr().out)
        want, _ = evaluate_dataset(gt, det)
        assert doc["ap"] == pytest.approx(want.ap, abs=1e-12)

    def test_eval_schema_error_exit_2(self, tmp_path, capsys):
        gt = tmp_path / "gt.jsonl"
        gt.write_text("not json\n")
        det = tmp_path / "d.jsonl"
        det.write_text("")
        assert run_cli("eval", "--gt", gt, "--det", det) == 2
        assert ":1" in capsys.readouterr().err

    def test_eval_report_artifacts(self, tmp_path):
        root = write_fixture_bundle(tmp_path, seed=4)
        rep = tmp_path / "rep"
        assert run_cli("eval", "--gt", os.path.join(root, "gt.jsonl"),
                       "--det", os.path.join(root, "dets.jsonl"),
                       "--report-dir", rep) == 0
        assert (rep / "eval.json").exists()
        assert (rep / "pr_curve.csv").exists()
        assert (rep / "pr_curve.png").exists()


class TestPriors:
    def test_cluster_mode(self, tmp_path, capsys):
        boxes = make_clustered_box_fixture(0)
        gt = tmp_path / "gt.jsonl"
        with open(gt, "w") as f:
            for i, b in enumerate(boxes):
                f.write(json.dumps({"image_id": f"img{i}",
                                    "boxes": [{"x": 0.0, "y": 0.0, "w": b.w, "h": b.h,
                                               "class": 1}],
                                    "ignore": []}) + "\n")
        out = tmp_path / "priors.json"
        assert run_cli("priors", "--mode", "cluster", "--gt", gt, "--out", out,
                       "--seed", "3") == 0
        doc = json.loads(out.read_text())
        assert len(doc["priors"]) == 12

    def test_cluster_too_few_boxes(self, tmp_path, capsys):
        gt = tmp_path / "gt.jsonl"
        gt.write_text(json.dumps({"image_id": "a",
                                  "boxes": [{"x": 0, "y": 0, "w": 5, "h": 5, "class": 1}],
                                  "ignore": []}) + "\n")
        assert run_cli("priors", "--mode", "cluster", "--gt", gt,
                       "--out", tmp_path / "p.json") == 2

    def test_ssd_mode_echoes_model_config(self, small_model, tmp_path):
        g, w = small_model
        out = tmp_path / "priors.json"
        assert run_cli("priors", "--mode", "ssd", "--graph", g, "--weights", w,
                       "--out", out) == 0
        doc = json.loads(out.read_text())
        priors = priors_from_json(doc["priors"])
        graph = load_graph(g)
        from slimdet.detection import generate_priors
        assert priors == generate_priors(zoo.prior_config_for_heads(graph))

    def test_seeded_runs_identical(self, tmp_path):
        boxes = make_clustered_box_fixture(1, jitter=0.03)
        gt = tmp_path / "gt.jsonl"
        with open(gt, "w") as f:
            for i, b in enumerate(boxes):
                f.write(json.dumps({"image_id": f"img{i}",
                                    "boxes": [{"x": 0.0, "y": 0.0, "w": b.w, "h": b.h,
                                               "class": 1}],
                                    "ignore": []}) + "\n")
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        for out in (a, b):
            assert run_cli("priors", "--mode", "cluster", "--gt", gt, "--out", out,
                           "--seed", "7") == 0
        assert a.read_bytes() == b.read_bytes()


class TestFixtureBundle:
    def test_regeneration_byte_identical(self, tmp_path):
        d1 = write_fixture_bundle(tmp_path / "one", seed=9)
        d2 = write_fixture_bundle(tmp_path / "two", seed=9)
        names = sorted(os.listdir(d1))
        assert names == sorted(os.listdir(d2))
        for name in names:
            with open(os.path.join(d1, name), "rb") as fa, \
                 open(os.path.join(d2, name), "rb") as fb:
                assert fa.read() == fb.read(), name
