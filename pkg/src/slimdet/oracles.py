"""Independent brute-force oracles and deterministic fixture generators.

Everything here exists to certify the fast paths elsewhere and deliberately
shares no implementation code with them: the convolution oracle is six
nested Python loops, suppression is a quadratic scan, average precision is
an exhaustive matcher with direct Riemann integration, and receptive
fields are measured by actually perturbing input pixels. Clarity beats
speed throughout; keep the instances small.
"""

from __future__ import annotations

import json
from typing import Mapping, Sequence

import numpy as np

from .detection import Box, Detection
from .evaluation import GroundTruth
from .graph import (
    INPUT_ID, ConvSpec, Graph, ReceptiveField, SPATIAL_KINDS,
)


class OracleError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Direct convolution
# ---------------------------------------------------------------------------

def oracle_conv(x: np.ndarray, spec: ConvSpec, weight: np.ndarray,
                bias: np.ndarray | None = None) -> np.ndarray:
    """Six-nested-loop grouped convolution; zero outside bounds."""
    n, c, h, w = x.shape
    icg = c // spec.groups
    ocg = spec.out_channels // spec.groups
    sh, sw = spec.stride
    ph, pw = spec.pad
    dh, dw = spec.dilation
    ekh = dh * (spec.kernel_h - 1) + 1
    ekw = dw * (spec.kernel_w - 1) + 1
    oh = (h + 2 * ph - ekh) // sh + 1
    ow = (w + 2 * pw - ekw) // sw + 1
    out = np.zeros((n, spec.out_channels, oh, ow), dtype=np.float32)
    for b in range(n):
        for o in range(spec.out_channels):
            g = o // ocg
            for y in range(oh):
                for xx in range(ow):
                    acc = float(bias[o]) if bias is not None else 0.0
                    for ci in range(icg):
                        for i in range(spec.kernel_h):
                            iy = y * sh - ph + i * dh
                            if iy < 0 or iy >= h:
                                continue
                            for j in range(spec.kernel_w):
                                ix = xx * sw - pw + j * dw
                                if ix < 0 or ix >= w:
                                    continue
                                acc += float(weight[o, ci, i, j]) * float(x[b, g * icg + ci, iy, ix])
                    out[b, o, y, xx] = acc
    return out


# ---------------------------------------------------------------------------
# Quadratic suppression
# ---------------------------------------------------------------------------

def _corner_iou(a: Box, b: Box) -> float:
    ax1, ay1 = a.cx - a.w / 2, a.cy - a.h / 2
    ax2, ay2 = a.cx + a.w / 2, a.cy + a.h / 2
    bx1, by1 = b.cx - b.w / 2, b.cy - b.h / 2
    bx2, by2 = b.cx + b.w / 2, b.cy + b.h / 2
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    if inter == 0.0:
        return 0.0
    return inter / (a.w * a.h + b.w * b.h - inter)


def oracle_nms(detections: Sequence[Detection], iou_threshold: float,
               max_keep: int | None = None) -> list[int]:
    """Kept input indices after brute-force suppression."""
    ranked = sorted(range(len(detections)),
                    key=lambda i: (-detections[i].score, i))
    kept: list[int] = []
    for i in ranked:
        if max_keep is not None and len(kept) >= max_keep:
            break
        suppressed = False
        for j in kept:
            if _corner_iou(detections[i].box, detections[j].box) > iou_threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(i)
    return kept


# ---------------------------------------------------------------------------
# Exhaustive average precision
# ---------------------------------------------------------------------------

def oracle_ap(detections: Mapping[str, Sequence[Detection]],
              gts: Sequence[GroundTruth], iou_threshold: float) -> float:
    """Greedy matching followed by direct integration of the interpolated
    precision over recall steps. Small instances only."""
    flat = []
    order = 0
    for image_id in detections:
        for d in detections[image_id]:
            flat.append((-d.score, order, image_id, d))
            order += 1
    flat.sort(key=lambda t: (t[0], t[1]))
    open_gts = {g.image_id: list(g.boxes) for g in gts}
    n_gt = sum(len(g.boxes) for g in gts)
    hits = []
    for _, _, image_id, det in flat:
        candidates = open_gts.get(image_id, [])
        best_i, best_v = -1, iou_threshold
        for gi, (box, cls) in enumerate(candidates):
            if cls != det.class_id:
                continue
            v = _corner_iou(det.box, box)
            if v > best_v or (v == best_v and v >= iou_threshold and best_i < 0):
                best_i, best_v = gi, v
        if best_i >= 0:
            candidates.pop(best_i)
            hits.append(1)
        else:
            hits.append(0)
    if n_gt == 0 or not hits:
        return 0.0
    precisions, recalls = [], []
    tp = fp = 0
    for h in hits:
        tp += h
        fp += 1 - h
        precisions.append(tp / (tp + fp))
        recalls.append(tp / n_gt)
    # suffix max = interpolated precision at each point
    best = 0.0
    interp = [0.0] * len(precisions)
    for i in range(len(precisions) - 1, -1, -1):
        best = max(best, precisions[i])
        interp[i] = best
    ap = 0.0
    prev_r = 0.0
    for i in range(len(recalls)):
        if recalls[i] > prev_r:
            ap += (recalls[i] - prev_r) * interp[i]
            prev_r = recalls[i]
    return ap


# ---------------------------------------------------------------------------
# Perturbation receptive fields
# ---------------------------------------------------------------------------

def _influence_stack(graph: Graph, layer_id: str,
                     points: list[tuple[int, int]]) -> np.ndarray:
    """For a batch of input pixels, the boolean maps of positions at
    ``layer_id`` that can see each pixel. Works on specs alone: channels
    collapse away, every weighted op behaves as an any-over-window, so
    ReLU/norm/softmax are transparent and concat acts like add."""
    h, w = graph.input_shape.h, graph.input_shape.w
    start = np.zeros((len(points), h, w), dtype=bool)
    for b, (py, px) in enumerate(points):
        start[b, py, px] = True
    masks: dict[str, np.ndarray] = {INPUT_ID: start}
    for node in graph.topo_order():
        ins = [masks[src] for src in node.inputs]
        if node.kind in SPATIAL_KINDS:
            spec = node.spec
            m = ins[0]
            ih, iw = m.shape[1:]
            sh, sw = spec.stride
            ph, pw = spec.pad
            dh, dw = spec.dilation
            if node.kind in ("conv", "depthwise_conv"):
                kh, kw = spec.kernel_h, spec.kernel_w
            else:
                kh, kw = spec.kernel
            oh = (ih + 2 * ph - (dh * (kh - 1) + 1)) // sh + 1
            ow = (iw + 2 * pw - (dw * (kw - 1) + 1)) // sw + 1
            padded = np.zeros((m.shape[0], ih + 2 * ph, iw + 2 * pw), dtype=bool)
            padded[:, ph:ph + ih, pw:pw + iw] = m
            out = np.zeros((m.shape[0], oh, ow), dtype=bool)
            for i in range(kh):
                for j in range(kw):
                    y0, x0 = i * dh, j * dw
                    out |= padded[:, y0:y0 + (oh - 1) * sh + 1:sh,
                                  x0:x0 + (ow - 1) * sw + 1:sw]
            masks[node.id] = out
        elif node.kind in ("eltwise_add", "concat"):
            out = ins[0].copy()
            for m in ins[1:]:
                out |= m
            masks[node.id] = out
        else:
            masks[node.id] = ins[0]
        if node.id == layer_id:
            return masks[node.id]
    raise KeyError(f"no layer named {layer_id!r}")


def perturb_rf(graph: Graph, layer_ids: Sequence[str] | None = None
               ) -> dict[str, ReceptiveField]:
    """Measure receptive fields by perturbing single input pixels.

    For each layer a centered output activation is chosen; the set of input
    pixels whose perturbation reaches it is bounded by bisection, and the
    stride is the shift of that set between neighboring outputs. Raises
    OracleError when the window is clipped by the image border (enlarge the
    input) or the layer's output is too small to measure a stride.
    """
    if layer_ids is None:
        layer_ids = [n.id for n in graph.nodes]
    H, W = graph.input_shape.h, graph.input_shape.w
    results: dict[str, ReceptiveField] = {}
    for layer_id in layer_ids:
        # With strided layers some pixels influence nothing; probe a patch
        # of candidates near the center for one that reaches the layer.
        candidates = [(H // 2 + dy, W // 2 + dx) for dy in range(4) for dx in range(4)]
        stack = _influence_stack(graph, layer_id, candidates)
        hit = next((b for b in range(len(candidates)) if stack[b].any()), None)
        if hit is None:
            raise OracleError(f"no pixel near the center reaches layer {layer_id!r}")
        py, px = candidates[hit]
        center_mask = stack[hit]
        ys, xs = np.nonzero(center_mask)
        oh, ow = center_mask.shape
        if oh < 2 or ow < 2:
            raise OracleError(f"layer {layer_id!r} output too small to measure a stride")
        y0 = int(ys[len(ys) // 2])
        x0 = int(xs[len(xs) // 2])

        # Exhaustive per-axis scans (batched): dilated windows have holes, so
        # the receptive field is the bounding box of every lit pixel.
        rows = _influence_stack(graph, layer_id, [(p, px) for p in range(H)])
        cols = _influence_stack(graph, layer_id, [(py, p) for p in range(W)])

        def bbox(lit: np.ndarray, what: str) -> tuple[int, int]:
            idx = np.nonzero(lit)[0]
            if len(idx) == 0:
                raise OracleError(f"no input pixel reaches {what} of layer {layer_id!r}")
            return int(idx[0]), int(idx[-1])

        top, bottom = bbox(rows[:, y0, x0], "the probe output")
        left, right = bbox(cols[:, y0, x0], "the probe output")
        if top == 0 or bottom == H - 1 or left == 0 or right == W - 1:
            raise OracleError(
                f"receptive field of {layer_id!r} clipped by the input border; "
                "measure on a larger input")

        y1 = y0 + 1 if y0 + 1 < oh else y0 - 1
        x1 = x0 + 1 if x0 + 1 < ow else x0 - 1
        top2, _ = bbox(rows[:, y1, x0], "the neighboring output")
        left2, _ = bbox(cols[:, y0, x1], "the neighboring output")
        if top2 == 0 or left2 == 0:
            raise OracleError(
                f"stride probe for {layer_id!r} clipped by the input border")
        results[layer_id] = ReceptiveField(
            size_h=bottom - top + 1,
            size_w=right - left + 1,
            stride_h=abs(top2 - top),
            stride_w=abs(left2 - left),
        )
    return results


# ---------------------------------------------------------------------------
# Random graph generators
# ---------------------------------------------------------------------------

def randomize_weights(graph: Graph, seed: int):
    """Fill a graph with fully random parameters, including non-identity
    norm statistics (positive variances)."""
    from .executor import WeightStore
    from .graph import infer_shapes

    rng = np.random.default_rng(seed)
    shapes = infer_shapes(graph)
    in_shape = {INPUT_ID: graph.input_shape, **shapes}
    store = WeightStore()
    for node in graph.topo_order():
        if node.kind in ("conv", "depthwise_conv"):
            spec = node.spec
            in_c = in_shape[node.inputs[0]].c
            shape = (spec.out_channels, in_c // spec.groups, spec.kernel_h, spec.kernel_w)
            store.set(node.id, "weight", rng.normal(0, 0.5, shape).astype(np.float32))
            if spec.has_bias:
                store.set(node.id, "bias", rng.normal(0, 0.5, spec.out_channels).astype(np.float32))
        elif node.kind == "batch_norm":
            c = in_shape[node.inputs[0]].c
            store.set(node.id, "gamma", rng.uniform(0.5, 1.5, c).astype(np.float32))
            store.set(node.id, "beta", rng.normal(0, 0.5, c).astype(np.float32))
            store.set(node.id, "mean", rng.normal(0, 0.5, c).astype(np.float32))
            store.set(node.id, "variance", rng.uniform(0.5, 2.0, c).astype(np.float32))
    return store


def random_rf_graph(seed: int, max_layers: int = 10) -> Graph:
    """Random small graph (convs, pools, norms, ReLUs, one optional residual
    add) sized so the receptive field sits well inside the input."""
    from .graph import BatchNormSpec, LayerNode, PoolSpec, TensorShape

    rng = np.random.default_rng(seed)
    nodes = []
    tap = INPUT_ID
    c_in = int(rng.integers(1, 4))
    c = c_in
    jump = 1
    rf_bound = 1
    n_strides = 0
    n_layers = int(rng.integers(2, max_layers + 1))
    for idx in range(n_layers):
        kind = rng.choice(["conv", "conv", "conv", "max_pool", "avg_pool", "relu",
                           "batch_norm", "residual"])
        nid = f"l{idx}"
        if kind == "residual":
            # stride-1 same-channel conv added back onto its input tensor
            d = int(rng.choice([1, 2]))
            nodes.append(LayerNode(f"{nid}_conv", "conv", (tap,), ConvSpec(c, 3, 3, 1, d, d)))
            nodes.append(LayerNode(f"{nid}_add", "eltwise_add", (f"{nid}_conv", tap)))
            rf_bound += 2 * d * jump
            tap = f"{nid}_add"
        elif kind == "conv":
            k = int(rng.choice([1, 3, 3, 5]))
            d = int(rng.choice([1, 2])) if k > 1 else 1
            s = int(rng.choice([1, 2])) if n_strides < 2 else 1
            n_strides += s > 1
            oc = int(rng.integers(1, 4))
            pad = d * (k - 1) // 2
            nodes.append(LayerNode(nid, "conv", (tap,), ConvSpec(oc, k, k, s, pad, d)))
            rf_bound += d * (k - 1) * jump
            jump *= s
            c = oc
            tap = nid
        elif kind in ("max_pool", "avg_pool"):
            k = int(rng.choice([2, 3]))
            s = int(rng.choice([1, 2])) if n_strides < 2 else 1
            n_strides += s > 1
            nodes.append(LayerNode(nid, kind, (tap,), PoolSpec(k, s, 0)))
            rf_bound += (k - 1) * jump
            jump *= s
            tap = nid
        elif kind == "batch_norm":
            nodes.append(LayerNode(nid, "batch_norm", (tap,), BatchNormSpec()))
            tap = nid
        else:
            nodes.append(LayerNode(nid, "relu", (tap,)))
            tap = nid
    # room for the window plus stride measurement on both sides
    size = min(2 * rf_bound + 6 * jump + 9, 224)
    return Graph(tuple(nodes), TensorShape(1, c_in, size, size), (tap,))


def random_trunk(seed: int):
    """Random strided trunk for rewrite testing: a few convs, one or two
    stride-2 reductions to remove, spatial layers (and possibly a residual
    pair) downstream. Returns (graph, reduction_layer_ids); built for a
    (1, 3, 64, 80) input."""
    from .graph import LayerNode, TensorShape

    rng = np.random.default_rng(seed)
    nodes = []
    c = 3
    tap = INPUT_ID
    idx = 0

    def conv(out_c, k, s, d=1, bias=False):
        nonlocal tap, idx, c
        nid = f"t{idx}"
        pad = d * (k - 1) // 2
        nodes.append(LayerNode(nid, "conv", (tap,), ConvSpec(out_c, k, k, s, pad, d, 1, bias)))
        tap, c, idx = nid, out_c, idx + 1
        return nid

    conv(int(rng.integers(2, 6)), 3, int(rng.choice([1, 2])))
    if rng.random() < 0.5:
        nodes.append(LayerNode(f"t{idx}_relu", "relu", (tap,)))
        tap = f"t{idx}_relu"
    reductions = [conv(int(rng.integers(2, 6)), 3, 2)]
    if rng.random() < 0.5:
        conv(int(rng.integers(2, 6)), 3, 1)
    if rng.random() < 0.6:
        reductions.append(conv(int(rng.integers(2, 6)), 3, 2))
    # downstream spatial layers that must absorb the dilation
    conv(int(rng.integers(2, 6)), 3, 1)
    if rng.random() < 0.5:
        rid = f"t{idx}_res"
        d = int(rng.choice([1, 2]))
        nodes.append(LayerNode(rid, "conv", (tap,), ConvSpec(c, 3, 3, 1, d, d)))
        nodes.append(LayerNode(f"{rid}_add", "eltwise_add", (rid, tap)))
        tap = f"{rid}_add"
    else:
        conv(int(rng.integers(2, 6)), 3, 1, d=int(rng.choice([1, 2])))
    return Graph(tuple(nodes), TensorShape(1, 3, 64, 80), (tap,)), reductions


def random_conv_bn_pair(seed: int):
    """One random conv followed by a batch norm with random statistics plus
    a matching random input tensor; the folding test bed."""
    from .executor import Tensor
    from .graph import BatchNormSpec, LayerNode, TensorShape

    rng = np.random.default_rng(seed)
    c = int(rng.integers(1, 8))
    oc = int(rng.integers(1, 8))
    k = int(rng.choice([1, 3, 5]))
    s = int(rng.choice([1, 2]))
    d = int(rng.choice([1, 2]))
    pad = int(rng.integers(0, d * (k - 1) + 1))
    bias = bool(rng.random() < 0.5)
    eps = float(rng.choice([0.0, 1e-5, 1e-3]))
    size = d * (k - 1) + 1 + int(rng.integers(2, 9))
    graph = Graph((
        LayerNode("c", "conv", (INPUT_ID,), ConvSpec(oc, k, k, s, pad, d, 1, bias)),
        LayerNode("n", "batch_norm", ("c",), BatchNormSpec(eps)),
    ), TensorShape(1, c, size, size), ("n",))
    weights = randomize_weights(graph, seed + 1)
    x = Tensor(rng.standard_normal((1, c, size, size)).astype(np.float32))
    return graph, weights, x


def random_residual_graph(seed: int) -> Graph:
    """Small net with one or two residual blocks (identity and projection
    shortcuts) plus an untouched output conv, for channel-selection tests."""
    from .graph import BatchNormSpec, LayerNode, TensorShape

    rng = np.random.default_rng(seed)
    c0 = int(rng.integers(3, 8))
    c1 = int(rng.integers(3, 8))
    nodes = [LayerNode("stem", "conv", (INPUT_ID,), ConvSpec(c0, 3, 3, 1, 1, 1))]
    tap = "stem"

    def block(prefix, in_c, out_c, stride):
        nonlocal tap
        nodes.append(LayerNode(f"{prefix}_bn", "batch_norm", (tap,), BatchNormSpec()))
        nodes.append(LayerNode(f"{prefix}_relu", "relu", (f"{prefix}_bn",)))
        nodes.append(LayerNode(f"{prefix}_conv1", "conv", (f"{prefix}_relu",),
                               ConvSpec(out_c, 3, 3, stride, 1, 1)))
        nodes.append(LayerNode(f"{prefix}_conv2", "conv", (f"{prefix}_conv1",),
                               ConvSpec(out_c, 3, 3, 1, 1, 1)))
        if stride != 1 or in_c != out_c:
            nodes.append(LayerNode(f"{prefix}_proj", "conv", (tap,),
                                   ConvSpec(out_c, 1, 1, stride, 0, 1)))
            sc = f"{prefix}_proj"
        else:
            sc = tap
        nodes.append(LayerNode(f"{prefix}_add", "eltwise_add", (f"{prefix}_conv2", sc)))
        tap = f"{prefix}_add"

    block("b1", c0, c1, int(rng.choice([1, 2])))
    if rng.random() < 0.6:
        block("b2", c1, c1, 1)  # identity shortcut couples across blocks
    nodes.append(LayerNode("head", "conv", (tap,), ConvSpec(4, 3, 3, 1, 1, 1, 1, True)))
    return Graph(tuple(nodes), TensorShape(1, 3, 16, 16), ("head",))


# ---------------------------------------------------------------------------
# Deterministic fixtures
# ---------------------------------------------------------------------------

def make_detection_instance(seed: int, n_images: int = 5, max_boxes: int = 20,
                            with_ignore: bool = False, image_size: float = 100.0
                            ) -> tuple[dict[str, list[Detection]], list[GroundTruth]]:
    """Random small evaluation instance: ground truth plus detections that
    mix jittered hits and uniform false positives."""
    rng = np.random.default_rng(seed)

    def rand_box():
        w = float(rng.uniform(5, image_size / 3))
        h = float(rng.uniform(5, image_size / 3))
        cx = float(rng.uniform(w / 2, image_size - w / 2))
        cy = float(rng.uniform(h / 2, image_size - h / 2))
        return Box(cx, cy, w, h)

    gts: list[GroundTruth] = []
    dets: dict[str, list[Detection]] = {}
    for i in range(n_images):
        image_id = f"img{i:03d}"
        boxes = tuple((rand_box(), 1) for _ in range(int(rng.integers(0, max_boxes // 2 + 1))))
        regions = ()
        if with_ignore and rng.random() < 0.7:
            regions = tuple(rand_box() for _ in range(int(rng.integers(1, 3))))
        gts.append(GroundTruth(image_id, boxes, regions))
        image_dets = []
        for box, cls in boxes:
            if rng.random() < 0.75:
                jit = rng.normal(0, box.w * 0.08, size=2)
                scale = float(rng.uniform(0.85, 1.15))
                image_dets.append(Detection(
                    Box(box.cx + float(jit[0]), box.cy + float(jit[1]),
                        box.w * scale, box.h * scale),
                    score=float(rng.uniform(0.3, 1.0)), class_id=cls))
        for _ in range(int(rng.integers(0, max_boxes // 2 + 1))):
            image_dets.append(Detection(rand_box(), score=float(rng.uniform(0, 1)), class_id=1))
        dets[image_id] = image_dets
    return dets, gts


def make_clustered_box_fixture(seed: int, scales=(20.0, 60.0, 180.0),
                               ratios=(0.5, 1.0, 2.0, 3.0), per_combo: int = 5,
                               jitter: float = 0.0) -> list[Box]:
    """Boxes planted exactly (or jittered) on a scale x ratio grid, shuffled."""
    rng = np.random.default_rng(seed)
    boxes = []
    for s in scales:
        for r in ratios:
            for _ in range(per_combo):
                e = 1.0 + float(rng.uniform(-jitter, jitter)) if jitter else 1.0
                boxes.append(Box(0.0, 0.0, s * e * (r ** 0.5), s * e / (r ** 0.5)))
    rng.shuffle(boxes)
    return boxes


def write_fixture_bundle(root, seed: int = 0) -> str:
    """Write the versioned fixture layout the test-suite and CLI smoke tests
    consume; regeneration from the same seed is byte-identical."""
    import os

    from . import zoo
    from .evaluation import save_detections
    from .executor import Tensor, save_tensor, save_weights
    from .graph import TensorShape, save_graph

    vdir = os.path.join(str(root), "v1")
    os.makedirs(vdir, exist_ok=True)
    dets, gts = make_detection_instance(seed, n_images=4, max_boxes=10, with_ignore=True)
    with open(os.path.join(vdir, "gt.jsonl"), "w", encoding="utf-8") as f:
        for g in gts:
            rec = {"image_id": g.image_id,
                   "boxes": [{"x": b.cx - b.w / 2, "y": b.cy - b.h / 2,
                              "w": b.w, "h": b.h, "class": c} for b, c in g.boxes],
                   "ignore": [{"x": r.cx - r.w / 2, "y": r.cy - r.h / 2,
                               "w": r.w, "h": r.h} for r in g.ignore_regions]}
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    save_detections(os.path.join(vdir, "dets.jsonl"), dets)

    shape = TensorShape(1, 3, 64, 80)
    graph, weights = zoo.build("ssdr_0.47", shape, seed=seed)
    save_graph(os.path.join(vdir, "graph.json"), graph)
    save_weights(os.path.join(vdir, "weights.wstr"), weights)
    rng = np.random.default_rng(seed + 1)
    save_tensor(os.path.join(vdir, "input.tnsr"),
                Tensor(rng.standard_normal(shape.as_tuple()).astype(np.float32)))
    with open(os.path.join(vdir, "meta.json"), "w", encoding="utf-8") as f:
        json.dump({"seed": seed, "version": 1}, f, indent=2, sort_keys=True)
        f.write("\n")
    return vdir
