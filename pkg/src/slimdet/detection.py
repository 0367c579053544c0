"""SSD-style detection head utilities: prior boxes, ground-truth-driven
prior clustering, box encoding, and non-maximum suppression.

All box coordinates are pixels; boxes are center-format (cx, cy, w, h).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_VARIANCES = (0.1, 0.1, 0.2, 0.2)
DEFAULT_ASPECT_RATIOS = (1.0, 2.0, 0.5, 3.0, 1.0 / 3.0)


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle, center format, pixel units."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box size must be positive, got w={self.w}, h={self.h}")

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    @classmethod
    def from_corner(cls, x: float, y: float, w: float, h: float) -> "Box":
        return cls(x + w / 2, y + h / 2, w, h)


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    class_id: int


@dataclass(frozen=True)
class PriorLevel:
    feature_map: tuple[int, int]  # (h, w) cells
    min_size: float
    max_size: float
    aspect_ratios: tuple[float, ...] = DEFAULT_ASPECT_RATIOS

    def __post_init__(self):
        if not self.min_size < self.max_size:
            raise ValueError(f"min_size must be < max_size, got {self.min_size}/{self.max_size}")
        if any(r <= 0 for r in self.aspect_ratios):
            raise ValueError("aspect ratios must be positive")

    def boxes_per_cell(self) -> int:
        return 2 + sum(1 for r in self.aspect_ratios if r != 1.0)


@dataclass(frozen=True)
class PriorConfig:
    levels: tuple[PriorLevel, ...]
    image: tuple[int, int]  # (h, w) pixels
    variances: tuple[float, float, float, float] = DEFAULT_VARIANCES

    def __post_init__(self):
        if any(v <= 0 for v in self.variances):
            raise ValueError("variances must be positive")


def default_prior_config(image: tuple[int, int],
                         feature_maps: list[tuple[int, int]],
                         small_range: tuple[float, float] = (15.0, 50.0),
                         max_scale_frac: float = 0.9) -> PriorConfig:
    """Three-level config: the first level uses the small 15/50 range and the
    remaining level sizes interpolate linearly up to max_scale_frac of the
    short image side (50 -> 140 -> 230 for a 256-pixel short side)."""
    n = len(feature_maps)
    top = max_scale_frac * min(image)
    cuts = [round(small_range[1] + (top - small_range[1]) * i / (n - 1)) for i in range(n)]
    levels = [PriorLevel(feature_map=tuple(feature_maps[0]),
                         min_size=small_range[0], max_size=small_range[1])]
    for i in range(1, n):
        levels.append(PriorLevel(feature_map=tuple(feature_maps[i]),
                                 min_size=float(cuts[i - 1]), max_size=float(cuts[i])))
    return PriorConfig(levels=tuple(levels), image=tuple(image))


def generate_priors(config: PriorConfig) -> list[Box]:
    """Deterministic prior list.

    Per cell (row-major over each level's feature map, centers at
    (j+0.5)/w_f * W, (i+0.5)/h_f * H): one square of side min_size, one of
    side sqrt(min*max), then one (min*sqrt(r), min/sqrt(r)) box per listed
    ratio r != 1, in order.
    """
    H, W = config.image
    priors: list[Box] = []
    for level in config.levels:
        fh, fw = level.feature_map
        sizes: list[tuple[float, float]] = [
            (level.min_size, level.min_size),
            (math.sqrt(level.min_size * level.max_size),) * 2,
        ]
        for r in level.aspect_ratios:
            if r == 1.0:
                continue
            sizes.append((level.min_size * math.sqrt(r), level.min_size / math.sqrt(r)))
        for i in range(fh):
            cy = (i + 0.5) / fh * H
            for j in range(fw):
                cx = (j + 0.5) / fw * W
                for bw, bh in sizes:
                    priors.append(Box(cx, cy, bw, bh))
    return priors


# ---------------------------------------------------------------------------
# Prior clustering
# ---------------------------------------------------------------------------

def _kmeans_1d(values: np.ndarray, k: int, rng: np.random.Generator,
               max_rounds: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd k-means on a 1-D feature with seeded farthest-point init.

    Runs to an assignment fixpoint or max_rounds. An empty cluster is
    re-seeded from the point farthest from its current center; with fewer
    distinct values than k the surplus centers stay duplicated, which keeps
    the degenerate all-identical input well defined.
    """
    centers = np.empty(k, dtype=np.float64)
    centers[0] = values[int(rng.integers(len(values)))]
    for i in range(1, k):
        d = np.min(np.abs(values[:, None] - centers[None, :i]), axis=1)
        centers[i] = values[int(np.argmax(d))]

    assign = np.zeros(len(values), dtype=np.int64)
    for _ in range(max_rounds):
        new_assign = np.argmin((values[:, None] - centers[None, :]) ** 2, axis=1)
        for c in range(k):
            sel = new_assign == c
            if np.any(sel):
                centers[c] = values[sel].mean()
            else:
                d = np.abs(values - centers[new_assign])
                far = int(np.argmax(d))
                if d[far] > 0:
                    centers[c] = values[far]
                    new_assign[far] = c
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return centers, assign


def cluster_priors(gt_boxes: list[Box], n_scales: int = 3, n_per_scale: int = 4,
                   seed: int = 0) -> list[Box]:
    """Two-stage k-means over ground-truth boxes: sqrt(w*h) into n_scales
    groups, then log(w/h) within each group into n_per_scale ratio
    sub-groups. Emits one prior per sub-group with the group's mean scale
    and the sub-group's (geometric) mean ratio; n_scales*n_per_scale boxes
    total, ordered by ascending scale then ratio.
    """
    if len(gt_boxes) < n_scales * n_per_scale:
        raise ValueError(f"need at least {n_scales * n_per_scale} boxes, got {len(gt_boxes)}")
    # sort first so the result is invariant to input permutation
    boxes = sorted(gt_boxes, key=lambda b: (b.w * b.h, b.w / b.h))
    scales = np.array([math.sqrt(b.w * b.h) for b in boxes])
    log_ratios = np.array([math.log(b.w / b.h) for b in boxes])

    rng = np.random.default_rng(seed)
    _, assign = _kmeans_1d(scales, n_scales, rng)

    group_order = sorted(range(n_scales),
                         key=lambda g: scales[assign == g].mean() if np.any(assign == g) else np.inf)
    global_ratio = float(np.exp(log_ratios.mean()))
    # centers of empty scale groups duplicate an existing value; fill position
    empty_fill = float(scales.mean())

    priors: list[Box] = []
    for g in group_order:
        sel = assign == g
        if np.any(sel):
            scale = float(scales[sel].mean())
            _, sub_assign = _kmeans_1d(log_ratios[sel], n_per_scale, rng)
            sub_vals = log_ratios[sel]
            sub_centers = []
            for s in range(n_per_scale):
                ssel = sub_assign == s
                sub_centers.append(float(sub_vals[ssel].mean()) if np.any(ssel)
                                   else float(sub_vals.mean()))
            sub_centers.sort()
            ratios = [math.exp(v) for v in sub_centers]
        else:
            scale = empty_fill
            ratios = [global_ratio] * n_per_scale
        for r in ratios:
            # clustered priors carry size only; centers come from placement
            priors.append(Box(0.0, 0.0, scale * math.sqrt(r), scale / math.sqrt(r)))
    return priors


def priors_to_json(priors: list[Box]) -> list[dict]:
    return [{"cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h} for b in priors]


def priors_from_json(doc: list[dict]) -> list[Box]:
    return [Box(float(d["cx"]), float(d["cy"]), float(d["w"]), float(d["h"])) for d in doc]


# ---------------------------------------------------------------------------
# Box coding
# ---------------------------------------------------------------------------

def encode(gt: Box, prior: Box, variances=DEFAULT_VARIANCES) -> tuple[float, float, float, float]:
    """Offsets of a ground-truth box relative to a prior."""
    v0, v1, v2, v3 = variances
    return ((gt.cx - prior.cx) / prior.w / v0,
            (gt.cy - prior.cy) / prior.h / v1,
            math.log(gt.w / prior.w) / v2,
            math.log(gt.h / prior.h) / v3)


def decode(offsets, prior: Box, variances=DEFAULT_VARIANCES) -> Box:
    """Inverse of :func:`encode`. Degenerate (underflowed) sizes clamp to one
    pixel and are logged."""
    v0, v1, v2, v3 = variances
    t0, t1, t2, t3 = offsets
    cx = t0 * v0 * prior.w + prior.cx
    cy = t1 * v1 * prior.h + prior.cy
    w = prior.w * math.exp(t2 * v2)
    h = prior.h * math.exp(t3 * v3)
    if not (w > 0 and h > 0 and math.isfinite(w) and math.isfinite(h)):
        logger.warning("decoded box size degenerate (w=%r h=%r); clamping to 1px", w, h)
        w = max(w, 1.0) if math.isfinite(w) else 1.0
        h = max(h, 1.0) if math.isfinite(h) else 1.0
    return Box(cx, cy, w, h)


def box_iou(a: Box, b: Box) -> float:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union


def nms(detections: list[Detection], iou_threshold: float,
        max_keep: int | None = None) -> list[Detection]:
    """Greedy suppression: walk detections by descending score (ties keep
    input order) and drop any box whose IoU with an already-kept box exceeds
    the threshold."""
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    kept: list[int] = []
    for i in order:
        if max_keep is not None and len(kept) >= max_keep:
            break
        d = detections[i]
        if not math.isfinite(d.score):
            raise ValueError("detection scores must be finite")
        if all(box_iou(d.box, detections[j].box) <= iou_threshold for j in kept):
            kept.append(i)
    return [detections[i] for i in kept]


# ---------------------------------------------------------------------------
# Raw head-output decoding
# ---------------------------------------------------------------------------

def decode_predictions(cls_maps: list[np.ndarray], loc_maps: list[np.ndarray],
                       priors_per_level: list[list[Box]], num_classes: int,
                       variances=DEFAULT_VARIANCES,
                       score_threshold: float = 0.01) -> list[Detection]:
    """Turn per-level class/offset maps into scored detections.

    cls_maps[l] has P*num_classes channels, loc_maps[l] P*4 channels, where
    P is the per-cell prior count; channel layout is prior-major. Scores are
    per-prior softmax; class 0 is background and never emitted.
    """
    dets: list[Detection] = []
    for cls_map, loc_map, priors in zip(cls_maps, loc_maps, priors_per_level):
        _, ch_cls, fh, fw = cls_map.shape
        P = ch_cls // num_classes
        if ch_cls != P * num_classes or loc_map.shape[1] != P * 4:
            raise ValueError(
                f"head channels ({ch_cls} cls, {loc_map.shape[1]} loc) do not factor into "
                f"{num_classes} classes / 4 offsets")
        if len(priors) != P * fh * fw:
            raise ValueError(f"prior count {len(priors)} != {P}*{fh}*{fw}")
        logits = cls_map[0].reshape(P, num_classes, fh, fw).astype(np.float64)
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        probs = e / e.sum(axis=1, keepdims=True)
        offsets = loc_map[0].reshape(P, 4, fh, fw)
        idx = 0
        for i in range(fh):
            for j in range(fw):
                for p in range(P):
                    prior = priors[idx]
                    idx += 1
                    for k in range(1, num_classes):
                        score = float(probs[p, k, i, j])
                        if score < score_threshold:
                            continue
                        box = decode(offsets[p, :, i, j].tolist(), prior, variances)
                        dets.append(Detection(box=box, score=score, class_id=k))
    return dets


def prior_config_to_dict(config: PriorConfig) -> dict:
    return {
        "image": list(config.image),
        "variances": list(config.variances),
        "levels": [{"feature_map": list(l.feature_map), "min_size": l.min_size,
                    "max_size": l.max_size, "aspect_ratios": list(l.aspect_ratios)}
                   for l in config.levels],
    }


def prior_config_from_dict(doc: dict) -> PriorConfig:
    unknown = set(doc) - {"image", "variances", "levels"}
    if unknown:
        raise ValueError(f"unknown prior-config fields {sorted(unknown)}")
    for k in ("image", "levels"):
        if k not in doc:
            raise ValueError(f"prior config missing field {k!r}")
    levels = []
    for i, l in enumerate(doc["levels"]):
        unknown = set(l) - {"feature_map", "min_size", "max_size", "aspect_ratios"}
        if unknown:
            raise ValueError(f"levels[{i}]: unknown fields {sorted(unknown)}")
        levels.append(PriorLevel(
            feature_map=tuple(int(v) for v in l["feature_map"]),
            min_size=float(l["min_size"]),
            max_size=float(l["max_size"]),
            aspect_ratios=tuple(float(r) for r in l.get("aspect_ratios", DEFAULT_ASPECT_RATIOS)),
        ))
    return PriorConfig(levels=tuple(levels),
                       image=tuple(int(v) for v in doc["image"]),
                       variances=tuple(float(v) for v in doc.get("variances", DEFAULT_VARIANCES)))
