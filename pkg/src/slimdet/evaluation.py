"""Detection metrics with ignore-region handling.

Ignore regions remove work from the metric entirely: detections mostly
covered by a region are dropped (never counted as false positives) and
ground-truth boxes centered inside a region are dropped from the recall
denominator. Matching is greedy in descending score with all-point
interpolated average precision by default.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .detection import Box, Detection, box_iou

logger = logging.getLogger(__name__)


class DatasetFormatError(ValueError):
    """Bad annotation/detection file; the message carries the line number."""


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    boxes: tuple[tuple[Box, int], ...]          # (box, class_id)
    ignore_regions: tuple[Box, ...] = ()


@dataclass
class EvalResult:
    ap: float
    precision: list[float]
    recall: list[float]
    counts: dict[str, int]                     # tp, fp, n_gt
    flags: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.7
    ioa_threshold: float = 0.5
    interpolation: str = "all_point"           # or "11_point"


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes."""
    return box_iou(a, b)


def _intersection_area(a: Box, b: Box) -> float:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    return iw * ih if iw > 0 and ih > 0 else 0.0


def filter_ignore(detections: Sequence[Detection], gt: GroundTruth,
                  ioa_threshold: float) -> tuple[list[Detection], GroundTruth]:
    """Apply ignore regions to one image.

    A detection is removed when its intersection-over-own-area with any
    region exceeds the threshold; a ground-truth box is removed when its
    center lies inside any region. Removed items count toward nothing.
    """
    if not gt.ignore_regions:
        return list(detections), gt
    kept_dets = []
    for d in detections:
        area = d.box.w * d.box.h
        ioa = max((_intersection_area(d.box, r) / area for r in gt.ignore_regions), default=0.0)
        if ioa <= ioa_threshold:
            kept_dets.append(d)
    kept_boxes = []
    for box, cls in gt.boxes:
        inside = any(r.corners()[0] <= box.cx <= r.corners()[2]
                     and r.corners()[1] <= box.cy <= r.corners()[3]
                     for r in gt.ignore_regions)
        if not inside:
            kept_boxes.append((box, cls))
    return kept_dets, GroundTruth(gt.image_id, tuple(kept_boxes), gt.ignore_regions)


def _match(detections: Mapping[str, Sequence[Detection]],
           gts: Sequence[GroundTruth], iou_threshold: float):
    """Greedy score-descending matching; each ground truth matches at most
    once. Ties in score keep (image, input) order. Returns (tp, fp, n_gt,
    per-image counters)."""
    gt_by_image = {g.image_id: g for g in gts}
    flat: list[tuple[str, Detection, int]] = []
    order = 0
    for image_id in detections:
        for d in detections[image_id]:
            flat.append((image_id, d, order))
            order += 1
    flat.sort(key=lambda t: (-t[1].score, t[2]))

    matched: dict[str, set[int]] = {g.image_id: set() for g in gts}
    tp = np.zeros(len(flat), dtype=np.int64)
    per_image: dict[str, dict[str, int]] = {
        g.image_id: {"tp": 0, "fp": 0, "n_gt": len(g.boxes)} for g in gts}
    for rank, (image_id, det, _) in enumerate(flat):
        gt = gt_by_image.get(image_id)
        if gt is None:
            per_image.setdefault(image_id, {"tp": 0, "fp": 0, "n_gt": 0})
            per_image[image_id]["fp"] += 1
            continue
        best, best_iou = None, iou_threshold
        for gi, (box, cls) in enumerate(gt.boxes):
            if cls != det.class_id or gi in matched[image_id]:
                continue
            v = box_iou(det.box, box)
            if v >= best_iou and (best is None or v > best_iou):
                best, best_iou = gi, v
        if best is not None:
            matched[image_id].add(best)
            tp[rank] = 1
            per_image[image_id]["tp"] += 1
        else:
            per_image[image_id]["fp"] += 1
    n_gt = sum(len(g.boxes) for g in gts)
    return tp, n_gt, per_image


def _ap_from_counts(tp: np.ndarray, n_gt: int, interpolation: str) -> tuple[float, list, list]:
    if len(tp) == 0 or n_gt == 0:
        return 0.0, [], []
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1 - tp)
    recall = cum_tp / n_gt
    precision = cum_tp / (cum_tp + cum_fp)
    if interpolation == "11_point":
        ap = 0.0
        for t in np.linspace(0, 1, 11):
            mask = recall >= t
            ap += (precision[mask].max() if mask.any() else 0.0) / 11
        return float(ap), precision.tolist(), recall.tolist()
    # all-point: integrate recall steps under the precision envelope
    mrec = np.concatenate(([0.0], recall))
    mpre = np.concatenate(([0.0], precision))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    ap = float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))
    return ap, precision.tolist(), recall.tolist()


def average_precision(detections: Mapping[str, Sequence[Detection]],
                      gts: Sequence[GroundTruth], iou_threshold: float,
                      interpolation: str = "all_point") -> EvalResult:
    """Single-class-pool average precision over pre-filtered inputs."""
    tp, n_gt, _ = _match(detections, gts, iou_threshold)
    flags = []
    if n_gt == 0:
        total = sum(len(v) for v in detections.values())
        if total:
            flags.append("no ground truth but detections present; AP defined as 0")
            logger.warning("AP over zero ground-truth boxes with %d detections", total)
        return EvalResult(0.0, [], [], {"tp": 0, "fp": total, "n_gt": 0}, flags)
    ap, precision, recall = _ap_from_counts(tp, n_gt, interpolation)
    counts = {"tp": int(tp.sum()), "fp": int(len(tp) - tp.sum()), "n_gt": n_gt}
    return EvalResult(ap, precision, recall, counts, flags)


# ---------------------------------------------------------------------------
# Dataset files (JSON lines)
# ---------------------------------------------------------------------------

_GT_KEYS = {"image_id", "boxes", "ignore"}
_GT_BOX_KEYS = {"x", "y", "w", "h", "class"}
_REGION_KEYS = {"x", "y", "w", "h"}
_DET_KEYS = {"image_id", "x", "y", "w", "h", "score", "class"}


def _parse_lines(path):
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetFormatError(f"{path}:{lineno}: invalid JSON: {e}") from e


def load_ground_truth(path) -> list[GroundTruth]:
    """Read JSON-lines ground truth: one object per image with corner+size
    pixel boxes and optional ignore regions."""
    out = []
    seen = set()
    for lineno, doc in _parse_lines(path):
        where = f"{path}:{lineno}"
        if not isinstance(doc, dict) or set(doc) - _GT_KEYS or "image_id" not in doc:
            raise DatasetFormatError(f"{where}: expected object with keys {sorted(_GT_KEYS)}")
        image_id = str(doc["image_id"])
        if image_id in seen:
            raise DatasetFormatError(f"{where}: duplicate image_id {image_id!r}")
        seen.add(image_id)
        boxes = []
        for b in doc.get("boxes", []):
            if set(b) - _GT_BOX_KEYS or not _GT_BOX_KEYS <= set(b):
                raise DatasetFormatError(f"{where}: box must have keys {sorted(_GT_BOX_KEYS)}")
            try:
                boxes.append((Box.from_corner(float(b["x"]), float(b["y"]),
                                              float(b["w"]), float(b["h"])), int(b["class"])))
            except ValueError as e:
                raise DatasetFormatError(f"{where}: {e}") from e
        regions = []
        for r in doc.get("ignore", []):
            if set(r) != _REGION_KEYS:
                raise DatasetFormatError(f"{where}: ignore region must have keys {sorted(_REGION_KEYS)}")
            try:
                regions.append(Box.from_corner(float(r["x"]), float(r["y"]),
                                               float(r["w"]), float(r["h"])))
            except ValueError as e:
                raise DatasetFormatError(f"{where}: {e}") from e
        out.append(GroundTruth(image_id, tuple(boxes), tuple(regions)))
    return out


def load_detections(path) -> dict[str, list[Detection]]:
    """Read JSON-lines detections (one object per detection)."""
    out: dict[str, list[Detection]] = {}
    for lineno, doc in _parse_lines(path):
        where = f"{path}:{lineno}"
        if not isinstance(doc, dict) or set(doc) != _DET_KEYS:
            raise DatasetFormatError(f"{where}: expected object with keys {sorted(_DET_KEYS)}")
        try:
            det = Detection(box=Box.from_corner(float(doc["x"]), float(doc["y"]),
                                                float(doc["w"]), float(doc["h"])),
                            score=float(doc["score"]), class_id=int(doc["class"]))
        except ValueError as e:
            raise DatasetFormatError(f"{where}: {e}") from e
        out.setdefault(str(doc["image_id"]), []).append(det)
    return out


def save_detections(path, detections: Mapping[str, Sequence[Detection]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for image_id in detections:
            for d in detections[image_id]:
                x1, y1, _, _ = d.box.corners()
                rec = {"image_id": image_id,
                       "x": x1 + 0.0, "y": y1 + 0.0,          # normalize -0.0
                       "w": d.box.w + 0.0, "h": d.box.h + 0.0,
                       "score": d.score + 0.0, "class": d.class_id}
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def evaluate_dataset(gt_path, det_path, config: EvalConfig = EvalConfig()
                     ) -> tuple[EvalResult, dict[str, dict[str, int]]]:
    """Full-file evaluation: per-image ignore filtering, then one globally
    pooled PR curve. Returns the result and a per-image tp/fp/n_gt
    breakdown."""
    gts = load_ground_truth(gt_path)
    detections = load_detections(det_path)

    known = {g.image_id for g in gts}
    unknown = sorted(set(detections) - known)
    if unknown:
        raise DatasetFormatError(
            f"{det_path}: detections reference unknown image ids: {', '.join(unknown)}")

    filtered_dets: dict[str, list[Detection]] = {}
    filtered_gts: list[GroundTruth] = []
    for gt in gts:
        dets, fgt = filter_ignore(detections.get(gt.image_id, []), gt, config.ioa_threshold)
        filtered_dets[gt.image_id] = dets
        filtered_gts.append(fgt)

    tp, n_gt, per_image = _match(filtered_dets, filtered_gts, config.iou_threshold)
    flags = []
    if n_gt == 0 and len(tp):
        flags.append("no ground truth but detections present; AP defined as 0")
    ap, precision, recall = _ap_from_counts(tp, n_gt, config.interpolation)
    counts = {"tp": int(tp.sum()), "fp": int(len(tp) - tp.sum()), "n_gt": n_gt}
    return EvalResult(ap, precision, recall, counts, flags), per_image
