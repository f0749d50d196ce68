"""COCO-style box AP and the duplicate-rate diagnostic."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import boxes_array, pairwise_iou

IOU_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
REPORT_FIELDS = ("mAP", "AP50", "AP75", "AP_small", "AP_medium", "AP_large", "duplicate_rate", "n_predictions")


@dataclass
class Detections:
    boxes: np.ndarray
    scores: np.ndarray
    labels: np.ndarray

    @classmethod
    def from_predictions(cls, preds) -> "Detections":
        return cls(np.asarray(preds.boxes, dtype=float), preds.scores, preds.labels)


@dataclass
class GroundTruth:
    boxes: np.ndarray
    classes: np.ndarray
    areas: np.ndarray


@dataclass
class EvalReport:
    mAP: float
    AP50: float
    AP75: float
    AP_small: float | None
    AP_medium: float | None
    AP_large: float | None
    per_class: dict = field(default_factory=dict)
    duplicate_rate: float = 0.0
    n_predictions: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def csv_row(self) -> dict:
        return {k: ("" if getattr(self, k) is None else getattr(self, k)) for k in REPORT_FIELDS}

    def to_csv(self, run: str = "", checkpoint: str = "") -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=("run", "checkpoint") + REPORT_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerow({"run": run, "checkpoint": checkpoint, **self.csv_row()})
        return buf.getvalue()


def _match_image(det_boxes, det_scores, gt_boxes, gt_ignore, det_ignore_area, thresholds):
    """COCO greedy matching for one image/class. Returns per-threshold (tp, ignored) flags, dets in score order."""
    order = np.argsort(-det_scores, kind="mergesort")
    det_boxes = det_boxes[order]
    # non-ignored gts first, so a det prefers a real match over an ignored one
    gorder = np.argsort(gt_ignore, kind="mergesort")
    gt_boxes = gt_boxes[gorder]
    gt_ignore = gt_ignore[gorder]
    ious = pairwise_iou(det_boxes, gt_boxes) if len(det_boxes) and len(gt_boxes) else np.zeros((len(det_boxes), len(gt_boxes)))
    T, D, G = len(thresholds), len(det_boxes), len(gt_boxes)
    tp = np.zeros((T, D), dtype=bool)
    ignored = np.zeros((T, D), dtype=bool)
    for ti, t in enumerate(thresholds):
        taken = np.zeros(G, dtype=bool)
        for d in range(D):
            best, best_iou = -1, min(t, 1 - 1e-10)
            for g in range(G):
                if taken[g]:
                    continue
                if best > -1 and not gt_ignore[best] and gt_ignore[g]:
                    break
                if ious[d, g] < best_iou:
                    continue
                best_iou, best = ious[d, g], g
            if best == -1:
                ignored[ti, d] = det_ignore_area[order[d]]
                continue
            taken[best] = True
            if gt_ignore[best]:
                ignored[ti, d] = True
            else:
                tp[ti, d] = True
    return tp, ignored, det_scores[order]


def _interp_ap(scores, tp, ignored, n_gt) -> float:
    keep = ~ignored
    scores, tp = scores[keep], tp[keep]
    order = np.argsort(-scores, kind="mergesort")
    tp = tp[order]
    tps = np.cumsum(tp)
    fps = np.cumsum(~tp)
    if len(tp) == 0:
        return 0.0
    recall = tps / n_gt
    precision = tps / np.maximum(tps + fps, np.finfo(float).eps)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


def average_precision(dets: list[Detections], gts: list[GroundTruth], n_classes: int,
                      iou_thresholds=IOU_THRESHOLDS, area_range=(0.0, np.inf), image_area: float = 1.0):
    """AP per (threshold, class), shape ``(len(thresholds), n_classes)``.

    Classes without in-range gts are absent (``nan``), not 0.
    """
    thresholds = np.asarray(iou_thresholds, dtype=float)
    lo, hi = area_range
    ap = np.full((len(thresholds), n_classes), np.nan)
    for c in range(n_classes):
        all_scores, all_tp, all_ign = [], [], []
        n_gt = 0
        for det, gt in zip(dets, gts):
            dm = np.asarray(det.labels) == c
            gm = np.asarray(gt.classes) == c
            gboxes = boxes_array(gt.boxes)[gm]
            gareas = np.asarray(gt.areas, dtype=float)[gm]
            g_ignore = (gareas < lo) | (gareas >= hi)
            n_gt += int((~g_ignore).sum())
            dboxes = boxes_array(det.boxes)[dm]
            dscores = np.asarray(det.scores, dtype=float)[dm]
            if len(dboxes) == 0:
                continue
            dareas = dboxes[:, 2] * dboxes[:, 3] * image_area
            d_ignore = (dareas < lo) | (dareas >= hi)
            tp, ign, sc = _match_image(dboxes, dscores, gboxes, g_ignore, d_ignore, thresholds)
            all_scores.append(sc)
            all_tp.append(tp)
            all_ign.append(ign)
        if n_gt == 0:
            continue
        if not all_scores:
            ap[:, c] = 0.0
            continue
        scores = np.concatenate(all_scores)
        tp = np.concatenate(all_tp, axis=1)
        ign = np.concatenate(all_ign, axis=1)
        for ti in range(len(thresholds)):
            ap[ti, c] = _interp_ap(scores, tp[ti], ign[ti], n_gt)
    return ap


def _mean_or_none(x: np.ndarray):
    x = x[~np.isnan(x)]
    return float(x.mean()) if x.size else None


def duplicate_rate(dets: list[Detections], gts: list[GroundTruth], iou_threshold: float = 0.5,
                   score_floor: float = 0.3) -> float:
    """Share of confident detections that hit an already-claimed same-class gt (greedy by score)."""
    if not 0.0 <= score_floor < 1.0:
        raise ValueError("score_floor must lie in [0, 1)")
    n_considered = 0
    n_dup = 0
    for det, gt in zip(dets, gts):
        scores = np.asarray(det.scores, dtype=float)
        sel = np.flatnonzero(scores >= score_floor)
        sel = sel[np.argsort(-scores[sel], kind="mergesort")]
        n_considered += len(sel)
        if len(sel) == 0 or len(gt.classes) == 0:
            continue
        ious = pairwise_iou(boxes_array(det.boxes)[sel], gt.boxes)
        same = np.asarray(det.labels)[sel][:, None] == np.asarray(gt.classes)[None, :]
        hit = same & (ious >= iou_threshold)
        claimed = np.zeros(len(gt.classes), dtype=bool)
        for r in range(len(sel)):
            if not hit[r].any():
                continue
            free = hit[r] & ~claimed
            if free.any():
                claimed[np.argmax(np.where(free, ious[r], -1.0))] = True
            else:
                n_dup += 1
    return n_dup / n_considered if n_considered else 0.0


def evaluate(dets: list[Detections], gts: list[GroundTruth], n_classes: int, thresholds: dict | None = None,
             image_area: float = 64 * 64, score_floor: float = 0.3) -> EvalReport:
    """Full report; ``thresholds`` carries ``small_max_area`` / ``large_min_area`` in pixels."""
    thresholds = thresholds or {"small_max_area": image_area / 64, "large_min_area": image_area / 8}
    small, large = thresholds["small_max_area"], thresholds["large_min_area"]
    ap = average_precision(dets, gts, n_classes, image_area=image_area)
    per_class_ap = {str(c): _mean_or_none(ap[:, c]) for c in range(n_classes)}
    mAP = _mean_or_none(ap)
    i50 = int(np.argmin(np.abs(IOU_THRESHOLDS - 0.5)))
    i75 = int(np.argmin(np.abs(IOU_THRESHOLDS - 0.75)))
    by_size = {}
    for name, rng in (("small", (0.0, small)), ("medium", (small, large)), ("large", (large, np.inf))):
        by_size[name] = _mean_or_none(average_precision(dets, gts, n_classes, area_range=rng, image_area=image_area))
    return EvalReport(
        mAP=mAP or 0.0,
        AP50=_mean_or_none(ap[i50]) or 0.0,
        AP75=_mean_or_none(ap[i75]) or 0.0,
        AP_small=by_size["small"],
        AP_medium=by_size["medium"],
        AP_large=by_size["large"],
        per_class=per_class_ap,
        duplicate_rate=duplicate_rate(dets, gts, 0.5, score_floor),
        n_predictions=int(sum(len(d.scores) for d in dets)),
    )
