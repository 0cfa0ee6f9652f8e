"""Evaluation: per-instance IoU, boundary F-measure, AP and boundary AF.

AP follows the 10-threshold protocol (IoU 0.50..0.95 in steps of 0.05) with
greedy score-ordered matching and all-point interpolated precision/recall
areas.  AF averages the 1px boundary F-score over true-positive matches
across those same thresholds, then over classes.  Boundary pixels are
foreground pixels 4-adjacent to background (image border counts as
background); pixel distances come from the exact Euclidean distance
transform.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))

AF_AGGREGATION_NOTE = (
    "AF = mean boundary-F(1px) over true-positive (match, IoU-threshold) pairs "
    "within each class, then averaged over classes with at least one true "
    "positive; classes without true positives are flagged."
)

_CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass
class Detection:
    label: str
    score: float
    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if not np.isfinite(self.score):
            raise ValueError(f"detection score must be finite, got {self.score}")


@dataclass
class EvalReport:
    per_class_iou: dict[str, float]
    mean_iou: float
    ap: float
    ap50: float
    per_class_ap: dict[str, float]
    af: float
    boundary_f1: float
    boundary_f2: float
    counts: dict[str, int]
    flags: list[str] = field(default_factory=list)
    aggregation: str = AF_AGGREGATION_NOTE

    def to_json(self) -> dict:
        return {
            "per_class_iou": self.per_class_iou,
            "mean_iou": self.mean_iou,
            "ap": self.ap,
            "ap50": self.ap50,
            "per_class_ap": self.per_class_ap,
            "af": self.af,
            "boundary_f1": self.boundary_f1,
            "boundary_f2": self.boundary_f2,
            "counts": self.counts,
            "flags": self.flags,
            "aggregation": self.aggregation,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "EvalReport":
        return cls(**doc)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union; both-empty returns 1 by convention."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-adjacent background pixel (border included)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)


def boundary_f(pred: np.ndarray, gt: np.ndarray, threshold: float = 1.0) -> float:
    """F1 of boundary precision/recall under a pixel distance threshold."""
    if threshold < 1:
        raise ValueError(f"threshold must be >= 1 pixel, got {threshold}")
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    pb = boundary_pixels(pred)
    gb = boundary_pixels(gt)
    if not pb.any() and not gb.any():
        return 1.0
    if not pb.any() or not gb.any():
        return 0.0
    dist_to_gt = ndimage.distance_transform_edt(~gb)
    dist_to_pred = ndimage.distance_transform_edt(~pb)
    precision = float((dist_to_gt[pb] <= threshold).mean())
    recall = float((dist_to_pred[gb] <= threshold).mean())
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# detection matching


@dataclass
class _MatchTable:
    """Greedy score-ordered matches per (class, IoU threshold)."""

    classes: list[str]
    # per class: detections as (image_id, det) in evaluation order
    dets: dict[str, list[tuple[object, Detection]]]
    n_gt: dict[str, int]
    # per class, per threshold index: tp flags aligned with dets order
    tp: dict[str, np.ndarray]
    # per class, per threshold index: list of (det_pos, image_id, gt_idx)
    matches: dict[str, list[list[tuple[int, object, int]]]]


def _group_gts(gts: dict) -> dict[str, dict[object, list[np.ndarray]]]:
    by_class: dict[str, dict[object, list[np.ndarray]]] = {}
    for image_id, items in gts.items():
        for label, mask in items:
            by_class.setdefault(label, {}).setdefault(image_id, []).append(
                np.asarray(mask, dtype=bool))
    return by_class


def match_detections(dets: list[tuple[object, Detection]], gts: dict,
                     iou_thresholds=IOU_THRESHOLDS) -> _MatchTable:
    """Match detections to ground truth at each IoU threshold.

    `dets` is a list of (image_id, Detection); `gts` maps image_id to a list
    of (label, mask).  Matching is greedy in descending score (ties keep
    input order), one ground-truth instance used at most once per threshold.
    """
    gt_by_class = _group_gts(gts)
    classes = sorted(set(gt_by_class) | {d.label for _, d in dets})
    table = _MatchTable(classes=classes, dets={}, n_gt={}, tp={}, matches={})
    for cls in classes:
        cls_dets = [(i, img, d) for i, (img, d) in enumerate(dets) if d.label == cls]
        cls_dets.sort(key=lambda rec: (-rec[2].score, rec[0]))
        ordered = [(img, d) for _, img, d in cls_dets]
        gt_imgs = gt_by_class.get(cls, {})
        table.dets[cls] = ordered
        table.n_gt[cls] = sum(len(v) for v in gt_imgs.values())

        iou_cache: dict[tuple[int, int], float] = {}

        def iou_of(pos, img, det, gidx):
            key = (pos, gidx)
            if key not in iou_cache:
                iou_cache[key] = mask_iou(det.mask, gt_imgs[img][gidx])
            return iou_cache[key]

        tp = np.zeros((len(iou_thresholds), len(ordered)), dtype=bool)
        matches: list[list[tuple[int, object, int]]] = [[] for _ in iou_thresholds]
        for t_idx, thr in enumerate(iou_thresholds):
            used: dict[object, set[int]] = {}
            for pos, (img, det) in enumerate(ordered):
                gt_list = gt_imgs.get(img, [])
                best_iou, best_g = 0.0, -1
                for gidx in range(len(gt_list)):
                    if gidx in used.get(img, set()):
                        continue
                    iou = iou_of(pos, img, det, gidx)
                    if iou > best_iou:
                        best_iou, best_g = iou, gidx
                if best_g >= 0 and best_iou >= thr:
                    tp[t_idx, pos] = True
                    used.setdefault(img, set()).add(best_g)
                    matches[t_idx].append((pos, img, best_g))
        table.tp[cls] = tp
        table.matches[cls] = matches
    return table


def _interpolated_ap(tp_flags: np.ndarray, n_gt: int) -> float:
    if n_gt == 0 or tp_flags.size == 0:
        return 0.0
    cum_tp = np.cumsum(tp_flags)
    ranks = np.arange(1, tp_flags.size + 1)
    precision = cum_tp / ranks
    recall = cum_tp / n_gt
    # all-point interpolation: running max of precision from the right
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[1.0], precision, [0.0]])
    for k in range(mpre.size - 2, -1, -1):
        mpre[k] = max(mpre[k], mpre[k + 1])
    steps = np.flatnonzero(np.diff(mrec) > 0)
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(dets: list[tuple[object, Detection]], gts: dict,
                      iou_thresholds=IOU_THRESHOLDS,
                      table: _MatchTable | None = None):
    """Class-mean AP over IoU thresholds plus AP at 0.5.

    Returns (ap, ap50, per_class, flags).  A class that has detections but no
    ground truth scores 0 and is flagged.
    """
    table = table or match_detections(dets, gts, iou_thresholds)
    per_class: dict[str, float] = {}
    flags: list[str] = []
    ap50_values = []
    t50 = int(np.argmin(np.abs(np.asarray(iou_thresholds) - 0.5)))
    for cls in table.classes:
        if table.n_gt[cls] == 0:
            per_class[cls] = 0.0
            flags.append(f"class '{cls}' has detections but no ground truth")
            ap50_values.append(0.0)
            continue
        aps = [_interpolated_ap(table.tp[cls][t], table.n_gt[cls])
               for t in range(len(iou_thresholds))]
        per_class[cls] = float(np.mean(aps))
        ap50_values.append(aps[t50])
    ap = float(np.mean(list(per_class.values()))) if per_class else 0.0
    ap50 = float(np.mean(ap50_values)) if ap50_values else 0.0
    return ap, ap50, per_class, flags


def average_f(dets: list[tuple[object, Detection]], gts: dict,
              iou_thresholds=IOU_THRESHOLDS, threshold_px: float = 1.0,
              table: _MatchTable | None = None):
    """Mean boundary-F over true-positive matches, then over classes.

    Returns (af, per_class, flags).  Zero true positives overall is reported
    as 0 with a flag (undefined metric).
    """
    table = table or match_detections(dets, gts, iou_thresholds)
    gt_by_class = _group_gts(gts)
    per_class: dict[str, float] = {}
    flags: list[str] = []
    for cls in table.classes:
        f_cache: dict[tuple[int, object, int], float] = {}
        values = []
        for t_idx in range(len(iou_thresholds)):
            for pos, img, gidx in table.matches[cls][t_idx]:
                key = (pos, img, gidx)
                if key not in f_cache:
                    det = table.dets[cls][pos][1]
                    f_cache[key] = boundary_f(det.mask, gt_by_class[cls][img][gidx],
                                              threshold_px)
                values.append(f_cache[key])
        if values:
            per_class[cls] = float(np.mean(values))
        else:
            flags.append(f"class '{cls}' has no true positives; excluded from AF")
    if not per_class:
        return 0.0, {}, flags + ["no true positives anywhere: AF undefined, reported as 0"]
    return float(np.mean(list(per_class.values()))), per_class, flags
