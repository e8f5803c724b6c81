"""Detection/instance-segmentation evaluation: IoU, greedy matching, and
101-point interpolated average precision with size strata.

Protocol: detections are processed in descending score order (ties keep
input order); each matches the highest-IoU not-yet-matched ground truth of
its class at or above the threshold. Per class, precision is made
monotone from the right and integrated at the 101 recall points
{0, 0.01, ..., 1.00}. Size strata restrict ground truths to an area
bucket; detections matched to an out-of-bucket truth are ignored, as are
unmatched detections whose own size falls outside the bucket. Metrics are
averaged over classes, then over IoU thresholds. A stratum with no ground
truth anywhere reports N/A (None).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError
from .records import Detection, InstanceAnnotation

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
SMALL_MAX = 32.0**2   # inclusive
MEDIUM_MAX = 96.0**2  # inclusive

STRATA = ("all", "S", "M", "L")


@dataclass
class EvalConfig:
    iou_thresholds: tuple[float, ...] = COCO_THRESHOLDS
    iou_kind: str = "box"  # or "mask"

    def validate(self) -> None:
        ts = self.iou_thresholds
        if not ts or any(not (0.0 < t <= 1.0) for t in ts):
            raise UsageError(f"iou thresholds must lie in (0, 1], got {ts}")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise UsageError(f"iou thresholds must be strictly increasing, got {ts}")
        if self.iou_kind not in ("box", "mask"):
            raise UsageError(f"iou_kind must be 'box' or 'mask', got {self.iou_kind!r}")


# ------------------------------------------------------------------- primitives
def iou(a, b) -> float:
    """Intersection over union of two (x1, y1, x2, y2) boxes."""
    ax1, ay1, ax2, ay2 = float(a[0]), float(a[1]), float(a[2]), float(a[3])
    bx1, by1, bx2, by2 = float(b[0]), float(b[1]), float(b[2]), float(b[3])
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Pixel IoU of two equally-sized binary masks."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise UsageError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        raise UsageError("IoU of two empty masks is undefined")
    inter = int(np.logical_and(a, b).sum())
    return inter / union


def _pair_iou(det: Detection, gt: InstanceAnnotation, kind: str) -> float:
    if kind == "box":
        return iou(det.box, gt.box)
    if det.mask is None:
        raise UsageError("mask evaluation requires detections with masks")
    if not det.mask.any() and not gt.mask.any():
        raise UsageError("IoU of two empty masks is undefined")
    if not det.mask.any():
        return 0.0
    return mask_iou(det.mask, gt.mask)


def _det_size(det: Detection, kind: str) -> float:
    return det.box_area if kind == "box" else float(0 if det.mask is None else det.mask.sum())


def _gt_size(gt: InstanceAnnotation, kind: str) -> float:
    return gt.box_area if kind == "box" else float(gt.mask_area)


def _in_stratum(area: float, stratum: str) -> bool:
    if stratum == "all":
        return True
    if stratum == "S":
        return area <= SMALL_MAX
    if stratum == "M":
        return SMALL_MAX < area <= MEDIUM_MAX
    return area > MEDIUM_MAX


# --------------------------------------------------------------------- matching
def match_detections(dets: list[Detection], gts: list[InstanceAnnotation], iou_thr: float,
                     kind: str = "box") -> tuple[list[bool], list[int]]:
    """Greedy per-image matching. `dets` must already be sorted by
    descending score. Returns TP flags and the matched gt index (-1) per
    detection; each gt matches at most once."""
    taken = [False] * len(gts)
    flags: list[bool] = []
    matched: list[int] = []
    for det in dets:
        best_iou = 0.0
        best_idx = -1
        for g, gt in enumerate(gts):
            if taken[g] or gt.class_id != det.class_id:
                continue
            val = _pair_iou(det, gt, kind)
            if val >= iou_thr and val > best_iou:
                best_iou = val
                best_idx = g
        if best_idx >= 0:
            taken[best_idx] = True
            flags.append(True)
            matched.append(best_idx)
        else:
            flags.append(False)
            matched.append(-1)
    return flags, matched


# ----------------------------------------------------------- average precision
def average_precision(tp_flags, n_gt: int) -> float:
    """101-point interpolated AP from score-ordered TP/FP flags."""
    if n_gt < 0:
        raise UsageError(f"n_gt must be non-negative, got {n_gt}")
    if n_gt == 0:
        return 0.0
    flags = np.asarray(tp_flags, dtype=np.float64)
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(1.0 - flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    for i in range(len(precision) - 2, -1, -1):
        if precision[i] < precision[i + 1]:
            precision[i] = precision[i + 1]
    total = 0.0
    for i in range(101):
        r = i / 100.0
        j = int(np.searchsorted(recall, r, side="left"))
        total += precision[j] if j < len(precision) else 0.0
    return total / 101.0


# ------------------------------------------------------------------- evaluation
def evaluate(dets_by_image: dict, gts_by_image: dict, config: EvalConfig) -> dict:
    """Full metric set over a dataset.

    Returns {"mAP50", "mAP", "mAP_S", "mAP_M", "mAP_L"}; values are floats
    or None (N/A) when the corresponding stratum holds no ground truth.
    """
    config.validate()
    kind = config.iou_kind
    unknown = set(dets_by_image) - set(gts_by_image)
    if unknown:
        raise UsageError(f"detections reference unknown image ids: {sorted(unknown)}")
    for image_id, dets in dets_by_image.items():
        seen = set()
        for det in dets:
            if id(det) in seen:
                raise UsageError(f"duplicate detection record in image {image_id!r}")
            seen.add(id(det))

    # flatten detections into global score order (ties: insertion order)
    entries = []
    for image_id in sorted(gts_by_image):
        for det in dets_by_image.get(image_id, []):
            entries.append((image_id, det))
    entries.sort(key=lambda pair: -pair[1].score)

    classes = sorted({gt.class_id for gts in gts_by_image.values() for gt in gts}
                     | {det.class_id for _, det in entries})
    gt_sizes = {
        image_id: [_gt_size(gt, kind) for gt in gts] for image_id, gts in gts_by_image.items()
    }

    # IoU of each detection against every same-class gt of its image,
    # computed once and reused across thresholds
    pair_ious = []
    for image_id, det in entries:
        vals = [
            _pair_iou(det, gt, kind) if gt.class_id == det.class_id else -1.0
            for gt in gts_by_image[image_id]
        ]
        pair_ious.append(vals)
    det_sizes = [_det_size(det, kind) for _, det in entries]

    gt_counts = {
        (stratum, cls): sum(
            1
            for image_id, gts in gts_by_image.items()
            for g, gt in enumerate(gts)
            if gt.class_id == cls and _in_stratum(gt_sizes[image_id][g], stratum)
        )
        for stratum in STRATA
        for cls in classes
    }

    # per-threshold greedy matching against ALL ground truths of the class
    results = {}  # (threshold, stratum) -> {class: (flags, n_gt)}
    for thr in config.iou_thresholds:
        matches = []  # aligned with entries: matched gt index or -1
        taken: set[tuple] = set()
        for (image_id, det), vals in zip(entries, pair_ious):
            best_iou = 0.0
            best_idx = -1
            for g, val in enumerate(vals):
                if (image_id, g) in taken:
                    continue
                if val >= thr and val > best_iou:
                    best_iou = val
                    best_idx = g
            if best_idx >= 0:
                taken.add((image_id, best_idx))
            matches.append(best_idx)

        for stratum in STRATA:
            per_class: dict[int, tuple[list[bool], int]] = {}
            for cls in classes:
                flags: list[bool] = []
                for (image_id, det), m, size in zip(entries, matches, det_sizes):
                    if det.class_id != cls:
                        continue
                    if m >= 0:
                        if _in_stratum(gt_sizes[image_id][m], stratum):
                            flags.append(True)
                        # matched to an out-of-stratum gt: ignored
                    else:
                        if _in_stratum(size, stratum):
                            flags.append(False)
                        # out-of-stratum unmatched detection: ignored
                per_class[cls] = (flags, gt_counts[(stratum, cls)])
            results[(thr, stratum)] = per_class

    def mean_ap(thresholds, stratum) -> float | None:
        any_gt = any(
            n_gt > 0 for thr in thresholds for (_, n_gt) in results[(thr, stratum)].values()
        )
        if not any_gt:
            return None
        per_thr = []
        for thr in thresholds:
            aps = []
            for cls in classes:
                flags, n_gt = results[(thr, stratum)][cls]
                if n_gt == 0 and not flags:
                    continue  # class absent from this stratum entirely
                aps.append(average_precision(flags, n_gt))
            per_thr.append(sum(aps) / len(aps) if aps else 0.0)
        return sum(per_thr) / len(per_thr)

    out = {
        "mAP50": mean_ap((0.5,), "all") if 0.5 in config.iou_thresholds else None,
        "mAP": mean_ap(config.iou_thresholds, "all"),
        "mAP_S": mean_ap(config.iou_thresholds, "S"),
        "mAP_M": mean_ap(config.iou_thresholds, "M"),
        "mAP_L": mean_ap(config.iou_thresholds, "L"),
    }
    return out
