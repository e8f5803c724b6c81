"""Brute-force reference evaluator for small instances (tests only).

Re-derives the whole protocol by direct enumeration: explicit greedy
matching over the score-sorted detection list, literal per-class PR
tables, and a 101-point scan that recomputes the interpolated precision
at every recall point by searching the full table. Shares only the record
types with the production evaluator, never its helpers.
"""
from __future__ import annotations

from .errors import UsageError

_SMALL = 32.0 * 32.0
_MEDIUM = 96.0 * 96.0


def _box_iou(a, b) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def _mask_cells(mask) -> set:
    cells = set()
    h = len(mask)
    for r in range(h):
        row = mask[r]
        for c in range(len(row)):
            if row[c]:
                cells.add((r, c))
    return cells


def _mask_iou_cells(a: set, b: set) -> float:
    union = len(a | b)
    if union == 0:
        raise UsageError("IoU of two empty masks is undefined")
    return len(a & b) / union


def _bucket_ok(area: float, stratum: str) -> bool:
    if stratum == "all":
        return True
    if stratum == "S":
        return area <= _SMALL
    if stratum == "M":
        return _SMALL < area <= _MEDIUM
    return area > _MEDIUM


def evaluate_oracle(dets_by_image: dict, gts_by_image: dict, config) -> dict:
    """Same metric dictionary as `metrics.evaluate`, by direct enumeration.

    Refuses instances with more than 20 detections total.
    """
    config.validate()
    kind = config.iou_kind
    total_dets = sum(len(v) for v in dets_by_image.values())
    if total_dets > 20:
        raise UsageError(f"oracle refuses large instances: {total_dets} detections > 20")

    # flatten in the protocol order: image ids sorted, then input order
    rows = []
    for image_id in sorted(gts_by_image):
        for det in dets_by_image.get(image_id, []):
            rows.append((image_id, det))
    # stable selection sort by descending score keeps input order on ties
    ordered = []
    remaining = list(rows)
    while remaining:
        best = 0
        for i in range(1, len(remaining)):
            if remaining[i][1].score > remaining[best][1].score:
                best = i
        ordered.append(remaining.pop(best))

    det_cells = {}
    gt_cells = {}
    if kind == "mask":
        for image_id, det in ordered:
            if det.mask is None:
                raise UsageError("mask evaluation requires detections with masks")
            det_cells[id(det)] = _mask_cells(det.mask)
        for image_id, gts in gts_by_image.items():
            for g, gt in enumerate(gts):
                gt_cells[(image_id, g)] = _mask_cells(gt.mask)

    def pair_iou(image_id, det, g, gt) -> float:
        if kind == "box":
            return _box_iou(det.box, gt.box)
        dc = det_cells[id(det)]
        gc = gt_cells[(image_id, g)]
        if not dc and not gc:
            raise UsageError("IoU of two empty masks is undefined")
        if not dc:
            return 0.0
        return _mask_iou_cells(dc, gc)

    def det_area(det) -> float:
        if kind == "box":
            return max(0.0, det.box[2] - det.box[0]) * max(0.0, det.box[3] - det.box[1])
        return float(len(det_cells[id(det)]))

    def gt_area(image_id, g, gt) -> float:
        if kind == "box":
            return (gt.box[2] - gt.box[0]) * (gt.box[3] - gt.box[1])
        return float(len(gt_cells[(image_id, g)]))

    classes = set()
    for gts in gts_by_image.values():
        for gt in gts:
            classes.add(gt.class_id)
    for _, det in ordered:
        classes.add(det.class_id)
    classes = sorted(classes)

    def ap_from_table(flags, n_gt) -> float:
        if n_gt == 0:
            return 0.0
        if not flags:
            return 0.0
        table = []  # (recall, precision) per detection rank
        tp = 0
        fp = 0
        for flag in flags:
            if flag:
                tp += 1
            else:
                fp += 1
            table.append((tp / n_gt, tp / (tp + fp)))
        total = 0.0
        for i in range(101):
            r = i / 100.0
            best = 0.0
            for recall, precision in table:
                if recall >= r and precision > best:
                    best = precision
            total += best
        return total / 101.0

    def metric(thresholds, stratum):
        any_gt = False
        for image_id, gts in gts_by_image.items():
            for g, gt in enumerate(gts):
                if _bucket_ok(gt_area(image_id, g, gt), stratum):
                    any_gt = True
        if not any_gt:
            return None
        per_thr = []
        for thr in thresholds:
            # full greedy matching at this threshold
            taken = set()
            match = []
            for image_id, det in ordered:
                gts = gts_by_image[image_id]
                best_iou = 0.0
                best_g = -1
                for g, gt in enumerate(gts):
                    if gt.class_id != det.class_id or (image_id, g) in taken:
                        continue
                    val = pair_iou(image_id, det, g, gt)
                    if val >= thr and val > best_iou:
                        best_iou = val
                        best_g = g
                if best_g >= 0:
                    taken.add((image_id, best_g))
                match.append(best_g)

            aps = []
            for cls in classes:
                n_gt = 0
                for image_id, gts in gts_by_image.items():
                    for g, gt in enumerate(gts):
                        if gt.class_id == cls and _bucket_ok(gt_area(image_id, g, gt), stratum):
                            n_gt += 1
                flags = []
                for (image_id, det), m in zip(ordered, match):
                    if det.class_id != cls:
                        continue
                    if m >= 0:
                        gt = gts_by_image[image_id][m]
                        if _bucket_ok(gt_area(image_id, m, gt), stratum):
                            flags.append(True)
                    else:
                        if _bucket_ok(det_area(det), stratum):
                            flags.append(False)
                if n_gt == 0 and not flags:
                    continue
                aps.append(ap_from_table(flags, n_gt))
            per_thr.append(sum(aps) / len(aps) if aps else 0.0)
        return sum(per_thr) / len(per_thr)

    return {
        "mAP50": metric((0.5,), "all") if 0.5 in config.iou_thresholds else None,
        "mAP": metric(config.iou_thresholds, "all"),
        "mAP_S": metric(config.iou_thresholds, "S"),
        "mAP_M": metric(config.iou_thresholds, "M"),
        "mAP_L": metric(config.iou_thresholds, "L"),
    }
