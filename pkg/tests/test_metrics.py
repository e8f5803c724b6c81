import numpy as np
import pytest

from geofm.errors import UsageError
from geofm.metrics import (
    COCO_THRESHOLDS,
    EvalConfig,
    average_precision,
    evaluate,
    iou,
    mask_iou,
    match_detections,
)
from geofm.metrics_oracle import evaluate_oracle
from geofm.records import Detection, InstanceAnnotation
from geofm.rng import Rng

from instance_gen import random_instance


def det(box, score, cls=0, mask=None):
    return Detection(box=box, score=score, class_id=cls, mask=mask)


def gt(box, cls=0, mask=None, size=16):
    if mask is None:
        mask = np.zeros((size, size), dtype=bool)
        mask[int(box[1]) : int(box[3]), int(box[0]) : int(box[2])] = True
    return InstanceAnnotation(box=box, class_id=cls, mask=mask)


# ---------------------------------------------------------------------- iou
def test_iou_identical():
    assert iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0


def test_iou_disjoint():
    assert iou((0, 0, 10, 10), (20, 20, 30, 30)) == 0.0


def test_iou_quarter_overlap():
    assert iou((0, 0, 10, 10), (5, 5, 15, 15)) == pytest.approx(25 / 175)


def test_mask_iou_values():
    a = np.zeros((4, 4), dtype=bool)
    b = np.zeros((4, 4), dtype=bool)
    a[0, 0] = a[0, 1] = True
    b[0, 1] = b[1, 1] = b[2, 2] = b[3, 3] = True
    assert mask_iou(a, b) == pytest.approx(1 / 5)
    assert mask_iou(a, a) == 1.0


def test_mask_iou_disjoint_zero():
    a = np.zeros((4, 4), dtype=bool)
    b = np.zeros((4, 4), dtype=bool)
    a[0, 0] = True
    b[3, 3] = True
    assert mask_iou(a, b) == 0.0


def test_mask_iou_both_empty_rejected():
    with pytest.raises(UsageError):
        mask_iou(np.zeros((4, 4), dtype=bool), np.zeros((4, 4), dtype=bool))


# ------------------------------------------------------------------ matching
def test_match_single_tp():
    flags, matched = match_detections([det((0, 0, 10, 10), 0.9)], [gt((0, 0, 10, 12))], 0.5)
    assert flags == [True] and matched == [0]


def test_match_two_dets_one_gt():
    dets = [det((0, 0, 10, 10), 0.9), det((1, 1, 11, 11), 0.8)]
    flags, matched = match_detections(dets, [gt((0, 0, 10, 10))], 0.5)
    assert flags == [True, False]
    assert matched == [0, -1]


def test_match_no_gts_all_fp():
    flags, _ = match_detections([det((0, 0, 5, 5), 0.5)], [], 0.5)
    assert flags == [False]


def test_match_respects_class():
    flags, _ = match_detections([det((0, 0, 10, 10), 0.9, cls=1)], [gt((0, 0, 10, 10), cls=0)], 0.5)
    assert flags == [False]


# ---------------------------------------------------------- average precision
def test_ap_single_tp():
    assert average_precision([True], 1) == pytest.approx(1.0)


def test_ap_no_detections():
    assert average_precision([], 3) == 0.0


def test_ap_tp_fp_tp_hand_value():
    expect = (51 * 1.0 + 50 * (2 / 3)) / 101
    assert average_precision([True, False, True], 2) == pytest.approx(expect, abs=1e-9)


# ---------------------------------------------------------------- evaluation
def perfect_case(size=16):
    g1 = gt((2, 2, 9, 9), cls=0, size=size)
    g2 = gt((4, 4, 14, 15), cls=1, size=size)
    gts = {"a": [g1, g2]}
    dets = {"a": [det(g1.box, 1.0, 0, g1.mask), det(g2.box, 1.0, 1, g2.mask)]}
    return dets, gts


def test_perfect_detector_scores_one():
    dets, gts = perfect_case()
    out = evaluate(dets, gts, EvalConfig())
    assert out["mAP50"] == 1.0
    assert out["mAP"] == 1.0
    assert out["mAP_S"] == 1.0  # both objects are small at 16x16
    assert out["mAP_M"] is None and out["mAP_L"] is None


def test_strata_boundary_areas():
    # areas 1024 (S), 1025 (M), 9217 (L) via boxes on a large canvas
    boxes = [(0, 0, 32, 32), (40, 0, 65, 41), (0, 40, 96, 136.01041666666666)]
    areas = [(b[2] - b[0]) * (b[3] - b[1]) for b in boxes]
    assert areas[0] == 1024 and 1024 < areas[1] <= 9216 and areas[2] > 9216
    mask = np.zeros((200, 200), dtype=bool)
    gts = {"a": [InstanceAnnotation(box=b, class_id=0, mask=mask) for b in boxes]}
    dets = {"a": [det(b, 1.0, 0) for b in boxes]}
    out = evaluate(dets, gts, EvalConfig(iou_thresholds=(0.5,)))
    assert out["mAP_S"] == 1.0 and out["mAP_M"] == 1.0 and out["mAP_L"] == 1.0


def test_empty_instance_all_na():
    out = evaluate({"a": []}, {"a": []}, EvalConfig())
    assert all(v is None for v in out.values())


def test_duplicate_detection_rejected():
    d = det((0, 0, 5, 5), 0.5)
    with pytest.raises(UsageError):
        evaluate({"a": [d, d]}, {"a": []}, EvalConfig())


def test_unknown_image_id_rejected():
    with pytest.raises(UsageError):
        evaluate({"b": [det((0, 0, 5, 5), 0.5)]}, {"a": []}, EvalConfig())


# --------------------------------------------------------------- properties
def test_adding_tp_never_decreases_ap():
    base = [det((0, 0, 8, 8), 0.9)]
    gts = {"a": [gt((0, 0, 8, 8)), gt((10, 10, 15, 15))]}
    cfg = EvalConfig(iou_thresholds=(0.5,))
    before = evaluate({"a": base}, gts, cfg)["mAP50"]
    extra = base + [det((10, 10, 15, 15), 0.1)]
    after = evaluate({"a": extra}, gts, cfg)["mAP50"]
    assert after >= before


def test_adding_lowest_score_fp_never_increases_ap():
    base = [det((0, 0, 8, 8), 0.9)]
    gts = {"a": [gt((0, 0, 8, 8))]}
    cfg = EvalConfig(iou_thresholds=(0.5,))
    before = evaluate({"a": base}, gts, cfg)["mAP50"]
    extra = base + [det((12, 12, 14, 14), 0.01)]
    after = evaluate({"a": extra}, gts, cfg)["mAP50"]
    assert after <= before


@pytest.mark.parametrize("seed", range(8))
def test_score_scaling_invariance(seed):
    dets, gts = random_instance(seed)
    cfg = EvalConfig()
    base = evaluate(dets, gts, cfg)
    scaled = {
        img: [det((d.box), min(d.score * 0.5, 1.0), d.class_id, d.mask) for d in ds]
        for img, ds in dets.items()
    }
    out = evaluate(scaled, gts, cfg)
    assert out == base


@pytest.mark.parametrize("seed", range(8))
def test_coco_map_never_exceeds_map50(seed):
    dets, gts = random_instance(seed)
    out = evaluate(dets, gts, EvalConfig())
    if out["mAP"] is not None and out["mAP50"] is not None:
        assert out["mAP"] <= out["mAP50"] + 1e-12


# ------------------------------------------------------------------- oracle
@pytest.mark.parametrize("seed", range(40))
def test_evaluate_matches_oracle_box(seed):
    dets, gts = random_instance(seed)
    cfg = EvalConfig()
    assert evaluate(dets, gts, cfg) == evaluate_oracle(dets, gts, cfg)


@pytest.mark.parametrize("seed", range(40, 70))
def test_evaluate_matches_oracle_mask(seed):
    dets, gts = random_instance(seed, with_masks=True)
    cfg = EvalConfig(iou_kind="mask")
    assert evaluate(dets, gts, cfg) == evaluate_oracle(dets, gts, cfg)


def test_oracle_refuses_large_instances():
    dets = {"a": [det((0, 0, 5, 5), 0.5) for _ in range(21)]}
    gts = {"a": []}
    with pytest.raises(UsageError, match="refuses"):
        evaluate_oracle(dets, gts, EvalConfig())


def test_oracle_single_tp_case():
    out = evaluate_oracle({"a": [det((0, 0, 8, 8), 0.9)]}, {"a": [gt((0, 0, 8, 8))]},
                          EvalConfig(iou_thresholds=(0.5,)))
    assert out["mAP50"] == 1.0


def test_oracle_empty_instance_na():
    out = evaluate_oracle({"a": []}, {"a": []}, EvalConfig())
    assert all(v is None for v in out.values())
