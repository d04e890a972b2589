import numpy as np
import pytest

from krillboard.manifest import BBox
from krillboard.metrics import (
    APReport, MatchSpec, average_precision, box_iou, brute_force_ap, iou, mask_iou,
)

BOX_SPEC = MatchSpec(iou_kind="box")


def test_iou_identical_boxes():
    b = BBox(3, 4, 10, 20)
    assert iou(b, b) == 1.0


def test_iou_disjoint_boxes():
    assert iou(BBox(0, 0, 5, 5), BBox(10, 10, 5, 5)) == 0.0


def test_iou_half_overlap():
    assert iou(BBox(0, 0, 5, 10), BBox(0, 0, 10, 10)) == 0.5


def test_iou_masks():
    a = np.zeros((6, 6), dtype=bool)
    b = np.zeros((6, 6), dtype=bool)
    a[0:2, 0:2] = True
    b[0:2, 0:4] = True
    assert iou(a, b) == 0.5


def test_iou_empty_mask_errors():
    a = np.zeros((4, 4), dtype=bool)
    b = np.ones((4, 4), dtype=bool)
    with pytest.raises(ValueError):
        iou(a, b)


def test_iou_kind_mismatch_errors():
    with pytest.raises(ValueError):
        iou(BBox(0, 0, 2, 2), np.ones((4, 4), dtype=bool))


def test_matchspec_validation():
    with pytest.raises(ValueError):
        MatchSpec(iou_thresholds=(0.5, 0.5))
    with pytest.raises(ValueError):
        MatchSpec(iou_thresholds=(0.0, 0.5))
    with pytest.raises(ValueError):
        MatchSpec(iou_kind="polygon")


def test_ap_perfect_predictions():
    gts = [[BBox(0, 0, 10, 10), BBox(30, 0, 12, 8)]]
    preds = [[(g, 1.0) for g in gts[0]]]
    rep = average_precision(preds, gts, BOX_SPEC)
    assert rep.ap == rep.ap50 == rep.ap75 == 1.0
    assert rep.recall == 1.0


def test_ap_hand_case_iou_half():
    # single prediction at exactly IoU 0.5 with a single ground truth
    gt = BBox(0, 0, 10, 10)
    pred = BBox(0, 0, 5, 10)
    assert box_iou(pred, gt) == 0.5
    rep = average_precision([[(pred, 0.9)]], [[gt]], BOX_SPEC)
    assert rep.per_threshold[0.50] == 1.0
    assert all(rep.per_threshold[t] == 0.0 for t in BOX_SPEC.iou_thresholds[1:])
    assert rep.ap == pytest.approx(0.10, abs=1e-12)
    assert rep.ap50 == 1.0
    assert rep.ap75 == 0.0


def test_ap_zero_zero_convention():
    rep = average_precision([[]], [[]], BOX_SPEC)
    assert rep.ap == 1.0
    assert rep.flags
    bf = brute_force_ap([[]], [[]], BOX_SPEC)
    assert bf.ap == 1.0


def test_ap_predictions_without_gts():
    rep = average_precision([[(BBox(0, 0, 5, 5), 0.8)]], [[]], BOX_SPEC)
    assert rep.ap == 0.0
    assert rep.flags


def test_ap_no_predictions_with_gts():
    rep = average_precision([[]], [[BBox(0, 0, 5, 5)]], BOX_SPEC)
    assert rep.ap == 0.0
    bf = brute_force_ap([[]], [[BBox(0, 0, 5, 5)]], BOX_SPEC)
    assert bf.ap == 0.0


def test_duplicate_prediction_is_false_positive():
    gt = BBox(0, 0, 10, 10)
    preds = [[(gt, 0.9), (gt, 0.8)]]
    rep = average_precision(preds, [[gt]], BOX_SPEC)
    bf = brute_force_ap(preds, [[gt]], BOX_SPEC)
    # second duplicate is a false positive after full recall: AP stays 1.0
    assert rep.ap == bf.ap == 1.0
    # but with two GTs and only one covered, the duplicate hurts both the same
    gts2 = [[gt, BBox(40, 40, 10, 10)]]
    rep2 = average_precision(preds, gts2, BOX_SPEC)
    bf2 = brute_force_ap(preds, gts2, BOX_SPEC)
    assert rep2.ap == pytest.approx(bf2.ap, abs=1e-9)
    assert rep2.ap < 1.0


def test_input_order_invariance():
    rng = np.random.default_rng(5)
    gts = [[BBox(0, 0, 10, 10), BBox(30, 0, 12, 8), BBox(0, 30, 9, 9)]]
    preds = [[(BBox(1, 0, 10, 10), 0.9), (BBox(30, 1, 12, 8), 0.8),
              (BBox(0, 30, 9, 9), 0.7), (BBox(50, 50, 5, 5), 0.6)]]
    base = average_precision(preds, gts, BOX_SPEC)
    for _ in range(5):
        perm = rng.permutation(len(preds[0]))
        shuffled = [[preds[0][i] for i in perm]]
        rep = average_precision(shuffled, gts, BOX_SPEC)
        assert rep.per_threshold == base.per_threshold
        assert rep.ap == base.ap


def test_tied_scores_are_order_invariant():
    gts = [[BBox(0, 0, 10, 10), BBox(30, 0, 10, 10)]]
    preds = [[(BBox(0, 0, 10, 10), 0.5), (BBox(29, 0, 10, 10), 0.5)]]
    a = average_precision(preds, gts, BOX_SPEC)
    b = average_precision([[preds[0][1], preds[0][0]]], gts, BOX_SPEC)
    assert a.per_threshold == b.per_threshold


def test_lowest_score_false_positive_never_raises_ap():
    gts = [[BBox(0, 0, 10, 10), BBox(30, 0, 12, 8)]]
    preds = [[(BBox(0, 0, 10, 10), 0.9), (BBox(31, 0, 12, 8), 0.8)]]
    base = average_precision(preds, gts, BOX_SPEC)
    with_fp = [[*preds[0], (BBox(60, 60, 5, 5), 0.01)]]
    rep = average_precision(with_fp, gts, BOX_SPEC)
    assert rep.ap <= base.ap + 1e-12


def test_adding_perfect_match_never_lowers_ap():
    gts = [[BBox(0, 0, 10, 10), BBox(30, 0, 12, 8)]]
    preds = [[(BBox(2, 0, 10, 10), 0.6)]]
    base = average_precision(preds, gts, BOX_SPEC)
    more = [[*preds[0], (BBox(30, 0, 12, 8), 0.95)]]
    rep = average_precision(more, gts, BOX_SPEC)
    assert rep.ap >= base.ap - 1e-12


def test_threshold_monotonicity_ap50_ge_ap75():
    rng = np.random.default_rng(11)
    for _ in range(25):
        gts = [[_rand_box(rng) for _ in range(rng.integers(1, 4))]]
        preds = [[(_rand_box(rng), float(rng.random())) for _ in range(rng.integers(0, 5))]]
        rep = average_precision(preds, gts, BOX_SPEC)
        assert rep.ap50 >= rep.ap75 >= 0.0


def test_greedy_prefers_best_iou_then_gt_order():
    # one prediction overlapping two GTs equally: first GT must be taken
    gt1 = BBox(0, 0, 10, 10)
    gt2 = BBox(4, 0, 10, 10)
    pred = BBox(2, 0, 10, 10)
    assert box_iou(pred, gt1) == box_iou(pred, gt2)
    spec = MatchSpec(iou_thresholds=(0.5,), iou_kind="box")
    _, details = average_precision([[(pred, 0.9), (gt2, 0.8)]], [[gt1, gt2]],
                                   spec, return_details=True)
    # both predictions match: pred takes gt1 (order tie-break), second takes gt2
    assert details[0].tp_flags == (True, True)


def test_max_dets_cap():
    gt = BBox(0, 0, 10, 10)
    spec = MatchSpec(iou_kind="box", max_dets=1)
    preds = [[(BBox(40, 40, 5, 5), 0.9), (gt, 0.8)]]
    rep = average_precision(preds, [[gt]], spec)
    assert rep.n_preds == 1
    assert rep.ap == 0.0  # the kept prediction is the high-scoring miss


def test_brute_force_rejects_large_inputs():
    gts = [[_rand_box(np.random.default_rng(0)) for _ in range(7)]]
    with pytest.raises(ValueError):
        brute_force_ap([[]], gts, BOX_SPEC)


def _rand_box(rng) -> BBox:
    x = int(rng.integers(0, 40))
    y = int(rng.integers(0, 40))
    return BBox(x, y, int(rng.integers(3, 20)), int(rng.integers(3, 20)))


def _greedy_is_optimal(details_greedy, details_bf) -> bool:
    return all(g.tp_flags == b.tp_flags for g, b in zip(details_greedy, details_bf))


def test_oracle_agreement_on_random_small_cases():
    rng = np.random.default_rng(99)
    compared = skipped = 0
    for _ in range(120):
        n_gt = int(rng.integers(1, 5))
        n_pred = int(rng.integers(0, 6))
        gts = [[_rand_box(rng) for _ in range(n_gt)]]
        preds = [[(_rand_box(rng), float(rng.integers(1, 100)) / 100) for _ in range(n_pred)]]
        rep, det = average_precision(preds, gts, BOX_SPEC, return_details=True)
        bf, det_bf = brute_force_ap(preds, gts, BOX_SPEC, return_details=True)
        if not _greedy_is_optimal(det, det_bf):
            skipped += 1
            for g, b in zip(det, det_bf):
                assert g.ap <= b.ap + 1e-9  # oracle is an upper bound
            continue
        compared += 1
        for t in BOX_SPEC.iou_thresholds:
            assert rep.per_threshold[t] == pytest.approx(bf.per_threshold[t], abs=1e-9)
        assert rep.ap == pytest.approx(bf.ap, abs=1e-9)
    assert compared > skipped  # greedy should be optimal in the typical case


def test_mask_ap_path():
    a = np.zeros((10, 10), dtype=bool)
    a[2:6, 2:6] = True
    b = np.zeros((10, 10), dtype=bool)
    b[2:6, 2:8] = True
    spec = MatchSpec(iou_kind="mask")
    rep = average_precision([[(b, 0.9)]], [[a]], spec)
    expect_iou = mask_iou(a, b)
    matched = [t for t in spec.iou_thresholds if expect_iou >= t]
    assert rep.ap == pytest.approx(len(matched) / len(spec.iou_thresholds))


def test_report_json_shape():
    rep = average_precision([[]], [[]], BOX_SPEC)
    doc = rep.to_json()
    assert set(doc) >= {"ap", "ap50", "ap75", "recall", "per_threshold",
                        "n_images", "n_gts", "n_preds"}
    assert isinstance(rep, APReport)
