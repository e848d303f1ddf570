import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noisydet.correction import CorrectionRecord
from noisydet.evaluation import (
    COCO_THRESHOLDS,
    average_precision,
    class_aps,
    correction_diagnostics,
    evaluate_detections,
    map_range,
    match_detections,
)
from noisydet.data import Annotation


def brute_force_ap(tp, n, grid=200_000):
    # integrate the interpolated precision p(r) = max precision at recall >= r on a fine grid
    tp = np.asarray(tp, dtype=float)
    rec = np.cumsum(tp) / n
    prec = np.cumsum(tp) / np.arange(1, len(tp) + 1)
    r = (np.arange(grid) + 0.5) / grid
    p = np.array([prec[rec >= x].max() if (rec >= x).any() else 0.0 for x in r[:: grid // 2000]])
    return p.mean()


# matching -------------------------------------------------------------------


def test_exact_predictions_all_tp():
    gt = np.array([[0, 0, 10, 10], [20, 20, 30, 30.0]])
    assert match_detections(gt, [1.0, 1.0], gt).all()


def test_no_predictions():
    assert match_detections(np.zeros((0, 4)), [], np.array([[0, 0, 1, 1.0]])).size == 0


def test_duplicate_prediction_higher_score_wins():
    gt = np.array([[0, 0, 10, 10.0]])
    preds = np.array([[0, 0, 10, 10], [0, 0, 10, 10.0]])
    np.testing.assert_array_equal(match_detections(preds, [0.3, 0.9], gt), [False, True])


# AP ---------------------------------------------------------------------------


def test_ap_perfect_and_all_false():
    assert average_precision(None, [1, 1, 1], 3) == 1.0
    assert average_precision(None, [0, 0], 3) == 0.0
    assert np.isnan(average_precision(None, [0], 0))


def test_three_prediction_case_hand_enumerated():
    # ranked TP, FP, TP against two truths:
    # recall .5 at precision 1, then recall 1 at precision 2/3 -> AP = .5 + .5 * 2/3
    ap = average_precision(None, [1, 0, 1], 2)
    assert ap == pytest.approx(0.5 + 0.5 * 2 / 3, abs=1e-12)
    assert ap == pytest.approx(brute_force_ap([1, 0, 1], 2), abs=1e-3)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=15), st.integers(0, 5))
def test_ap_matches_brute_force(tp, extra):
    n = sum(tp) + extra
    if n == 0:
        return
    assert average_precision(None, tp, n) == pytest.approx(brute_force_ap(tp, n), abs=2e-3)


# dataset-level -------------------------------------------------------------------


def _truths():
    return [
        {"boxes": np.array([[0, 0, 10, 10], [20, 20, 40, 40.0]]), "labels": np.array([0, 1])},
        {"boxes": np.array([[5, 5, 25, 25.0]]), "labels": np.array([1])},
    ]


def _perfect(truths):
    return [{"boxes": t["boxes"], "scores": np.ones(len(t["labels"])), "labels": t["labels"]} for t in truths]


def test_perfect_detector_map_one():
    t = _truths()
    rep = evaluate_detections(_perfect(t), t, ["a", "b"])
    assert rep.map50 == 1.0 and rep.map_range == 1.0


def test_jittered_boxes_lower_strict_thresholds():
    t = _truths()
    p = _perfect(t)
    for d in p:
        d["boxes"] = d["boxes"] + np.array([1.5, 1.0, 1.5, 1.0])
    rep = evaluate_detections(p, t, ["a", "b"])
    assert rep.map50 == 1.0
    assert rep.map_range < rep.map50


def test_map_range_matches_per_threshold_brute_force():
    t = _truths()
    p = [
        {"boxes": np.array([[0, 0, 9, 10], [21, 20, 40, 41.0]]), "scores": np.array([0.9, 0.6]), "labels": np.array([0, 1])},
        {"boxes": np.array([[5, 5, 24, 25], [60, 60, 70, 70.0]]), "scores": np.array([0.8, 0.7]), "labels": np.array([1, 1])},
    ]
    per = []
    for th in COCO_THRESHOLDS:
        aps = class_aps(p, t, 2, th)[0]
        # class 0: one prediction IoU .9; class 1: ranked (.8, .7, .6)
        iou_a = 90 / 100
        iou_b1 = 19 * 20 / 400
        iou_b0 = 19 * 20 / (400 + 19 * 21 - 19 * 20)
        ap0 = 1.0 if iou_a >= th else 0.0
        tp1 = [iou_b1 >= th, False, iou_b0 >= th]
        ap1 = brute_force_ap(tp1, 2) if any(tp1) else 0.0
        assert aps[0] == pytest.approx(ap0)
        assert aps[1] == pytest.approx(ap1, abs=1e-3)
        per.append((ap0 + ap1) / 2)
    assert map_range(p, t, 2) == pytest.approx(np.mean(per), abs=1e-3)


def test_permutation_invariance_of_prediction_order():
    t = _truths()
    rng = np.random.default_rng(0)
    p = [
        {"boxes": t[i]["boxes"] + rng.normal(0, 2, t[i]["boxes"].shape), "scores": rng.random(len(t[i]["labels"])), "labels": t[i]["labels"]}
        for i in range(2)
    ]
    base = evaluate_detections(p, t, ["a", "b"])
    perm = []
    for d in p:
        o = rng.permutation(len(d["scores"]))
        perm.append({k: v[o] for k, v in d.items()})
    assert evaluate_detections(perm, t, ["a", "b"]).map_range == base.map_range


def test_zero_score_false_positive_does_not_change_ap():
    t = _truths()
    p = _perfect(t)
    p[0] = {
        "boxes": np.vstack([p[0]["boxes"], [[90, 90, 99, 99]]]),
        "scores": np.append(p[0]["scores"], 0.0),
        "labels": np.append(p[0]["labels"], 0),
    }
    assert evaluate_detections(p, t, ["a", "b"]).map50 == 1.0


# correction diagnostics ------------------------------------------------------------


def _record(aid, box, label=0):
    b = np.asarray(box, dtype=float)
    return CorrectionRecord(aid, 0, label, b, b.copy(), b.copy(), np.eye(2)[label], False)


def test_zero_noise_diagnostics_are_one():
    clean = {0: Annotation(0, 0, 0, [0, 0, 10, 10]), 1: Annotation(1, 0, 1, [5, 5, 20, 30])}
    recs = [_record(0, [0, 0, 10, 10]), _record(1, [5, 5, 20, 30], 1)]
    d = correction_diagnostics(recs, clean)
    assert d["iou_noisy"] == d["iou_star"] == d["iou_refined"] == 1.0
    assert d["soft_label_accuracy"] == 1.0


def test_diagnostics_without_provenance(capsys):
    assert correction_diagnostics([], None) is None
    assert "skipped" in capsys.readouterr().out
