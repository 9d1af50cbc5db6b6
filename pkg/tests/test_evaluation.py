import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn import metrics as skm

from busdiag import reference as ref
from busdiag.dataset import ClassLabel
from busdiag.evaluation import (
    ClassScores,
    Counts,
    EvaluationReport,
    accuracy_consistent,
    class_consistency_sd,
    class_scores,
    confusion_counts,
    consistent_supports,
    evaluate_predictions,
    prf_accuracy,
    segmentation_scores,
    weighted_average,
)

B, M, N = ClassLabel.BENIGN, ClassLabel.MALIGNANT, ClassLabel.NORMAL


def two_pass_sd(values):
    n = len(values)
    mean = sum(values) / n
    return math.sqrt(sum((v - mean) ** 2 for v in values) / (n - 1))


# ------------------------------------------------------------ confusion

def test_perfect_predictions_have_no_errors():
    labels = [0, 1, 2, 0, 0, 1, 2, 2, 1, 0]
    cc = confusion_counts(labels, labels)
    for c in ClassLabel:
        assert cc[c].fp == cc[c].fn == 0


def test_single_sample_counts():
    cc = confusion_counts([B], [M])
    assert (cc[B].fp, cc[B].tp, cc[B].fn) == (1, 0, 0)
    assert (cc[M].fn, cc[M].tp) == (1, 0)
    assert cc[N].tn == 1


def test_hand_counted_benign():
    cc = confusion_counts([B, B, M], [B, B, B])
    assert (cc[B].tp, cc[B].fn) == (2, 1)


def test_confusion_errors():
    with pytest.raises(ValueError):
        confusion_counts([0, 1], [0])
    with pytest.raises(ValueError):
        confusion_counts(["cyst"], ["benign"])
    with pytest.raises(ValueError):
        confusion_counts([], [])


# ---------------------------------------------------------- P / R / F1

def test_benign_f1_from_reference_pair():
    s = ClassScores(0.7449, 0.8391, 0, 87)
    f1 = 2 * s.precision * s.recall / (s.precision + s.recall)
    assert round(100 * f1, 2) == 78.92


def test_zero_denominator_is_flagged():
    s = class_scores(Counts(tp=0, fp=0, tn=5, fn=3))
    assert s.precision == 0 and "precision" in s.undefined
    assert s.f1 == 0 and "f1" in s.undefined


def test_recall_73_of_87():
    s = class_scores(Counts(tp=73, fn=14, fp=25, tn=44))
    assert round(100 * s.recall, 2) == 83.91


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=60))
def test_metrics_match_sklearn(pairs):
    preds = [p for p, _ in pairs]
    truths = [t for _, t in pairs]
    cc = confusion_counts(preds, truths)
    acc, scores = prf_accuracy(cc)
    labels = [0, 1, 2]
    assert acc == pytest.approx(skm.accuracy_score(truths, preds))
    p = skm.precision_score(truths, preds, labels=labels, average=None, zero_division=0)
    r = skm.recall_score(truths, preds, labels=labels, average=None, zero_division=0)
    f = skm.f1_score(truths, preds, labels=labels, average=None, zero_division=0)
    for c in ClassLabel:
        assert scores[c].precision == pytest.approx(p[c])
        assert scores[c].recall == pytest.approx(r[c])
        assert scores[c].f1 == pytest.approx(f[c])
        assert (scores[c].f1 == 0) == (cc[c].tp == 0)
        assert cc[c].total == len(pairs)
    assert sum(cc[c].tp for c in ClassLabel) == cc.correct
    if all(scores[c].support > 0 for c in ClassLabel):
        wp, wr, wf = weighted_average(scores)
        assert wp == pytest.approx(skm.precision_score(truths, preds, average="weighted", zero_division=0))
        assert wf == pytest.approx(skm.f1_score(truths, preds, average="weighted", zero_division=0))
        # accuracy equals support-weighted recall
        assert wr == pytest.approx(acc)
        for m_, v in zip(("precision", "recall", "f1"), (wp, wr, wf)):
            vals = [getattr(scores[c], m_) for c in ClassLabel]
            assert min(vals) - 1e-12 <= v <= max(vals) + 1e-12


# ------------------------------------------------------ weighted / SD

def _scores(values, supports=(87, 44, 25)):
    return [ClassScores(v, v, v, s) for v, s in zip(values, supports)]


def test_weighted_recall_reference():
    _, wr, _ = weighted_average(_scores([0.8391, 0.6591, 0.52]))
    assert 100 * wr == pytest.approx(73.72, abs=0.01)


def test_weighted_precision_reference():
    wp, _, _ = weighted_average(_scores([0.7449, 0.7250, 0.7222]))
    assert 100 * wp == pytest.approx(73.57, abs=0.01)


def test_weighted_equal_values():
    assert weighted_average(_scores([0.6, 0.6, 0.6])) == pytest.approx((0.6, 0.6, 0.6))


@given(st.lists(st.floats(0, 1), min_size=3, max_size=3), st.lists(st.integers(1, 100), min_size=3, max_size=3))
def test_weighted_order_invariant(vals, sup):
    a = weighted_average(_scores(vals, sup))
    b = weighted_average(list(reversed(_scores(vals, sup))))
    assert a == pytest.approx(b)


@given(st.lists(st.floats(0, 1), min_size=3, max_size=3), st.integers(1, 50))
def test_weighted_equal_supports_is_mean(vals, s):
    assert weighted_average(_scores(vals, (s, s, s)))[0] == pytest.approx(sum(vals) / 3)


def test_sd_reference_values():
    assert class_consistency_sd([0.7892, 0.6905, 0.6047]) == pytest.approx(0.0923, abs=1e-4)
    assert class_consistency_sd([0.7449, 0.7250, 0.7222]) == pytest.approx(0.0124, abs=1e-4)
    assert class_consistency_sd([0.5, 0.5, 0.5]) == 0


def test_population_sd_does_not_match():
    vals = np.array([0.7892, 0.6905, 0.6047])
    assert vals.std(ddof=0) == pytest.approx(0.0754, abs=1e-4)
    assert abs(vals.std(ddof=0) - 0.0923) > 0.01


@given(st.lists(st.floats(0, 1), min_size=3, max_size=3))
def test_sd_matches_two_pass(vals):
    assert abs(class_consistency_sd(vals) - two_pass_sd(vals)) <= 1e-12


# ---------------------------------------------------- support derivation

def _reference_recalls():
    return [[ref.CLASS_SCORES[b][c][1] for b in ref.CLASS_SCORES] for c in ("benign", "malignant", "normal")]


def test_recall_only_candidates():
    found = consistent_supports(_reference_recalls(), max_total=200)
    assert (87, 44, 25) in found
    assert set(found) == {(87, 44, 25), (87, 44, 50), (87, 88, 25)}


def test_reported_accuracy_singles_out_156():
    found = consistent_supports(_reference_recalls(), max_total=200)
    vgg16 = [ref.CLASS_SCORES["vgg16"][c][1] for c in ("benign", "malignant", "normal")]
    keep = [t for t in found if accuracy_consistent(t, vgg16, ref.ACCURACY_VGG16)]
    assert keep == [(87, 44, 25)]


# ------------------------------------------------------------ reports

def test_perfect_report():
    labels = [0, 1, 2, 2, 1, 0]
    rep = evaluate_predictions(labels, labels)
    assert rep.accuracy == 1.0
    assert rep.sd == {"f1": 0.0, "precision": 0.0, "recall": 0.0}


def test_report_internal_consistency():
    rng = np.random.default_rng(3)
    truths = rng.integers(0, 3, 200)
    preds = np.where(rng.random(200) < 0.7, truths, rng.integers(0, 3, 200))
    rep = evaluate_predictions(preds, truths)
    total = sum(s.support for s in rep.classes.values())
    for m_ in ("precision", "recall", "f1"):
        recomputed = sum(getattr(s, m_) * s.support for s in rep.classes.values()) / total
        assert round(recomputed, 4) == round(rep.weighted[m_], 4)


def test_report_with_missing_predicted_class_does_not_crash():
    rep = evaluate_predictions([0, 0, 0], [0, 1, 2])
    assert "precision" in rep.classes["malignant"].undefined
    assert "* zero denominator" in rep.text_table()


def test_report_json_round_trip(tmp_path):
    rep = evaluate_predictions([0, 1, 2, 1], [0, 1, 1, 2], name="m")
    rep.segmentation = {"bce": 0.2, "dice": 0.6}
    rep.save_json(tmp_path / "r.json")
    assert EvaluationReport.load_json(tmp_path / "r.json") == rep


def test_reference_report_reproduces_weighted_values():
    rep = ref.reference_report("vgg16")
    assert 100 * rep.weighted["recall"] == pytest.approx(73.72, abs=0.01)
    assert 100 * rep.accuracy == pytest.approx(73.72, abs=0.01)


# --------------------------------------------------------- segmentation

def test_segmentation_scores_perfect():
    m = np.zeros((3, 16, 16, 1))
    m[:, 4:10, 4:10] = 1
    s = segmentation_scores(m, m)
    assert s["dice"] == pytest.approx(1.0)
    assert s["bce"] == pytest.approx(0.0, abs=1e-6)


def test_segmentation_mean_of_image_dice():
    t = np.zeros((10, 1))
    t[:5] = 1
    p1 = t.copy()  # dice(p1) computed below
    p2 = np.zeros((10, 1))
    p2[:2] = 1
    s = segmentation_scores([p1, p2], [t, t])
    d1 = (2 * 5 + 1) / (10 + 1)
    d2 = (2 * 2 + 1) / (7 + 1)
    assert s["dice"] == pytest.approx((d1 + d2) / 2)


def test_segmentation_empty_set():
    with pytest.raises(ValueError):
        segmentation_scores([], [])
