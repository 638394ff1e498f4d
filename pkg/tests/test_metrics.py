"""Confusion matrix, IoU arithmetic, retention, and report serialization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deformseg import metrics

# Reference per-class IoU tables (percent) from the published benchmark
# results this implementation's arithmetic is checked against.
DOMAIN_A_IOUS = [97.56, 80.31, 90.01, 53.57, 50.64, 38.62, 55.81, 69.31,
                 89.46, 58.46, 92.73, 71.78, 51.44, 91.75, 62.14, 76.64,
                 48.15, 46.98, 69.24]
DOMAIN_B_IOUS = [92.39, 60.75, 83.75, 28.74, 57.34, 43.86, 52.91, 58.39,
                 84.30, 42.05, 94.49, 64.19, 46.93, 90.75, 49.83, 75.04,
                 0.00, 54.91, 49.82]


def test_accumulate_diagonal_on_perfect_prediction(rng):
    labels = rng.integers(0, 4, size=(8, 8))
    cm = metrics.ConfusionMatrix(4).accumulate(labels, labels)
    assert cm.counts.sum() == 64
    assert np.array_equal(np.diag(cm.counts), np.bincount(labels.ravel(), minlength=4))


def test_accumulate_skips_ignored(rng):
    labels = np.full((4, 4), 255)
    cm = metrics.ConfusionMatrix(3).accumulate(rng.integers(0, 3, size=(4, 4)), labels)
    assert cm.counts.sum() == 0


def test_accumulate_matches_counting_oracle(rng):
    labels = rng.integers(0, 5, size=(8, 8))
    labels[rng.random((8, 8)) < 0.2] = 255
    preds = rng.integers(0, 5, size=(8, 8))
    cm = metrics.ConfusionMatrix(5).accumulate(preds, labels)
    want = np.zeros((5, 5), dtype=np.int64)
    for i in range(8):
        for j in range(8):
            if labels[i, j] != 255:
                want[labels[i, j], preds[i, j]] += 1
    assert np.array_equal(cm.counts, want)


def test_accumulate_rejects_out_of_range():
    cm = metrics.ConfusionMatrix(3)
    with pytest.raises(ValueError, match="class id"):
        cm.accumulate(np.array([[3]]), np.array([[0]]))


def test_iou_arithmetic():
    cm = metrics.ConfusionMatrix(2)
    # class 0: TP=50, FP=25, FN=25
    cm.counts[0, 0] = 50
    cm.counts[1, 0] = 25
    cm.counts[0, 1] = 25
    iou = metrics.iou_per_class(cm)
    assert iou[0] == 50 / 100
    # class 1: TP=0 with FN>0 -> 0.0, not undefined
    assert iou[1] == 0.0


def test_iou_perfect_and_never_predicted(rng):
    labels = rng.integers(0, 3, size=(6, 6))
    cm = metrics.ConfusionMatrix(4).accumulate(labels, labels)
    iou = metrics.iou_per_class(cm)
    assert np.allclose(iou[:3], 1.0)
    assert np.isnan(iou[3])            # class 3 never appears: undefined


def test_miou_policies():
    assert metrics.miou([0.5, 1.0]) == 0.75
    vec = [0.6, np.nan, 0.9]
    assert abs(metrics.miou(vec, metrics.POLICY_ZERO) - 0.5) < 1e-12
    assert abs(metrics.miou(vec, metrics.POLICY_EXCLUDE) - 0.75) < 1e-12
    with pytest.raises(ValueError):
        metrics.miou([np.nan], metrics.POLICY_EXCLUDE)


def test_reference_table_means():
    mean_a = metrics.miou(np.array(DOMAIN_A_IOUS) / 100.0)
    mean_b = metrics.miou(np.array(DOMAIN_B_IOUS) / 100.0)
    assert abs(mean_a * 100 - 68.14) < 0.01
    assert abs(mean_b * 100 - 59.50) < 0.01


def test_reference_retention_scores():
    assert abs(metrics.retention(59.50, 68.14) - 0.8732) < 1e-4
    assert abs(metrics.retention(43.03, 45.22) - 0.9516) < 1e-4
    assert abs(metrics.retention(40.26, 52.82) - 0.7622) < 1e-4
    assert abs(metrics.retention(46.06, 68.20) - 0.6754) < 1e-4
    with pytest.raises(ValueError):
        metrics.retention(1.0, 0.0)


def test_class_report_round_trip(rng):
    labels = rng.integers(0, 3, size=(6, 6))
    preds = rng.integers(0, 3, size=(6, 6))
    cm = metrics.ConfusionMatrix(3).accumulate(preds, labels)
    report = metrics.class_report(cm, ["a", "b", "c"])
    csv1 = report.to_csv()
    csv2 = metrics.ClassReport.from_csv(csv1).to_csv()
    assert csv1 == csv2
    assert csv1.splitlines()[0] == "class,iou"
    assert csv1.splitlines()[-1].startswith("miou,")
    assert abs(report.miou - metrics.miou(metrics.iou_per_class(cm))) < 1e-12


def test_class_report_checks_names():
    cm = metrics.ConfusionMatrix(3)
    cm.counts[0, 0] = 1
    with pytest.raises(ValueError, match="names"):
        metrics.class_report(cm, ["only", "two"])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(2, 5))
def test_accumulation_is_partition_invariant(seed, parts):
    """Any partition of the pixel stream yields the same confusion matrix."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 4, size=(12, 12))
    preds = rng.integers(0, 4, size=(12, 12))
    whole = metrics.ConfusionMatrix(4).accumulate(preds, labels)
    merged = metrics.ConfusionMatrix(4)
    rows = np.array_split(np.arange(12), parts)
    for chunk in rows:
        piece = metrics.ConfusionMatrix(4).accumulate(preds[chunk], labels[chunk])
        merged.merge(piece)
    assert np.array_equal(whole.counts, merged.counts)


def test_miou_from_cm_matches_per_pixel_brute_force(rng):
    labels = rng.integers(0, 3, size=(5, 5))
    preds = rng.integers(0, 3, size=(5, 5))
    cm = metrics.ConfusionMatrix(3).accumulate(preds, labels)
    got = metrics.miou(metrics.iou_per_class(cm))
    ious = []
    for c in range(3):
        inter = np.sum((preds == c) & (labels == c))
        union = np.sum((preds == c) | (labels == c))
        ious.append(inter / union if union else 0.0)
    assert abs(got - np.mean(ious)) < 1e-12
