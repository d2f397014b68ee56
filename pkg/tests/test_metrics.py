import itertools
import json
import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.core.errors import DataError
from src.metrics.classification import top_k_accuracy
from src.metrics.confusion import ConfusionMatrix, accumulate, macc_aacc, miou
from src.metrics.report import REPORT_KEYS, MetricsReport, validate_report


def test_top1_example():
    probs = np.array([[0.1, 0.5, 0.4], [0.6, 0.3, 0.1], [0.2, 0.2, 0.6]])
    assert top_k_accuracy(probs, np.array([1, 1, 2]), 1) == pytest.approx(2 / 3)
    assert top_k_accuracy(probs, np.array([1, 1, 2]), 2) == 1.0


def test_k_is_clamped_to_class_count():
    probs = np.array([[0.9, 0.1], [0.2, 0.8]])
    assert top_k_accuracy(probs, np.array([1, 0]), 5) == 1.0


def test_ties_rank_lower_class_first():
    probs = np.array([[0.5, 0.5]])
    assert top_k_accuracy(probs, np.array([0]), 1) == 1.0
    assert top_k_accuracy(probs, np.array([1]), 1) == 0.0


def test_top_k_is_monotone():
    rng = np.random.default_rng(0)
    probs = rng.random((50, 6))
    labels = rng.integers(0, 6, 50)
    scores = [top_k_accuracy(probs, labels, k) for k in range(1, 7)]
    assert scores == sorted(scores)
    assert scores[-1] == 1.0


@pytest.mark.parametrize("probs,labels,k", [
    (np.zeros((2, 3)), np.array([0, 3]), 1),
    (np.zeros((2, 3)), np.array([0]), 1),
    (np.zeros((2, 3)), np.array([0, 1]), 0),
    (np.zeros((0, 3)), np.zeros(0), 1),
])
def test_top_k_rejects(probs, labels, k):
    with pytest.raises(DataError):
        top_k_accuracy(probs, labels, k)


def test_confusion_worked_example():
    cm = accumulate(ConfusionMatrix(2), np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]))
    assert cm.counts.tolist() == [[1, 1], [0, 2]]
    per_class, mean = miou(cm)
    assert per_class == pytest.approx([1 / 2, 2 / 3])
    assert mean == pytest.approx(7 / 12)
    macc, aacc = macc_aacc(cm)
    assert macc == pytest.approx(3 / 4)
    assert aacc == pytest.approx(3 / 4)


def test_ignored_pixels_are_skipped():
    cm = accumulate(ConfusionMatrix(2), np.array([[0, 1], [1, 0]]), np.array([[0, 255], [255, 1]]))
    assert cm.total == 2
    assert cm.counts.tolist() == [[1, 0], [1, 0]]


def test_absent_class_is_nan_and_excluded():
    cm = accumulate(ConfusionMatrix(3), np.array([0, 1]), np.array([0, 1]))
    per_class, mean = miou(cm)
    assert per_class[:2] == [1.0, 1.0]
    assert math.isnan(per_class[2])
    assert mean == 1.0
    assert macc_aacc(cm) == (1.0, 1.0)


def test_predicted_only_class_counts_in_miou_not_macc():
    cm = accumulate(ConfusionMatrix(3), np.array([0, 2]), np.array([0, 0]))
    per_class, mean = miou(cm)
    assert per_class[0] == pytest.approx(0.5)
    assert per_class[2] == 0.0
    assert mean == pytest.approx(0.25)
    assert macc_aacc(cm)[0] == pytest.approx(0.5)


def test_merge():
    a = accumulate(ConfusionMatrix(2), np.array([0]), np.array([0]))
    b = accumulate(ConfusionMatrix(2), np.array([1]), np.array([0]))
    assert a.merge(b).counts.tolist() == [[1, 1], [0, 0]]
    with pytest.raises(DataError):
        a.merge(ConfusionMatrix(3))


def test_confusion_errors():
    with pytest.raises(DataError):
        accumulate(ConfusionMatrix(2), np.array([2]), np.array([0]))
    with pytest.raises(DataError):
        accumulate(ConfusionMatrix(2), np.array([0, 1]), np.array([0]))
    with pytest.raises(DataError):
        miou(ConfusionMatrix(2))
    with pytest.raises(DataError):
        ConfusionMatrix(0)


def set_iou(preds, labels, cls):
    pred_set = {i for i, p in enumerate(preds) if p == cls}
    label_set = {i for i, t in enumerate(labels) if t == cls}
    union = pred_set | label_set
    return len(pred_set & label_set) / len(union) if union else None


def test_metrics_match_set_definitions_exhaustively():
    k = 3
    for labels in itertools.product(range(k), repeat=3):
        for preds in itertools.product(range(k), repeat=3):
            cm = accumulate(ConfusionMatrix(k), np.array(preds), np.array(labels))
            per_class, mean = miou(cm)
            expected = [set_iou(preds, labels, c) for c in range(k)]
            present = [v for v in expected if v is not None]
            for got, want in zip(per_class, expected):
                assert math.isnan(got) if want is None else got == pytest.approx(want)
            assert mean == pytest.approx(sum(present) / len(present))
            assert macc_aacc(cm)[1] == pytest.approx(sum(p == t for p, t in zip(preds, labels)) / 3)


# --- report ---

def test_report_nan_becomes_null():
    report = MetricsReport(miou=0.5, macc=0.5, aacc=0.9, per_class_iou=[0.9, float("nan")], params=10, flops=20)
    data = json.loads(report.to_json())
    assert tuple(data) == REPORT_KEYS
    assert data["per_class_iou"] == [0.9, None]
    assert validate_report(data) is data


def test_report_validation():
    good = MetricsReport(top1=1.0, top5=1.0, params=3, flops=4).to_dict()
    validate_report(good)
    for change in ({"top1": 1.5}, {"params": True}, {"flops": -1}, {"per_class_iou": [2.0]}, {"extra": 1}):
        with pytest.raises(DataError):
            validate_report({**good, **change})
    missing = dict(good)
    del missing["aacc"]
    with pytest.raises(DataError):
        validate_report(missing)
