import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from fabseg.exceptions import EmptyInput, InvalidArgument, ShapeError
from fabseg.metrics import ConfusionCounts, MetricsAccumulator, confusion_counts, miou, pixel_metrics

masks = arrays(np.uint8, (6, 7), elements=st.integers(0, 1))


def test_confusion_examples():
    gt = np.zeros(16, np.uint8)
    gt[:5] = 1
    assert confusion_counts(gt, gt) == ConfusionCounts(tp=5, fp=0, tn=11, fn=0)
    assert confusion_counts(np.ones((2, 2)), np.array([[1, 0], [1, 0]])) == ConfusionCounts(2, 2, 0, 0)


@given(masks, masks)
def test_confusion_swap_symmetry(a, b):
    ab, ba = confusion_counts(a, b), confusion_counts(b, a)
    assert (ab.tp, ab.tn, ab.fp, ab.fn) == (ba.tp, ba.tn, ba.fn, ba.fp)
    assert ab.total == a.size


@given(masks, masks)
def test_metrics_match_enumeration(p, g):
    pairs = list(zip(p.ravel().tolist(), g.ravel().tolist()))
    tp = pairs.count((1, 1))
    fp = pairs.count((1, 0))
    fn = pairs.count((0, 1))
    m = pixel_metrics(confusion_counts(p, g))
    if tp + fp + fn:
        assert m["iou"] == pytest.approx(tp / (tp + fp + fn))
        assert m["f1"] == pytest.approx(2 * tp / (2 * tp + fp + fn))
    assert m["accuracy"] == pytest.approx(sum(a == b for a, b in pairs) / len(pairs))
    assert 0 <= m["iou"] <= m["f1"] <= 1


def test_pixel_metrics_examples():
    assert pixel_metrics(ConfusionCounts(3, 0, 5, 0)) == {"iou": 1.0, "f1": 1.0, "accuracy": 1.0}
    m = pixel_metrics(ConfusionCounts(tp=2, fp=2, tn=0, fn=0))
    assert m["iou"] == 0.5 and m["f1"] == pytest.approx(2 / 3) and m["accuracy"] == 0.5
    assert pixel_metrics(ConfusionCounts(0, 0, 9, 0))["iou"] == 1.0
    assert np.isnan(pixel_metrics(ConfusionCounts(0, 0, 9, 0), empty_is_perfect=False)["iou"])
    with pytest.raises(EmptyInput):
        pixel_metrics(ConfusionCounts())


def test_miou_examples():
    assert miou(0.6064, 0.3740) == pytest.approx(0.4902)
    assert miou(0.8493, 0.2762) == pytest.approx(0.56275)
    assert miou(0.3, 0.3) == 0.3
    with pytest.raises(InvalidArgument):
        miou(1.2, 0.1)


def test_confusion_validation():
    with pytest.raises(ShapeError):
        confusion_counts(np.zeros(3), np.zeros(4))
    with pytest.raises(InvalidArgument):
        confusion_counts(np.array([2]), np.array([1]))


def test_accumulator_is_micro_averaged_and_report_format():
    acc = MetricsAccumulator()
    acc.update("region", np.array([1, 1]), np.array([1, 0]))
    acc.update("region", np.array([0, 0]), np.array([0, 0]))
    acc.update("boundary", np.array([1, 0, 0, 0]), np.array([1, 0, 0, 1]))
    report = acc.report()
    assert report.per_class["region"]["iou"] == 0.5
    assert report.per_class["boundary"]["iou"] == 0.5
    assert report.lines() == ["region,50.00,66.67,75.00", "boundary,50.00,66.67,75.00", "miou,50.00"]
    assert report.to_text().endswith("miou,50.00\n")
