"""Pixel-level evaluation: confusion counts, IoU / F1 / accuracy per class and mIOU."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import EmptyInput, InvalidArgument, ShapeError

CLASSES = ("region", "boundary")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


def _check_binary(name, arr):
    arr = np.asarray(arr)
    if arr.dtype != bool and not np.isin(arr, (0, 1)).all():
        raise InvalidArgument(f"{name} must be a binary mask")
    return arr.astype(bool)


def confusion_counts(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    p, g = _check_binary("prediction", pred), _check_binary("ground truth", gt)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp=tp, fp=fp, tn=p.size - tp - fp - fn, fn=fn)


def pixel_metrics(c: ConfusionCounts, empty_is_perfect=True):
    """IoU, F1 and accuracy from confusion counts.

    With no positives in either prediction or ground truth IoU and F1 are
    0/0; ``empty_is_perfect`` scores that case as 1, otherwise as NaN.
    """
    if c.total <= 0:
        raise EmptyInput("no pixels were evaluated")
    denom = c.tp + c.fp + c.fn
    if denom == 0:
        iou = f1 = 1.0 if empty_is_perfect else float("nan")
    else:
        iou = c.tp / denom
        f1 = 2 * c.tp / (2 * c.tp + c.fp + c.fn)
    return {"iou": iou, "f1": f1, "accuracy": (c.tp + c.tn) / c.total}


def miou(iou_r, iou_b):
    for name, v in (("iou_r", iou_r), ("iou_b", iou_b)):
        if not 0.0 <= v <= 1.0:
            raise InvalidArgument(f"{name}={v} lies outside [0, 1]")
    return 0.5 * (iou_r + iou_b)


@dataclass
class MetricsReport:
    per_class: dict = field(default_factory=dict)
    miou: float = float("nan")

    def lines(self):
        """``class,iou,f1,accuracy`` rows plus ``miou,<value>``, in percent with two decimals."""
        out = [
            f"{name},{m['iou'] * 100:.2f},{m['f1'] * 100:.2f},{m['accuracy'] * 100:.2f}"
            for name, m in self.per_class.items()
        ]
        out.append(f"miou,{self.miou * 100:.2f}")
        return out

    def to_text(self):
        return "\n".join(self.lines()) + "\n"


class MetricsAccumulator:
    """Global (micro-averaged) confusion counts per class across many tiles or scenes."""

    def __init__(self, classes=CLASSES):
        self.counts = {name: ConfusionCounts() for name in classes}

    def update(self, name, pred, gt):
        self.counts[name] = self.counts[name] + confusion_counts(pred, gt)
        return self

    def report(self, empty_is_perfect=True):
        per_class = {}
        for name, c in self.counts.items():
            per_class[name] = {**pixel_metrics(c, empty_is_perfect), "counts": c}
        value = float("nan")
        if "region" in per_class and "boundary" in per_class:
            value = miou(per_class["region"]["iou"], per_class["boundary"]["iou"])
        return MetricsReport(per_class, value)
