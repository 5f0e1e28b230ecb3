"""Pixel confusion counts and the five derived segmentation metrics.

Metrics are computed on pooled (micro-averaged) counts.  A metric whose
denominator is zero is defined as 1: a prediction that correctly contains
none of the relevant pixels scores perfectly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatchError
from .tensor import Tensor


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )


@dataclass
class MetricsReport:
    miou: float
    dsc: float
    acc: float
    sen: float
    spe: float

    def as_dict(self) -> dict[str, float]:
        return {"miou": self.miou, "dsc": self.dsc, "acc": self.acc,
                "sen": self.sen, "spe": self.spe}


def confusion_counts(pred, target, threshold: float = 0.5) -> ConfusionCounts:
    """Count pixels: predicted foreground iff pred > threshold."""
    p = pred.array if isinstance(pred, Tensor) else np.asarray(pred)
    t = target.array if isinstance(target, Tensor) else np.asarray(target)
    if p.shape != t.shape:
        raise ShapeMismatchError(f"prediction {p.shape} vs target {t.shape}")
    hit = p > threshold
    pos = t > 0.5
    tp = int(np.count_nonzero(hit & pos))
    fp = int(np.count_nonzero(hit & ~pos))
    fn = int(np.count_nonzero(~hit & pos))
    tn = int(np.count_nonzero(~hit & ~pos))
    return ConfusionCounts(tp, fp, fn, tn)


def _ratio(num: int, den: int) -> float:
    return num / den if den else 1.0


def compute_metrics(c: ConfusionCounts) -> MetricsReport:
    return MetricsReport(
        miou=_ratio(c.tp, c.tp + c.fp + c.fn),
        dsc=_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        acc=_ratio(c.tp + c.tn, c.total),
        sen=_ratio(c.tp, c.tp + c.fn),
        spe=_ratio(c.tn, c.tn + c.fp),
    )
