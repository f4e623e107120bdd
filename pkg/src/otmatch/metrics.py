"""Segmentation scoring: per-class IoU, mean IoU, foreground-background IoU."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInput, ShapeMismatch
from .tensorio import BinaryMask


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion_counts(pred: BinaryMask, gt: BinaryMask) -> ConfusionCounts:
    """Pixelwise tallies treating 1 as positive."""
    if pred.values.shape != gt.values.shape:
        raise ShapeMismatch(f"pred {pred.values.shape} vs gt {gt.values.shape}")
    p = pred.values.astype(bool)
    g = gt.values.astype(bool)
    return ConfusionCounts(
        tp=int(np.sum(p & g)),
        fp=int(np.sum(p & ~g)),
        fn=int(np.sum(~p & g)),
        tn=int(np.sum(~p & ~g)),
    )


def iou(c: ConfusionCounts) -> float:
    """TP / (TP + FP + FN); 1.0 when the class is empty in both masks."""
    denom = c.tp + c.fp + c.fn
    if denom == 0:
        return 1.0
    return c.tp / denom


def mean_iou(per_class: list[tuple[int, float]]) -> float:
    """Arithmetic mean of per-class IoU values."""
    if not per_class:
        raise EmptyInput("mean_iou needs at least one class")
    return float(np.mean([v for _, v in per_class]))


def fb_iou(pred: BinaryMask, gt: BinaryMask) -> float:
    """Mean of foreground IoU and background IoU (roles inverted)."""
    counts = confusion_counts(pred, gt)
    inverted = ConfusionCounts(tp=counts.tn, fp=counts.fn, fn=counts.fp, tn=counts.tp)
    return 0.5 * (iou(counts) + iou(inverted))


@dataclass
class MetricReport:
    """Scores for one episode or an aggregation of episodes."""

    per_class: list[tuple[int, float]]
    miou: float
    fbiou: float
    iou_fg: float
    iou_bg: float
    header: list[str] = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return len(self.per_class)


def score_prediction(pred: BinaryMask, gt: BinaryMask, class_id: int = 1) -> MetricReport:
    """Full metric report for one binary episode labelled `class_id`."""
    counts = confusion_counts(pred, gt)
    inverted = ConfusionCounts(tp=counts.tn, fp=counts.fn, fn=counts.fp, tn=counts.tp)
    fg = iou(counts)
    bg = iou(inverted)
    per_class = [(class_id, fg)]
    return MetricReport(
        per_class=per_class,
        miou=mean_iou(per_class),
        fbiou=0.5 * (fg + bg),
        iou_fg=fg,
        iou_bg=bg,
    )


def render_report(report: MetricReport) -> str:
    """Serialize a report as `key = value` lines."""
    lines = [f"# {note}" for note in report.header]
    lines += [
        f"iou_fg = {report.iou_fg:.6f}",
        f"iou_bg = {report.iou_bg:.6f}",
        f"fbiou = {report.fbiou:.6f}",
        f"miou = {report.miou:.6f}",
    ]
    lines += [f"iou_{cls} = {val:.6f}" for cls, val in report.per_class]
    return "\n".join(lines) + "\n"
