"""Confusion-count segmentation metrics and multi-run aggregation.

Conventions (also stated in emitted table footers):
  * a 0/0 ratio resolves to 1.0 when both prediction and ground truth are
    empty, and to 0.0 otherwise;
  * aggregation reports the sample standard deviation (n-1), with a single
    run reported as stdev 0.
"""

import math
from dataclasses import dataclass

import numpy as np

METRIC_NAMES = ("iou", "recall", "precision", "f1")


@dataclass
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred, gt):
    """Exact pixel confusion counts between two binary masks of equal shape."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))
    return Confusion(tp, fp, fn, tn)


def _ratio(num, den, both_empty):
    if den == 0:
        return 1.0 if both_empty else 0.0
    return num / den


def iou(c):
    return _ratio(c.tp, c.tp + c.fp + c.fn, c.fp == 0 and c.fn == 0)


def precision(c):
    return _ratio(c.tp, c.tp + c.fp, c.fn == 0)


def recall(c):
    return _ratio(c.tp, c.tp + c.fn, c.fp == 0)


def f1(c):
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, c.fp == 0 and c.fn == 0)


def scores(c):
    """All four metrics for one confusion, keyed by METRIC_NAMES."""
    return {"iou": iou(c), "recall": recall(c), "precision": precision(c), "f1": f1(c)}


def aggregate(records, names=METRIC_NAMES):
    """Mean and sample stdev of each metric over per-repeat records.

    records: list of dicts, one per repeat, each holding the metric values.
    Returns {name: (mean, stdev)} with stdev 0 for a single repeat.
    """
    if not records:
        raise ValueError("no records to aggregate")
    out = {}
    for name in names:
        vals = [float(r[name]) for r in records]
        mean = sum(vals) / len(vals)
        if len(vals) > 1:
            var = sum((v - mean) ** 2 for v in vals) / (len(vals) - 1)
            std = math.sqrt(var)
        else:
            std = 0.0
        out[name] = (mean, std)
    return out


def format_table(rows, names=METRIC_NAMES, percent=True):
    """Aligned plain-text table of aggregated metrics.

    rows: list of (label, {name: (mean, std)}).
    """
    scale = 100.0 if percent else 1.0
    header = ["method"] + [n.capitalize() if n != "iou" else "IoU" for n in names]
    cells = [header]
    for label, agg in rows:
        cells.append([label] + [f"{agg[n][0] * scale:.2f}±{agg[n][1] * scale:.2f}" for n in names])
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells]
    lines.append("# mean±stdev over runs (sample stdev, n-1; single run -> 0);"
                 " empty pred vs empty gt scores 1.0 on all metrics")
    return "\n".join(lines)
