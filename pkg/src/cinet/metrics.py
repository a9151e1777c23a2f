"""Binary segmentation metrics (normal = 0, defect = 1), micro-aggregated."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

CLASSES = ("normal", "defect")
REPORT_VERSION = "cinet-metrics/1"


@dataclass(frozen=True)
class ConfusionCounts:
    """Counts from the defect class's point of view; the normal view is derived."""

    tp: int
    fp: int
    fn: int
    tn: int

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def per_class(self) -> dict:
        """(tp, fp, fn, tn) for each class's one-vs-rest view."""
        return {
            "defect": (self.tp, self.fp, self.fn, self.tn),
            "normal": (self.tn, self.fn, self.fp, self.tp),
        }


def confusion_counts(pred, labels) -> ConfusionCounts:
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    if pred.shape != labels.shape:
        raise ValueError(f"prediction/label length mismatch: {pred.size} vs {labels.size}")
    if pred.size == 0:
        raise ValueError("need at least one point")
    cm = np.bincount(2 * labels + pred, minlength=4)
    return ConfusionCounts(tp=int(cm[3]), fp=int(cm[1]), fn=int(cm[2]), tn=int(cm[0]))


def _ratio(num: int, den: int, flags: list, name: str) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


@dataclass
class MetricsReport:
    iou: dict
    precision: dict
    recall: dict
    miou: float
    map: float
    macc: float
    oa: float
    counts: ConfusionCounts
    flags: list = field(default_factory=list)
    per_cloud: dict = field(default_factory=dict)
    ap_rank: float | None = None
    macro_miou: float | None = None

    def summary(self) -> dict:
        out = {
            "miou": self.miou,
            "map": self.map,
            "macc": self.macc,
            "oa": self.oa,
        }
        for c in CLASSES:
            out[f"iou_{c}"] = self.iou[c]
            out[f"precision_{c}"] = self.precision[c]
            out[f"recall_{c}"] = self.recall[c]
        if self.ap_rank is not None:
            out["ap_rank"] = self.ap_rank
        if self.macro_miou is not None:
            out["macro_miou"] = self.macro_miou
        return out


def _report_from_counts(total: ConfusionCounts) -> MetricsReport:
    flags: list = []
    iou, prec, rec = {}, {}, {}
    for c, (tp, fp, fn, _) in total.per_class().items():
        iou[c] = _ratio(tp, tp + fp + fn, flags, f"iou_{c}")
        prec[c] = _ratio(tp, tp + fp, flags, f"precision_{c}")
        rec[c] = _ratio(tp, tp + fn, flags, f"recall_{c}")
    miou = (iou["normal"] + iou["defect"]) / 2.0
    return MetricsReport(
        iou=iou,
        precision=prec,
        recall=rec,
        miou=miou,
        map=(prec["normal"] + prec["defect"]) / 2.0,
        macc=(rec["normal"] + rec["defect"]) / 2.0,
        oa=(total.tp + total.tn) / total.total,
        counts=total,
        flags=flags,
    )


def report(counts, cloud_ids=None) -> MetricsReport:
    """Sum counts over clouds, then compute ratios (micro aggregation).

    Also records each cloud's own report and the macro mean of their mIoU.
    """
    if isinstance(counts, ConfusionCounts):
        counts = [counts]
    counts = list(counts)
    if not counts:
        raise ValueError("report needs at least one cloud")
    total = counts[0]
    for c in counts[1:]:
        total = total + c
    rep = _report_from_counts(total)
    ids = list(cloud_ids) if cloud_ids is not None else [str(i) for i in range(len(counts))]
    rep.per_cloud = {cid: _report_from_counts(c) for cid, c in zip(ids, counts)}
    rep.macro_miou = float(np.mean([r.miou for r in rep.per_cloud.values()]))
    return rep


def average_precision(scores, labels) -> float:
    """Rank-based AP of the positive class (step-wise precision/recall integral)."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tps = np.cumsum(y)
    fps = np.cumsum(~y)
    # Only thresholds at the end of each run of equal scores count.
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    precision = tps[last] / (tps[last] + fps[last])
    recall = tps[last] / n_pos
    recall_prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - recall_prev) * precision))


def defect_proportion(labels) -> float:
    labels = np.asarray(labels).reshape(-1)
    if labels.size == 0:
        raise ValueError("labels required")
    return float(np.count_nonzero(labels == 1) / labels.size)


def export_report(rep: MetricsReport, path) -> None:
    """CSV rows ``scope,metric,value``; scope is ``all`` or ``cloud:<id>``."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# {REPORT_VERSION}\n")
        fh.write("# columns: scope,metric,value; scope 'all' is micro-aggregated over clouds\n")
        if rep.flags:
            fh.write(f"# zero-denominator (reported as 0): {' '.join(rep.flags)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scope", "metric", "value"])
        for name, val in rep.summary().items():
            w.writerow(["all", name, f"{val:.17g}"])
        for name in ("tp", "fp", "fn", "tn"):
            w.writerow(["all", name, getattr(rep.counts, name)])
        for cid, sub in rep.per_cloud.items():
            for name, val in sub.summary().items():
                w.writerow([f"cloud:{cid}", name, f"{val:.17g}"])
            for name in ("tp", "fp", "fn", "tn"):
                w.writerow([f"cloud:{cid}", name, getattr(sub.counts, name)])


def read_report(path) -> dict:
    """Parse an exported report into ``{scope: {metric: value}}``."""
    out: dict = {}
    with open(path) as fh:
        rows = [ln for ln in fh if not ln.startswith("#")]
    for row in csv.DictReader(rows):
        out.setdefault(row["scope"], {})[row["metric"]] = float(row["value"])
    return out
