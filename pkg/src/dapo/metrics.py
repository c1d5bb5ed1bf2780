"""Ranking and segmentation metrics: AUROC, AP, AUPRO, macro-F1, ROC, confusion."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class MetricError(ValueError):
    pass


def _scored(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise MetricError(f"{s.size} scores but {y.size} labels")
    return s, y


def _both_classes(y: np.ndarray) -> None:
    if y.all() or not y.any():
        raise MetricError("AUROC/ROC need at least one positive and one negative")


def auroc(scores, labels) -> float:
    """Mann-Whitney U / (n_pos * n_neg) with midranks for ties."""
    s, y = _scored(scores, labels)
    _both_classes(y)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    ranks = rankdata(s)  # midranks
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _descending_counts(s: np.ndarray, y: np.ndarray):
    """Cumulative TP/FP at each distinct threshold, high to low."""
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return tp, fp, s[last]


def average_precision(scores, labels) -> float:
    """Sum over distinct thresholds (descending) of (R_k - R_{k-1}) P_k."""
    s, y = _scored(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("average precision needs at least one positive")
    tp, fp, _ = _descending_counts(s, y)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def roc_curve(scores, labels) -> list[tuple[float, float, float]]:
    """(FPR, TPR, threshold) from (0, 0, +inf) through one point per distinct score."""
    s, y = _scored(scores, labels)
    _both_classes(y)
    tp, fp, thr = _descending_counts(s, y)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    pts = [(0.0, 0.0, float("inf"))]
    pts += [(float(f / n_neg), float(t / n_pos), float(th)) for t, f, th in zip(tp, fp, thr)]
    return pts


def trapezoid_area(xs, ys) -> float:
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    return float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2.0))


def confusion_at(scores, labels, threshold: float = 0.5) -> tuple[int, int, int, int]:
    """(TP, FP, TN, FN) with ``score >= threshold`` predicted positive."""
    s, y = _scored(scores, labels)
    pred = s >= threshold
    return (int((pred & y).sum()), int((pred & ~y).sum()), int((~pred & ~y).sum()), int((~pred & y).sum()))


def f1_binary(pred, target) -> float:
    pred = np.asarray(pred).astype(bool).ravel()
    target = np.asarray(target).astype(bool).ravel()
    tp = int((pred & target).sum())
    fp = int((pred & ~target).sum())
    fn = int((~pred & target).sum())
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


def f1_per_class(predictions, targets) -> np.ndarray:
    """Per-class F1 for (N, C) indicator arrays; 0 for classes with no TP."""
    pred = np.asarray(predictions).astype(bool)
    tgt = np.asarray(targets).astype(bool)
    if pred.shape != tgt.shape:
        raise MetricError(f"prediction shape {pred.shape} != target shape {tgt.shape}")
    if pred.ndim == 1:
        pred, tgt = pred[:, None], tgt[:, None]
    pred = pred.reshape(-1, pred.shape[-1])
    tgt = tgt.reshape(-1, tgt.shape[-1])
    return np.array([f1_binary(pred[:, c], tgt[:, c]) for c in range(pred.shape[1])])


def f1_macro(predictions, targets) -> float:
    """Unweighted mean over classes (last axis) of per-class F1."""
    return float(np.mean(f1_per_class(predictions, targets)))


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels).ravel()
    out = np.zeros((labels.size, n_classes), dtype=bool)
    out[np.arange(labels.size), labels] = True
    return out


def _regions(masks: np.ndarray) -> list[np.ndarray]:
    """Flat pixel indices of each 8-connected ground-truth region across all images."""
    regions = []
    offset = 0
    for m in masks:
        lab, n = ndimage.label(m, structure=EIGHT_CONNECTED)
        flat = lab.ravel()
        for r in range(1, n + 1):
            regions.append(np.flatnonzero(flat == r) + offset)
        offset += m.size
    return regions


def pro_curve(anomaly_maps, masks, ignore=None) -> tuple[np.ndarray, np.ndarray]:
    """FPR and mean per-region overlap at every distinct score (descending), from (0, 0).

    Pixels flagged in ``ignore`` count neither as normal nor as region pixels.
    """
    maps = np.asarray(anomaly_maps, dtype=np.float64)
    gt = np.asarray(masks).astype(bool)
    if maps.shape != gt.shape:
        raise MetricError(f"map shape {maps.shape} != mask shape {gt.shape}")
    keep = np.ones(gt.shape, dtype=bool) if ignore is None else ~np.asarray(ignore, dtype=bool)
    if keep.shape != gt.shape:
        raise MetricError(f"ignore shape {keep.shape} != mask shape {gt.shape}")
    if maps.ndim == 2:
        maps, gt, keep = maps[None], gt[None], keep[None]
    gt = gt & keep
    if not gt.any():
        raise MetricError("AUPRO needs at least one anomalous pixel")
    kept = keep.ravel()
    new_index = np.cumsum(kept) - 1
    regions = [new_index[r] for r in _regions(gt)]
    scores = maps.ravel()[kept]
    normal = ~gt.ravel()[kept]
    n_normal = int(normal.sum())

    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    last = np.r_[np.flatnonzero(np.diff(sorted_scores) != 0), scores.size - 1]
    fp_cum = np.cumsum(normal[order])[last]
    fpr = fp_cum / n_normal if n_normal else np.zeros(len(last))

    # per-region overlap: rank position of each region pixel -> its threshold group
    group_of_position = np.repeat(np.arange(len(last)), np.diff(np.r_[-1, last]))
    position = np.empty(scores.size, dtype=np.int64)
    position[order] = np.arange(scores.size)
    pro = np.zeros(len(last))
    for reg in regions:
        hits = np.bincount(group_of_position[position[reg]], minlength=len(last))
        pro += np.cumsum(hits) / reg.size
    pro /= len(regions)
    return np.r_[0.0, fpr], np.r_[0.0, pro]


def _integrate_to(fpr: np.ndarray, pro: np.ndarray, limit: float) -> float:
    area = 0.0
    for i in range(1, fpr.size):
        x0, x1, y0, y1 = fpr[i - 1], fpr[i], pro[i - 1], pro[i]
        if x0 >= limit:
            break
        if x1 > limit:
            y1 = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
            x1 = limit
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def aupro(anomaly_maps, masks, fpr_limit: float = 0.3, ignore=None) -> float:
    """Area under the PRO-vs-FPR curve on [0, fpr_limit], divided by fpr_limit."""
    if not 0 < fpr_limit <= 1:
        raise MetricError("fpr_limit must lie in (0, 1]")
    fpr, pro = pro_curve(anomaly_maps, masks, ignore)
    return _integrate_to(fpr, pro, fpr_limit) / fpr_limit


# -- reports ---------------------------------------------------------------------
@dataclass
class MetricsReport:
    task: str
    overall: dict[str, float] = field(default_factory=dict)
    per_object: dict[str, dict[str, float]] = field(default_factory=dict)
    per_class: dict[str, dict[str, float]] = field(default_factory=dict)
    macro: dict[str, float] = field(default_factory=dict)
    curves: dict[str, list] = field(default_factory=dict)
    notes: dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"task": self.task, "overall": self.overall, "per_object": self.per_object,
                "per_class": self.per_class, "macro": self.macro, "notes": self.notes}

    def rows(self) -> list[tuple[str, str, float]]:
        rows = [("all", k, v) for k, v in self.overall.items()]
        for obj, vals in self.per_object.items():
            rows += [(obj, k, v) for k, v in vals.items()]
        for cls, vals in self.per_class.items():
            rows += [(f"class:{cls}", k, v) for k, v in vals.items()]
        rows += [("macro", k, v) for k, v in self.macro.items()]
        return rows

    def write(self, directory: str | Path, stem: str | None = None) -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        stem = stem or f"report_{self.task}"
        jpath, cpath = directory / f"{stem}.json", directory / f"{stem}.csv"
        jpath.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        with open(cpath, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["object", "metric", "value"])
            for obj, metric, value in self.rows():
                w.writerow([obj, metric, f"{value:.10g}" if value is not None else ""])
        if "roc" in self.curves:
            with open(directory / f"{stem}_roc.csv", "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["fpr", "tpr", "threshold"])
                w.writerows(self.curves["roc"])
        return jpath, cpath


def safe_metric(fn, *args, **kwargs) -> float | None:
    try:
        return fn(*args, **kwargs)
    except MetricError:
        return None


def nanmean(values: Sequence[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None
