"""Confusion matrix, OA / AA / Kappa, and multi-run aggregation."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


def confusion(true, pred, n_classes: int) -> np.ndarray:
    """L x L counts; rows are true classes, columns predictions (ids 1..L)."""
    true = np.asarray(true, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if true.shape != pred.shape:
        raise MetricError(f"true and pred lengths differ: {true.size} vs {pred.size}")
    for name, arr in (("true", true), ("pred", pred)):
        if arr.size and (arr.min() < 1 or arr.max() > n_classes):
            raise MetricError(f"{name} label outside 1..{n_classes}")
    flat = (true - 1) * n_classes + (pred - 1)
    return np.bincount(flat, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def _total(cm: np.ndarray) -> int:
    total = int(cm.sum())
    if total <= 0:
        raise MetricError("confusion matrix is empty")
    return total


def overall_accuracy(cm: np.ndarray) -> float:
    return int(np.trace(cm)) / _total(cm)


def per_class_accuracy(cm: np.ndarray) -> np.ndarray:
    """Diagonal over row totals; NaN for classes with no true samples."""
    rows = cm.sum(axis=1).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(rows > 0, np.diag(cm) / rows, np.nan)


def average_accuracy(cm: np.ndarray) -> float:
    """Mean per-class accuracy; classes with no true samples are skipped."""
    _total(cm)
    acc = per_class_accuracy(cm)
    missing = np.flatnonzero(np.isnan(acc))
    if missing.size:
        log.warning("classes %s have no true samples; excluded from AA",
                    [int(i) + 1 for i in missing])
    return float(np.nanmean(acc))


def kappa(cm: np.ndarray) -> float:
    total = _total(cm)
    p_o = int(np.trace(cm)) / total
    rows = cm.sum(axis=1).astype(np.float64)
    cols = cm.sum(axis=0).astype(np.float64)
    p_e = float((rows * cols).sum()) / (float(total) ** 2)
    if p_e == 1.0:
        raise MetricError("kappa undefined: chance agreement is 1 (one class in both margins)")
    return (p_o - p_e) / (1.0 - p_e)


@dataclass
class MetricsReport:
    oa: float
    aa: float
    kappa: float
    per_class: list[float]
    n_samples: int

    @classmethod
    def from_confusion(cls, cm: np.ndarray) -> "MetricsReport":
        acc = per_class_accuracy(cm)
        try:
            k = kappa(cm)
        except MetricError:
            k = float("nan")
        return cls(overall_accuracy(cm), average_accuracy(cm), k,
                   [None if math.isnan(a) else float(a) for a in acc], int(cm.sum()))

    def to_dict(self, digits: int = 4) -> dict:
        def r(x):
            return None if x is None or math.isnan(x) else round(x, digits)

        return {"oa": r(self.oa), "aa": r(self.aa), "kappa": r(self.kappa),
                "per_class": [r(a) for a in self.per_class], "n_samples": self.n_samples}


def aggregate_runs(reports: Sequence[MetricsReport | dict]) -> dict[str, tuple[float, float]]:
    """Mean and sample (n-1) standard deviation of OA, AA and Kappa."""
    if not reports:
        raise MetricError("need at least one report")
    out = {}
    for key in ("oa", "aa", "kappa"):
        vals = np.array([r[key] if isinstance(r, dict) else getattr(r, key) for r in reports],
                        dtype=np.float64)
        std = float(vals.std(ddof=1)) if vals.size > 1 and np.ptp(vals) > 0 else 0.0
        out[key] = (float(vals.mean()), std)
    return out


def write_metrics_json(report: MetricsReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2) + "\n")


def write_confusion_csv(cm: np.ndarray, class_names: Sequence[str], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(class_names)
        for row in cm:
            writer.writerow(int(v) for v in row)


def read_confusion_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[int(v) for v in r] for r in rows[1:]], dtype=np.int64)
