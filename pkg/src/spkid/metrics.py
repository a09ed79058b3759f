"""Confusion matrices, per-class precision/recall/F1 and CSV reports."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from spkid.errors import BadId, EmptyMatrix, LengthMismatch


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # counts[i, j]: true class i predicted as j
    labels: list

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def errors(self) -> int:
        return self.total - int(np.trace(self.counts))


@dataclass
class MetricsReport:
    labels: list
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    undefined: np.ndarray  # True where precision or recall was 0/0
    macro_f1: float
    accuracy: float
    confusion: ConfusionMatrix = None


def confusion_matrix(preds, targets, n_classes, labels=None) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if preds.shape != targets.shape:
        raise LengthMismatch(f"{preds.size} predictions for {targets.size} targets")
    for name, ids in (("prediction", preds), ("target", targets)):
        if ids.size and (ids.min() < 0 or ids.max() >= n_classes):
            raise BadId(f"{name} id outside 0..{n_classes - 1}")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (targets, preds), 1)
    if labels is None:
        labels = [str(i) for i in range(n_classes)]
    return ConfusionMatrix(counts, list(labels))


def _ratio(num, den):
    out = np.zeros(num.shape, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def precision_recall_f1(cm: ConfusionMatrix) -> MetricsReport:
    """Per-class metrics; 0/0 is defined as 0 and flagged in ``undefined``.

    ``macro_f1`` averages F1 over classes with nonzero support.
    """
    counts = cm.counts
    total = int(counts.sum())
    if total < 1:
        raise EmptyMatrix("confusion matrix has no samples")
    tp = np.diag(counts).astype(np.int64)
    support = counts.sum(axis=1)
    predicted = counts.sum(axis=0)
    precision = _ratio(tp, predicted)
    recall = _ratio(tp, support)
    f1 = _ratio(2.0 * precision * recall, precision + recall)
    undefined = (predicted == 0) | (support == 0)
    present = support > 0
    macro = float(f1[present].mean()) if present.any() else 0.0
    return MetricsReport(list(cm.labels), precision, recall, f1, support, undefined,
                         macro, int(tp.sum()) / total, cm)


def macro_f1_from_predictions(preds, targets, n_classes) -> float:
    """Macro-F1 counted directly from label vectors (no confusion matrix)."""
    preds = np.asarray(preds)
    targets = np.asarray(targets)
    scores = []
    for c in range(n_classes):
        tp = int(np.sum((preds == c) & (targets == c)))
        fp = int(np.sum((preds == c) & (targets != c)))
        fn = int(np.sum((preds != c) & (targets == c)))
        if tp + fn == 0:
            continue
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn)
        scores.append(2 * p * r / (p + r) if p + r else 0.0)
    return float(np.mean(scores)) if scores else 0.0


# ---------------------------------------------------------------- CSV reports


def _fmt(x) -> str:
    return f"{x:.6f}"


def write_report(report: MetricsReport, cm: ConfusionMatrix, log, out_dir) -> None:
    """Write metrics.csv, confusion.csv and curves.csv into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["class", "precision", "recall", "f1", "support", "undefined"])
        for i, label in enumerate(report.labels):
            w.writerow([label, _fmt(report.precision[i]), _fmt(report.recall[i]),
                        _fmt(report.f1[i]), int(report.support[i]), int(report.undefined[i])])
        w.writerow(["macro_f1", "", "", _fmt(report.macro_f1), int(report.support.sum()), 0])
        w.writerow(["accuracy", "", "", _fmt(report.accuracy), int(report.support.sum()), 0])
    with open(os.path.join(out_dir, "confusion.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["true\\pred", *cm.labels])
        for label, row in zip(cm.labels, cm.counts):
            w.writerow([label, *(int(v) for v in row)])
    if log is not None:
        log.write_csv(os.path.join(out_dir, "curves.csv"))


def read_metrics_csv(path) -> MetricsReport:
    labels, p, r, f1, support, undefined = [], [], [], [], [], []
    macro = accuracy = None
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            if row["class"] == "macro_f1":
                macro = float(row["f1"])
            elif row["class"] == "accuracy":
                accuracy = float(row["f1"])
            else:
                labels.append(row["class"])
                p.append(float(row["precision"]))
                r.append(float(row["recall"]))
                f1.append(float(row["f1"]))
                support.append(int(row["support"]))
                undefined.append(bool(int(row["undefined"])))
    return MetricsReport(labels, np.array(p), np.array(r), np.array(f1),
                         np.array(support), np.array(undefined), macro, accuracy)


def read_confusion_csv(path) -> ConfusionMatrix:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    labels = rows[0][1:]
    counts = np.array([[int(v) for v in row[1:]] for row in rows[1:]], dtype=np.int64)
    return ConfusionMatrix(counts, labels)
