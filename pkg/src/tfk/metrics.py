"""One-vs-rest confusion counts, per-label metrics and CSV reports."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core.gradcheck import ContractError
from .schema import DERM7PT, LabelSchema

METRICS = ("SEN", "SPE", "PRE", "F1")


@dataclass
class ConfusionCounts:
    """``counts[label]`` is an int array ``[classes, 4]`` with columns TP, FP, TN, FN."""

    schema: LabelSchema
    counts: list[np.ndarray]
    # per-label exact-match hits, kept so accuracy needs no reconstruction
    correct: np.ndarray
    n: int

    def tp(self, label: int) -> np.ndarray:
        return self.counts[label][:, 0]

    def fp(self, label: int) -> np.ndarray:
        return self.counts[label][:, 1]

    def tn(self, label: int) -> np.ndarray:
        return self.counts[label][:, 2]

    def fn(self, label: int) -> np.ndarray:
        return self.counts[label][:, 3]


def binary_counts(pred: np.ndarray, truth: np.ndarray, cls: int) -> np.ndarray:
    p, t = pred == cls, truth == cls
    return np.array([(p & t).sum(), (p & ~t).sum(), (~p & ~t).sum(), (~p & t).sum()], dtype=np.int64)


def confusion(preds, truths, schema: LabelSchema = DERM7PT) -> ConfusionCounts:
    """One-vs-rest counts for every class of every label.

    ``preds`` and ``truths`` are ``[N, num_labels]`` class indices.
    """
    preds, truths = np.asarray(preds), np.asarray(truths)
    if preds.ndim == 1:
        preds, truths = preds[:, None], truths[:, None]
    if preds.shape != truths.shape:
        raise ContractError(f"prediction shape {preds.shape} != truth shape {truths.shape}")
    if preds.shape[1] != schema.num_labels:
        raise ContractError(f"expected {schema.num_labels} label columns, got {preds.shape[1]}")
    counts = [
        np.stack([binary_counts(preds[:, i], truths[:, i], k) for k in range(schema.class_counts[i])])
        for i in range(schema.num_labels)
    ]
    correct = (preds == truths).sum(axis=0).astype(np.int64)
    return ConfusionCounts(schema, counts, correct, int(preds.shape[0]))


def _ratio(num, den) -> tuple[float, bool]:
    """``num/den`` or ``(0, True)`` when the denominator vanishes."""
    return (0.0, True) if den == 0 else (float(num) / float(den), False)


def binary_metrics(tp: int, fp: int, tn: int, fn: int, beta: float = 1.0) -> tuple[dict[str, float], list[str]]:
    """SEN, SPE, PRE, F-score and accuracy of one one-vs-rest table.

    Returns the values and the names of metrics whose denominator was zero.
    """
    sen, d1 = _ratio(tp, tp + fn)
    spe, d2 = _ratio(tn, tn + fp)
    pre, d3 = _ratio(tp, tp + fp)
    b2 = beta * beta
    f, d4 = _ratio((1 + b2) * pre * sen, b2 * pre + sen)
    acc, d5 = _ratio(tp + tn, tp + tn + fp + fn)
    values = {"SEN": sen, "SPE": spe, "PRE": pre, "F1": f, "ACC": acc}
    degenerate = [k for k, d in zip(("SEN", "SPE", "PRE", "F1", "ACC"), (d1, d2, d3, d4, d5)) if d]
    return values, degenerate


@dataclass
class MetricReport:
    schema: LabelSchema
    accuracy: np.ndarray  # [num_labels]
    per_class: list[dict[str, np.ndarray]]  # per label: metric -> [classes]
    macro: list[dict[str, float]]  # per label: metric -> macro average
    degenerate: list[tuple[str, str, str]] = field(default_factory=list)  # (label, class, metric)

    @property
    def avg(self) -> float:
        """Mean exact-match accuracy over the labels."""
        return float(np.mean(self.accuracy))

    def ave(self, metric: str) -> float:
        """Mean over labels of a metric's macro average."""
        if metric == "ACC":
            return self.avg
        return float(np.mean([m[metric] for m in self.macro]))


def compute_metrics(counts: ConfusionCounts, beta: float = 1.0) -> MetricReport:
    schema = counts.schema
    per_class, macro, degenerate = [], [], []
    for i, name in enumerate(schema.names):
        table = {m: np.zeros(schema.class_counts[i]) for m in METRICS}
        for k, cls in enumerate(schema.classes[i]):
            tp, fp, tn, fn = (int(v) for v in counts.counts[i][k])
            values, bad = binary_metrics(tp, fp, tn, fn, beta)
            for m in METRICS:
                table[m][k] = values[m]
            degenerate.extend((name, cls, m) for m in bad if m in METRICS)
        per_class.append(table)
        macro.append({m: float(table[m].mean()) for m in METRICS})
    accuracy = counts.correct / counts.n if counts.n else np.zeros(schema.num_labels)
    return MetricReport(schema, np.asarray(accuracy, dtype=np.float64), per_class, macro, degenerate)


def average_accuracy(preds, truths, schema: LabelSchema = DERM7PT) -> float:
    return compute_metrics(confusion(preds, truths, schema)).avg


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def emit_report(report: MetricReport, out_dir) -> dict[str, Path]:
    """Write ``per_label.csv``, ``per_class.csv`` and ``summary.csv``.

    ``per_class.csv`` carries a ``degenerate`` column listing metrics whose
    denominator was zero (reported as 0).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schema = report.schema
    bad = {}
    for label, cls, m in report.degenerate:
        bad.setdefault((label, cls), []).append(m)
    paths = {k: out / f"{k}.csv" for k in ("per_label", "per_class", "summary")}
    with open(paths["per_label"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "accuracy"] + [f"macro_{m}" for m in METRICS])
        for i, name in enumerate(schema.names):
            w.writerow([name, _fmt(report.accuracy[i])] + [_fmt(report.macro[i][m]) for m in METRICS])
    with open(paths["per_class"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "class"] + list(METRICS) + ["degenerate"])
        for i, name in enumerate(schema.names):
            for k, cls in enumerate(schema.classes[i]):
                w.writerow([name, cls] + [_fmt(report.per_class[i][m][k]) for m in METRICS]
                           + [";".join(bad.get((name, cls), []))])
    with open(paths["summary"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerow(["avg", _fmt(report.avg)])
        for m in ("ACC",) + METRICS:
            w.writerow([f"AVE_{m}", _fmt(report.ave(m))])
    return paths
