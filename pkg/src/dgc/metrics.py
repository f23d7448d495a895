"""ROC curves, AUC, and the generative-vs-deterministic comparison table."""

from __future__ import annotations

import csv
import io
import logging
import statistics
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

# Mean AUC over 14 diseases, (deterministic baseline, generative) per encoder.
PAPER_REFERENCE = {
    "AlexNet": (0.7619, 0.7654),
    "ResNet50": (0.7762, 0.7772),
    "DenseNet201": (0.7794, 0.7827),
    "DenseNet121": (0.7762, 0.7771),
    "DenseNet161": (0.7847, 0.7876),
    "VGGNet16": (0.7875, 0.7877),
}


class SingleClassError(ValueError):
    """A label has no positives or no negatives, so its ROC is undefined."""


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    # integer counts behind fpr/tpr; kept so the area can be computed exactly
    fp: np.ndarray
    tp: np.ndarray
    n_pos: int
    n_neg: int


def roc_curve(scores, labels) -> RocCurve:
    """ROC points at each distinct score, highest first, starting at (0, 0).

    Tied scores form one threshold, so a tie between classes gives one
    diagonal step.  ``thresholds[0]`` is +inf.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0 or 1")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError(f"need both classes, got {n_pos} positive / {n_neg} negative")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last_of_run = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.r_[0, np.cumsum(y)[last_of_run]].astype(np.int64)
    fp = np.r_[0, (last_of_run + 1) - tp[1:]].astype(np.int64)
    return RocCurve(
        fpr=fp / n_neg,
        tpr=tp / n_pos,
        thresholds=np.r_[np.inf, s[last_of_run]],
        fp=fp,
        tp=tp,
        n_pos=n_pos,
        n_neg=n_neg,
    )


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the curve.

    Summed on integer counts then divided once, which makes it equal to the
    Mann-Whitney statistic with half credit for ties.
    """
    doubled = int(np.sum(np.diff(curve.fp) * (curve.tp[1:] + curve.tp[:-1])))
    return doubled / (2 * curve.n_pos * curve.n_neg)


def auc_from_points(fpr: Sequence[float], tpr: Sequence[float]) -> float:
    return float(np.trapezoid(tpr, fpr))


def pairwise_auc(scores, labels) -> float:
    """Brute-force Mann-Whitney count; O(n_pos * n_neg)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    pos, neg = s[y == 1], s[y == 0]
    wins = ties = 0
    for a in pos:
        for b in neg:
            if a > b:
                wins += 1
            elif a == b:
                ties += 1
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


@dataclass
class RocReport:
    label_names: tuple[str, ...]
    curves: dict[str, RocCurve] = field(default_factory=dict)
    aucs: dict[str, float] = field(default_factory=dict)
    n_pos: dict[str, int] = field(default_factory=dict)
    n_neg: dict[str, int] = field(default_factory=dict)
    excluded: list[str] = field(default_factory=list)

    @property
    def mean_auc(self) -> float:
        vals = [self.aucs[n] for n in self.label_names if n in self.aucs]
        return float(np.mean(vals)) if vals else float("nan")


def roc_report(scores: np.ndarray, targets: np.ndarray, label_names: Sequence[str]) -> RocReport:
    """Per-label ROC/AUC over an n x C score matrix; single-class labels are excluded."""
    scores = np.asarray(scores)
    targets = np.asarray(targets)
    if scores.shape != targets.shape or scores.shape[1] != len(label_names):
        raise ValueError(f"scores {scores.shape}, targets {targets.shape}, {len(label_names)} labels")
    report = RocReport(tuple(label_names))
    for j, name in enumerate(label_names):
        y = targets[:, j]
        report.n_pos[name] = int(y.sum())
        report.n_neg[name] = int(y.size - y.sum())
        try:
            curve = roc_curve(scores[:, j], y)
        except SingleClassError:
            logger.warning("label %s has a single class in this split; excluded from mean AUC", name)
            report.excluded.append(name)
            continue
        report.curves[name] = curve
        report.aucs[name] = auc(curve)
    return report


# ------------------------------------------------------------------- output


def _comment_lines(header: Mapping[str, object] | None) -> str:
    if not header:
        return ""
    return "".join(f"# {k}={header[k]}\n" for k in sorted(header))


def _num(x: float) -> str:
    return repr(float(x))


def roc_csv(report: RocReport, header: Mapping[str, object] | None = None) -> str:
    buf = io.StringIO()
    buf.write(_comment_lines(header))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "fpr", "tpr", "threshold"])
    for name in report.label_names:
        c = report.curves.get(name)
        if c is None:
            continue
        for f, t, th in zip(c.fpr, c.tpr, c.thresholds):
            w.writerow([name, _num(f), _num(t), _num(th)])
    return buf.getvalue()


def auc_csv(reports: Mapping[str, RocReport], header: Mapping[str, object] | None = None) -> str:
    """Rows ``run,label,auc,n_pos,n_neg``; each run closes with a ``mean_auc`` row."""
    buf = io.StringIO()
    buf.write(_comment_lines(header))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "label", "auc", "n_pos", "n_neg"])
    for run, rep in reports.items():
        for name in rep.label_names:
            a = rep.aucs.get(name)
            w.writerow([run, name, "" if a is None else _num(a), rep.n_pos.get(name, 0), rep.n_neg.get(name, 0)])
        w.writerow([run, "mean_auc", _num(rep.mean_auc), "", ""])
    return buf.getvalue()


@dataclass
class ComparisonRow:
    run: str
    label: str
    auc_mean: float
    auc_std: float
    delta: float
    n_repeats: int


@dataclass
class Comparison:
    runs: list[str]
    reference: str
    rows: list[ComparisonRow]

    def mean_row(self, run: str) -> ComparisonRow:
        return next(r for r in self.rows if r.run == run and r.label == "mean_auc")

    def to_csv(self, header: Mapping[str, object] | None = None) -> str:
        buf = io.StringIO()
        buf.write(_comment_lines(header))
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["run", "label", "auc_mean", "auc_std", "delta", "n_repeats"])
        for r in self.rows:
            w.writerow([r.run, r.label, _num(r.auc_mean), _num(r.auc_std), _num(r.delta), r.n_repeats])
        return buf.getvalue()

    def to_text(self, paper_reference: bool = True) -> str:
        labels = list(dict.fromkeys(r.label for r in self.rows))
        by = {(r.run, r.label): r for r in self.rows}
        others = [r for r in self.runs if r != self.reference]
        width = max(len(x) for x in labels + ["label"]) + 2
        cols = []
        for run in self.runs:
            cols.append(f"{run:>24}")
        head = f"{'label':<{width}}" + "".join(cols) + "".join(f"{'delta ' + r:>24}" for r in others)
        lines = [head, "-" * len(head)]
        for lab in labels:
            cells = []
            for run in self.runs:
                r = by[(run, lab)]
                cells.append(f"{r.auc_mean:>15.4f} ± {r.auc_std:<6.4f}")
            deltas = [f"{by[(run, lab)].delta:>+24.4f}" for run in others]
            lines.append(f"{lab:<{width}}" + "".join(cells) + "".join(deltas))
        if paper_reference:
            lines.append("")
            lines.append("reference deltas (generative - deterministic, mean AUC on ChestX-ray14):")
            for enc, (base, gen) in PAPER_REFERENCE.items():
                lines.append(f"  {enc:<12} {base:.4f} -> {gen:.4f}  ({gen - base:+.4f})")
        return "\n".join(lines) + "\n"


def compare_report(
    reports: Mapping[str, RocReport | Sequence[RocReport]],
    reference: str | None = None,
) -> Comparison:
    """Mean/stddev AUC per run and label across repeats, with deltas against ``reference``.

    Runs are ordered by name so the table does not depend on mapping order;
    ``reference`` defaults to the first of them.
    """
    runs = sorted(reports)
    if not runs:
        raise ValueError("nothing to compare")
    grouped = {r: ([reports[r]] if isinstance(reports[r], RocReport) else list(reports[r])) for r in runs}
    label_names = grouped[runs[0]][0].label_names
    for r in runs:
        for rep in grouped[r]:
            if tuple(rep.label_names) != tuple(label_names):
                raise ValueError(f"run {r!r} has labels {rep.label_names}, expected {label_names}")
    reference = runs[0] if reference is None else reference
    if reference not in grouped:
        raise KeyError(f"reference run {reference!r} not among {runs}")

    def stats(run, label):
        vals = [rep.mean_auc if label == "mean_auc" else rep.aucs.get(label, float("nan")) for rep in grouped[run]]
        mean = float(np.mean(vals))
        std = statistics.stdev(vals) if len(vals) > 1 else 0.0
        return mean, std, len(vals)

    rows = []
    for run in runs:
        for label in (*label_names, "mean_auc"):
            mean, std, n = stats(run, label)
            ref_mean = stats(reference, label)[0]
            rows.append(ComparisonRow(run, label, mean, std, mean - ref_mean, n))
    return Comparison(runs, reference, rows)
