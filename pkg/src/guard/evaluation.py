"""
Evaluation lab: confusion matrices, derived metrics, ROC-AUC, threshold sweeps
and selection, stratified splitting and k-fold partitioning, plus the plain-text
and line-delimited renderings of those results.
"""

import math
from dataclasses import asdict, is_dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import orjson
from scipy.stats import rankdata

from src.guard.domain import (
    ConfusionMatrix,
    CrossValidationReport,
    FoldSummary,
    Label,
    MetricsReport,
    SweepRow,
)
from src.guard.errors import (
    EmptyClass,
    EmptyScores,
    LengthMismatch,
    OutOfRange,
    SingleClass,
    TooFewSamples,
)
from utils.splitmix import SplitMix64


def _as_arrays(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(scores) != len(labels):
        raise LengthMismatch(f"{len(scores)} scores but {len(labels)} labels")
    if len(scores) == 0:
        raise EmptyScores("no samples to evaluate")
    return scores, labels


def _check_tau(tau: float) -> None:
    if not 0.0 < tau < 1.0:
        raise OutOfRange(f"threshold must lie in (0, 1), got {tau}")


def confusion_matrix(scores, labels, tau: float) -> ConfusionMatrix:
    """Tally predictions (malicious iff score >= tau) against labels"""
    scores, labels = _as_arrays(scores, labels)
    _check_tau(tau)
    predicted = scores >= tau
    actual = labels == Label.MALICIOUS
    return ConfusionMatrix(
        tn=int(np.count_nonzero(~predicted & ~actual)),
        fp=int(np.count_nonzero(predicted & ~actual)),
        fn=int(np.count_nonzero(~predicted & actual)),
        tp=int(np.count_nonzero(predicted & actual)),
    )


def _ratio(numerator: int, denominator: int, name: str, degenerate: List[str]) -> float:
    if denominator == 0:
        degenerate.append(name)
        return 0.0
    return numerator / denominator


def metrics_from_cm(cm: ConfusionMatrix, threshold: Optional[float] = None) -> MetricsReport:
    """Accuracy, precision, recall, F1, FNR and FPR of a confusion matrix

    Zero denominators give 0 and are listed in the report's degenerate field.
    """
    if cm.total == 0:
        raise EmptyScores("confusion matrix is empty")
    degenerate: List[str] = []
    precision = _ratio(cm.tp, cm.tp + cm.fp, "precision", degenerate)
    recall = _ratio(cm.tp, cm.tp + cm.fn, "recall", degenerate)
    if precision + recall > 0:
        # harmonic mean of precision and recall, from counts so equal F1 compares equal
        f1 = 2 * cm.tp / (2 * cm.tp + cm.fp + cm.fn)
    else:
        f1 = 0.0
        degenerate.append("f1")
    return MetricsReport(
        accuracy=(cm.tp + cm.tn) / cm.total,
        precision=precision,
        recall=recall,
        f1=f1,
        fnr=_ratio(cm.fn, cm.fn + cm.tp, "fnr", degenerate),
        fpr=_ratio(cm.fp, cm.fp + cm.tn, "fpr", degenerate),
        threshold=threshold,
        degenerate=degenerate,
    )


def roc_auc(scores, labels) -> float:
    """Mann-Whitney estimate P(s+ > s-) + 0.5 P(s+ = s-) from average ranks"""
    scores, labels = _as_arrays(scores, labels)
    positive = labels == Label.MALICIOUS
    n_pos = int(np.count_nonzero(positive))
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass(f"ROC-AUC needs both classes (malicious={n_pos}, safe={n_neg})")
    ranks = rankdata(scores, method="average")
    u_statistic = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_statistic / (n_pos * n_neg))


def evaluate_scores(scores, labels, tau: float) -> MetricsReport:
    """Metrics at tau plus ROC-AUC when both classes are present"""
    report = metrics_from_cm(confusion_matrix(scores, labels, tau), threshold=tau)
    try:
        report.roc_auc = roc_auc(scores, labels)
    except SingleClass:
        report.degenerate.append("roc_auc")
    return report


def default_grid() -> List[float]:
    """0.05, 0.10, ..., 0.95"""
    return [round(0.05 * i, 2) for i in range(1, 20)]


def threshold_sweep(scores, labels, grid: Optional[Sequence[float]] = None) -> List[SweepRow]:
    """One SweepRow per threshold, ascending"""
    grid = default_grid() if grid is None else list(grid)
    if not grid:
        raise OutOfRange("threshold grid is empty")
    scores, labels = _as_arrays(scores, labels)
    rows = []
    for tau in sorted(grid):
        report = metrics_from_cm(confusion_matrix(scores, labels, tau), threshold=tau)
        rows.append(SweepRow(tau=float(tau), f1=report.f1, precision=report.precision,
                             recall=report.recall, fnr=report.fnr, fpr=report.fpr))
    return rows


def select_threshold(scores, labels, grid: Optional[Sequence[float]] = None) -> float:
    """Grid threshold with maximal F1; ties go to the lowest threshold

    Raises:
        SingleClass: No malicious labels, so F1 of the positive class is undefined
    """
    _, label_array = _as_arrays(scores, labels)
    if not np.any(label_array == Label.MALICIOUS):
        raise SingleClass("threshold selection needs at least one malicious sample")
    best = None
    for row in threshold_sweep(scores, labels, grid):
        if best is None or row.f1 > best.f1:
            best = row
    return best.tau


def error_analysis(scores, labels, tau: float) -> Tuple[np.ndarray, np.ndarray]:
    """Indices of false negatives and false positives, most confident mistakes first"""
    scores, labels = _as_arrays(scores, labels)
    predicted = scores >= tau
    actual = labels == Label.MALICIOUS
    false_neg = np.flatnonzero(~predicted & actual)
    false_pos = np.flatnonzero(predicted & ~actual)

    def by_distance(indices):
        return indices[np.argsort(-np.abs(scores[indices] - tau), kind="stable")]

    return by_distance(false_neg), by_distance(false_pos)


def _round_half_up(value: Fraction) -> int:
    return math.floor(value + Fraction(1, 2))


def stratified_split(labels, ratios: Tuple[float, float, float] = (0.70, 0.15, 0.15),
                     seed: int = 0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class shuffled partition into train / validation / test index sets

    Validation and test counts per class are n_c * ratio rounded half up; train
    takes the remaining samples of the class.

    Raises:
        OutOfRange: Ratios negative or not summing to 1
        EmptyClass: A class has no samples
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise OutOfRange(f"ratios must be non-negative and sum to 1, got {ratios}")
    _, val_ratio, test_ratio = (Fraction(r).limit_denominator(10 ** 6) for r in ratios)

    rng = SplitMix64(seed)
    splits = ([], [], [])
    for label in (Label.SAFE, Label.MALICIOUS):
        members = np.flatnonzero(labels == label)
        n_c = len(members)
        if n_c == 0:
            raise EmptyClass(f"no samples with label {label.name}")
        n_val = min(_round_half_up(n_c * val_ratio), n_c)
        n_test = min(_round_half_up(n_c * test_ratio), n_c - n_val)
        n_train = n_c - n_val - n_test
        shuffled = members[rng.permutation(n_c)]
        splits[0].append(shuffled[:n_train])
        splits[1].append(shuffled[n_train:n_train + n_val])
        splits[2].append(shuffled[n_train + n_val:])
    return tuple(np.sort(np.concatenate(parts)) for parts in splits)


def stratified_kfold(labels, k: int = 5, seed: int = 0) -> List[np.ndarray]:
    """k disjoint validation folds covering every index

    Each class is shuffled and dealt so that fold counts differ from the
    proportional share by at most one; the folds that receive a class's extra
    samples rotate between classes to keep fold sizes balanced.

    Raises:
        TooFewSamples: k < 2 or some class has fewer than k samples
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if k < 2:
        raise TooFewSamples(f"need k >= 2 folds, got {k}")
    rng = SplitMix64(seed)
    folds: List[List[np.ndarray]] = [[] for _ in range(k)]
    offset = 0
    for label in (Label.SAFE, Label.MALICIOUS):
        members = np.flatnonzero(labels == label)
        n_c = len(members)
        if n_c < k:
            raise TooFewSamples(f"label {label.name} has {n_c} samples, fewer than k={k}")
        shuffled = members[rng.permutation(n_c)]
        base, extra = divmod(n_c, k)
        start = 0
        for fold in range(k):
            size = base + (1 if (fold - offset) % k < extra else 0)
            folds[fold].append(shuffled[start:start + size])
            start += size
        offset = (offset + extra) % k
    return [np.sort(np.concatenate(parts)) for parts in folds]


def aggregate(values: Sequence[float]) -> FoldSummary:
    """Mean, sample standard deviation, min and max"""
    values = np.asarray(values, dtype=np.float64)
    std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return FoldSummary(mean=float(values.mean()), std=std,
                       min=float(values.min()), max=float(values.max()))


def _pct(value: float) -> str:
    return f"{100.0 * value:.2f}%"


def format_confusion_matrix(cm: ConfusionMatrix) -> str:
    lines = [
        f"{'':<18}{'Predicted Safe':>16}{'Predicted Malicious':>22}",
        f"{'Actual Safe':<18}{cm.tn:>16}{cm.fp:>22}",
        f"{'Actual Malicious':<18}{cm.fn:>16}{cm.tp:>22}",
    ]
    return "\n".join(lines)


def format_metrics_table(report: MetricsReport) -> str:
    rows = [
        ("Accuracy", _pct(report.accuracy)),
        ("F1 Score", f"{report.f1:.4f}"),
        ("Precision", f"{report.precision:.4f}"),
        ("Recall (Sensitivity)", f"{report.recall:.4f}"),
        ("ROC-AUC", "n/a" if report.roc_auc is None else f"{report.roc_auc:.4f}"),
        ("False Negative Rate", _pct(report.fnr)),
        ("False Positive Rate", _pct(report.fpr)),
    ]
    title = "Metrics" if report.threshold is None else f"Metrics at threshold {report.threshold:g}"
    lines = [title, f"{'Metric':<22}{'Score':>10}", "-" * 32]
    lines += [f"{name:<22}{value:>10}" for name, value in rows]
    if report.degenerate:
        lines.append(f"(undefined, reported as 0: {', '.join(report.degenerate)})")
    return "\n".join(lines)


def format_sweep_table(rows: Iterable[SweepRow]) -> str:
    header = f"{'tau':>6}{'F1':>9}{'Precision':>11}{'Recall':>9}{'FNR':>9}{'FPR':>9}"
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(f"{row.tau:>6.2f}{row.f1:>9.4f}{row.precision:>11.4f}{row.recall:>9.4f}"
                     f"{_pct(row.fnr):>9}{_pct(row.fpr):>9}")
    return "\n".join(lines)


def format_cv_table(report: CrossValidationReport) -> str:
    names = {"f1": "F1", "precision": "Precision", "recall": "Recall", "roc_auc": "ROC-AUC"}
    header = f"{'Metric':<11}{'Mean':>8}{'Std':>10}{'Min':>8}{'Max':>8}"
    lines = [header, "-" * len(header)]
    for key, name in names.items():
        s = report.summary[key]
        lines.append(f"{name:<11}{s.mean:>8.4f}{'±' + format(s.std, '.4f'):>10}{s.min:>8.4f}{s.max:>8.4f}")
    return "\n".join(lines)


def write_records(records: Iterable, path: Union[str, Path]) -> None:
    """Line-delimited export of dataclasses or dicts"""
    with open(path, "wb") as f:
        for record in records:
            if is_dataclass(record):
                record = asdict(record)
            f.write(orjson.dumps(record, option=orjson.OPT_APPEND_NEWLINE | orjson.OPT_SERIALIZE_NUMPY))
