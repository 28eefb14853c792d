import sys
from pathlib import Path

import numpy as np
import orjson
import pytest

# Add project root to sys.path
project_root = str(Path(__file__).parent.parent)
sys.path.insert(0, project_root)

from src.guard.domain import ConfusionMatrix, CrossValidationReport, FoldResult
from src.guard.errors import (
    EmptyClass,
    EmptyScores,
    LengthMismatch,
    OutOfRange,
    SingleClass,
    TooFewSamples,
)
from src.guard.evaluation import (
    aggregate,
    confusion_matrix,
    default_grid,
    error_analysis,
    evaluate_scores,
    format_confusion_matrix,
    format_cv_table,
    format_metrics_table,
    format_sweep_table,
    metrics_from_cm,
    roc_auc,
    select_threshold,
    stratified_kfold,
    stratified_split,
    threshold_sweep,
    write_records,
)
from utils.synthetic import corpus_label_vector


def _held_out_scores():
    """947 scores whose tally at 0.2 is tn=646, fp=1, fn=7, tp=293"""
    safe = [0.05] * 646 + [0.45]
    malicious = [0.12] * 7 + [0.93] * 293
    return np.array(safe + malicious), np.array([0] * 647 + [1] * 300)


def _random_set(rng, n):
    labels = rng.integers(0, 2, size=n)
    labels[0], labels[1] = 0, 1
    # one decimal place so ties are common
    scores = np.round(rng.uniform(0.0, 1.0, size=n), 1)
    return scores, labels


def test_confusion_matrix_examples():
    cm = confusion_matrix([0.1, 0.9], [0, 1], 0.5)
    assert cm == ConfusionMatrix(tn=1, fp=0, fn=0, tp=1)
    cm = confusion_matrix(np.ones(12), np.zeros(12), 0.3)
    assert cm == ConfusionMatrix(tn=0, fp=12, fn=0, tp=0)
    # scores equal to the threshold are malicious
    assert confusion_matrix([0.2], [1], 0.2).tp == 1


def test_confusion_matrix_held_out_counts():
    scores, labels = _held_out_scores()
    assert confusion_matrix(scores, labels, 0.2) == ConfusionMatrix(tn=646, fp=1, fn=7, tp=293)


def test_confusion_matrix_errors():
    with pytest.raises(LengthMismatch):
        confusion_matrix([0.1, 0.2], [0], 0.5)
    with pytest.raises(EmptyScores):
        confusion_matrix([], [], 0.5)
    with pytest.raises(OutOfRange):
        confusion_matrix([0.1], [0], 1.0)


def test_metrics_from_held_out_matrix():
    report = metrics_from_cm(ConfusionMatrix(tn=646, fp=1, fn=7, tp=293), threshold=0.2)
    assert report.accuracy == pytest.approx(0.9916, abs=5e-4)
    assert report.precision == pytest.approx(0.9966, abs=5e-4)
    assert report.recall == pytest.approx(0.9767, abs=5e-4)
    assert report.f1 == pytest.approx(0.9865, abs=5e-4)
    assert report.fnr == pytest.approx(0.0233, abs=5e-4)
    assert report.fpr == pytest.approx(0.0015, abs=5e-4)
    assert report.threshold == 0.2
    assert report.degenerate == []


def test_metrics_relations():
    report = metrics_from_cm(ConfusionMatrix(tn=40, fp=9, fn=13, tp=38))
    assert report.f1 == pytest.approx(2 * report.precision * report.recall / (report.precision + report.recall))
    assert report.fnr == pytest.approx(1 - report.recall)
    assert report.fpr == pytest.approx(9 / 49)


def test_metrics_perfect_matrix():
    report = metrics_from_cm(ConfusionMatrix(tn=5, fp=0, fn=0, tp=5))
    assert report.accuracy == report.precision == report.recall == report.f1 == 1.0
    assert report.fnr == report.fpr == 0.0


def test_metrics_degenerate_defaults():
    report = metrics_from_cm(ConfusionMatrix(tn=10, fp=0, fn=3, tp=0))
    assert report.precision == 0.0
    assert report.f1 == 0.0
    assert "precision" in report.degenerate and "f1" in report.degenerate
    with pytest.raises(EmptyScores):
        metrics_from_cm(ConfusionMatrix(tn=0, fp=0, fn=0, tp=0))


def test_roc_auc_examples():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)
    assert roc_auc([0.5] * 6, [0, 1, 0, 1, 0, 1]) == 0.5
    with pytest.raises(SingleClass):
        roc_auc([0.1, 0.2], [1, 1])


def test_roc_auc_matches_pairwise_oracle():
    rng = np.random.default_rng(17)
    for _ in range(200):
        scores, labels = _random_set(rng, int(rng.integers(2, 101)))
        pos = scores[labels == 1]
        neg = scores[labels == 0]
        wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
        assert roc_auc(scores, labels) == pytest.approx(wins / (len(pos) * len(neg)), abs=1e-12)


def test_evaluate_scores_fills_roc_auc():
    scores, labels = _held_out_scores()
    report = evaluate_scores(scores, labels, 0.2)
    assert 0.97 < report.roc_auc <= 1.0
    single = evaluate_scores([0.1, 0.7], [0, 0], 0.5)
    assert single.roc_auc is None
    assert "roc_auc" in single.degenerate


def test_default_grid():
    grid = default_grid()
    assert len(grid) == 19
    assert grid[0] == 0.05 and grid[-1] == 0.95
    assert 0.2 in grid and 0.35 in grid


def test_sweep_singleton_matches_direct_evaluation():
    scores, labels = _held_out_scores()
    (row,) = threshold_sweep(scores, labels, [0.1])
    direct = metrics_from_cm(confusion_matrix(scores, labels, 0.1))
    assert (row.tau, row.f1, row.precision, row.recall, row.fnr, row.fpr) == (
        0.1, direct.f1, direct.precision, direct.recall, direct.fnr, direct.fpr)


def test_sweep_rows_are_ascending():
    scores, labels = _held_out_scores()
    rows = threshold_sweep(scores, labels, [0.9, 0.1, 0.5])
    assert [r.tau for r in rows] == [0.1, 0.5, 0.9]
    with pytest.raises(OutOfRange):
        threshold_sweep(scores, labels, [])


def test_sweep_recall_and_fpr_are_monotone():
    rng = np.random.default_rng(3)
    for _ in range(100):
        scores, labels = _random_set(rng, 60)
        rows = threshold_sweep(scores, labels)
        recalls = [r.recall for r in rows]
        fprs = [r.fpr for r in rows]
        assert all(a >= b for a, b in zip(recalls, recalls[1:]))
        assert all(a >= b for a, b in zip(fprs, fprs[1:]))


def test_sweep_strict_threshold_row():
    # one safe sample sits between 0.2 and 0.7
    safe = [0.05] * 646 + [0.45]
    malicious = [0.3] * 17 + [0.95] * 283
    rows = {r.tau: r for r in threshold_sweep(safe + malicious, [0] * 647 + [1] * 300)}
    assert rows[0.7].precision == 1.0
    assert rows[0.7].fpr == 0.0
    assert rows[0.2].fpr > 0.0


def test_select_threshold_examples():
    assert select_threshold([0.1, 0.3, 0.6, 0.9], [0, 0, 1, 1]) == 0.35
    assert select_threshold([0.1, 0.2, 0.99], [0, 0, 1]) == 0.25
    with pytest.raises(SingleClass):
        select_threshold([0.1, 0.2], [0, 0])


def test_select_threshold_matches_exhaustive_search():
    rng = np.random.default_rng(29)
    grid = default_grid()
    for _ in range(200):
        scores, labels = _random_set(rng, int(rng.integers(2, 80)))
        f1s = []
        for tau in grid:
            predicted = scores >= tau
            tp = np.sum(predicted & (labels == 1))
            fp = np.sum(predicted & (labels == 0))
            fn = np.sum(~predicted & (labels == 1))
            f1s.append(2 * tp / (2 * tp + fp + fn))
        chosen = select_threshold(scores, labels, grid)
        assert chosen in grid
        assert chosen == grid[int(np.argmax(f1s))]


def test_error_analysis_orders_by_confidence():
    scores = [0.9, 0.05, 0.15, 0.6, 0.3]
    labels = [1, 1, 1, 0, 0]
    fn_idx, fp_idx = error_analysis(scores, labels, 0.2)
    assert list(fn_idx) == [1, 2]
    assert list(fp_idx) == [3, 4]


def test_stratified_split_table_counts():
    labels = corpus_label_vector()
    train, val, test = stratified_split(labels, (0.70, 0.15, 0.15), seed=0)
    assert (len(train), len(val), len(test)) == (4416, 947, 947)
    for split, safe, malicious in ((train, 3016, 1400), (val, 647, 300), (test, 647, 300)):
        assert np.count_nonzero(labels[split] == 0) == safe
        assert np.count_nonzero(labels[split] == 1) == malicious
    everything = np.concatenate([train, val, test])
    assert np.array_equal(np.sort(everything), np.arange(len(labels)))


def test_stratified_split_degenerate_and_deterministic():
    labels = np.array([0] * 30 + [1] * 12)
    train, val, test = stratified_split(labels, (1.0, 0.0, 0.0), seed=4)
    assert len(train) == 42 and len(val) == 0 and len(test) == 0
    first = stratified_split(labels, (0.6, 0.2, 0.2), seed=4)
    second = stratified_split(labels, (0.6, 0.2, 0.2), seed=4)
    assert all(np.array_equal(a, b) for a, b in zip(first, second))
    other = stratified_split(labels, (0.6, 0.2, 0.2), seed=5)
    assert not all(np.array_equal(a, b) for a, b in zip(first, other))


def test_stratified_split_errors():
    with pytest.raises(EmptyClass):
        stratified_split(np.zeros(10, dtype=int), (0.7, 0.15, 0.15))
    with pytest.raises(OutOfRange):
        stratified_split(np.array([0, 1] * 5), (0.7, 0.2, 0.2))


def test_kfold_exact_division():
    labels = np.array([0, 1] * 5)
    folds = stratified_kfold(labels, k=5, seed=0)
    for fold in folds:
        assert sorted(labels[fold].tolist()) == [0, 1]


def test_kfold_train_plus_validation_sizes():
    labels = np.array([0] * 3663 + [1] * 1700)
    folds = stratified_kfold(labels, k=5, seed=0)
    assert sorted((len(f) for f in folds), reverse=True) == [1073, 1073, 1073, 1072, 1072]
    everything = np.concatenate(folds)
    assert len(everything) == 5363
    assert np.array_equal(np.sort(everything), np.arange(5363))
    for fold in folds:
        assert abs(np.count_nonzero(labels[fold] == 0) - 3663 / 5) < 1
        assert abs(np.count_nonzero(labels[fold] == 1) - 1700 / 5) < 1


def test_kfold_too_few_samples():
    with pytest.raises(TooFewSamples):
        stratified_kfold(np.array([0] * 10 + [1] * 3), k=5)
    with pytest.raises(TooFewSamples):
        stratified_kfold(np.array([0, 1] * 10), k=1)


def test_aggregate():
    summary = aggregate([0.98, 0.99, 1.00, 0.99, 0.98])
    assert summary.mean == pytest.approx(0.988)
    assert summary.std == pytest.approx(0.00837, abs=1e-5)
    assert (summary.min, summary.max) == (0.98, 1.00)
    assert aggregate([0.5]).std == 0.0


def test_format_tables():
    cm = ConfusionMatrix(tn=646, fp=1, fn=7, tp=293)
    matrix = format_confusion_matrix(cm)
    assert "Actual Malicious" in matrix and "293" in matrix

    report = metrics_from_cm(cm, threshold=0.2)
    table = format_metrics_table(report)
    assert "Metrics at threshold 0.2" in table
    assert "99.16%" in table
    assert "2.33%" in table
    assert "n/a" in table

    sweep = format_sweep_table(threshold_sweep(*_held_out_scores()))
    assert len(sweep.splitlines()) == 2 + 19

    folds = [FoldResult(i, 80, 20, 0.98 + 0.005 * i, 0.99, 0.97, 0.995, 100) for i in range(3)]
    cv = CrossValidationReport(folds=folds, summary={
        key: aggregate([getattr(f, key) for f in folds]) for key in ("f1", "precision", "recall", "roc_auc")})
    assert "ROC-AUC" in format_cv_table(cv)


def test_write_records(tmp_path):
    path = tmp_path / "sweep.jsonl"
    rows = threshold_sweep(*_held_out_scores(), grid=[0.2, 0.5])
    write_records(rows, path)
    lines = path.read_bytes().splitlines()
    assert len(lines) == 2
    first = orjson.loads(lines[0])
    assert first["tau"] == 0.2
    assert set(first) == {"tau", "f1", "precision", "recall", "fnr", "fpr"}
