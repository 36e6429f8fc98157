"""Patient-level evaluation: AUROC and thresholded confusion-matrix metrics."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .scoring import PatientRecord


def _labels_scores(records: list[PatientRecord]) -> tuple[np.ndarray, np.ndarray]:
    if not records or any(r.aggregate is None for r in records):
        raise ValueError("records must be aggregated before evaluation")
    labels = np.array([r.label for r in records], dtype=np.int64)
    scores = np.array([float(r.aggregate) for r in records], dtype=np.float64)
    if labels.min() == labels.max():
        raise ValueError("evaluation needs both classes present")
    return labels, scores


def _midranks(scores: np.ndarray) -> np.ndarray:
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(records: list[PatientRecord]) -> float:
    """Probability that a random diseased aggregate outranks a random healthy
    one, ties counting one half; rank-based and exact."""
    labels, scores = _labels_scores(records)
    n1 = int(labels.sum())
    n0 = len(labels) - n1
    ranks = _midranks(scores)
    u = ranks[labels == 1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n0 * n1))


def threshold_metrics(records: list[PatientRecord], threshold: float) -> tuple[float, float, float]:
    """(accuracy, precision, recall) when predicting diseased at
    ``aggregate >= threshold``; raises if nothing is predicted positive."""
    labels, scores = _labels_scores(records)
    pred = scores >= threshold
    tp = int(np.count_nonzero(pred & (labels == 1)))
    fp = int(np.count_nonzero(pred & (labels == 0)))
    fn = int(np.count_nonzero(~pred & (labels == 1)))
    tn = int(np.count_nonzero(~pred & (labels == 0)))
    if tp + fp == 0:
        raise ValueError("zero positive predictions, precision undefined")
    accuracy = (tp + tn) / len(labels)
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return accuracy, precision, recall


def choose_threshold(records: list[PatientRecord]) -> float:
    """Validation threshold maximizing Youden's J (TPR - FPR); candidates are
    the observed aggregates and ties resolve to the lowest threshold."""
    labels, scores = _labels_scores(records)
    n1 = int(labels.sum())
    n0 = len(labels) - n1
    best_t = None
    best_j = -np.inf
    for t in np.unique(scores):
        pred = scores >= t
        tpr = np.count_nonzero(pred & (labels == 1)) / n1
        fpr = np.count_nonzero(pred & (labels == 0)) / n0
        j = tpr - fpr
        if j > best_j:
            best_j = j
            best_t = t
    return float(best_t)


def metrics_report(
    records: list[PatientRecord],
    strategy: str,
    model: str = "",
    threshold: float | None = None,
    n_params: int | None = None,
) -> dict:
    """Evaluation summary; when no threshold is supplied one is chosen on
    these records by Youden's J."""
    t = choose_threshold(records) if threshold is None else float(threshold)
    accuracy, precision, recall = threshold_metrics(records, t)
    report = {
        "model": model,
        "strategy": strategy,
        "auroc": auroc(records),
        "acc": accuracy,
        "precision": precision,
        "recall": recall,
        "threshold": t,
        "n": len(records),
    }
    if n_params is not None:
        report["n_params"] = int(n_params)
    return report


def write_report(report: dict, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_report(path: str | Path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
