"""Per-patch anomaly scores and patient-level aggregation.

A patch's anomaly score is the negative log-likelihood of its embedding
under the density model fit on normal data. Patient-level aggregation over
the patch scores supports mean, median, upper quartile, tail percentiles,
max, and tail sums; mean aggregation equals the negative log of the
geometric mean of the patch densities.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np


class Aggregation(str, Enum):
    MEAN = "mean"
    MEDIAN = "median"
    Q3 = "q3"
    P95 = "p95"
    P99 = "p99"
    MAX = "max"
    SUM95 = "sum95"
    SUM99 = "sum99"


_PERCENTILE = {Aggregation.MEDIAN: 50.0, Aggregation.Q3: 75.0, Aggregation.P95: 95.0, Aggregation.P99: 99.0}
_TAIL_SUM = {Aggregation.SUM95: 95.0, Aggregation.SUM99: 99.0}


@dataclass
class PatientRecord:
    patient_id: str
    label: int  # 1 = diseased
    patch_scores: np.ndarray
    aggregate: float | None = None

    def __post_init__(self):
        self.patch_scores = np.asarray(self.patch_scores, dtype=np.float64)
        if self.patch_scores.size < 1:
            raise ValueError("a patient needs at least one patch score")
        if not np.all(np.isfinite(self.patch_scores)):
            raise ValueError("patch scores must be finite")
        if self.label not in (0, 1):
            raise ValueError("label must be 0 or 1")


def anomaly_score(model, z: np.ndarray) -> float | np.ndarray:
    """Negative log-density of one embedding (or rows of embeddings)."""
    out = model.log_density(z)
    return -out if isinstance(out, np.ndarray) else -float(out)


def aggregate(scores, strategy: Aggregation) -> float:
    """Collapse one patient's patch scores to a single number.

    Percentiles use linear interpolation between closest ranks (index
    ``q * (B - 1)``); sum95/sum99 add up every score at or above that
    patient's own 95th/99th percentile. All strategies ignore score order.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("cannot aggregate an empty score list")
    s = np.sort(s)  # makes every strategy bitwise order-invariant
    strategy = Aggregation(strategy)
    if strategy is Aggregation.MEAN:
        return float(s.mean())
    if strategy is Aggregation.MAX:
        return float(s.max())
    if strategy in _PERCENTILE:
        return float(np.percentile(s, _PERCENTILE[strategy], method="linear"))
    q = _TAIL_SUM[strategy]
    cut = np.percentile(s, q, method="linear")
    return float(s[s >= cut].sum())


def score_patient(
    model,
    patient_id: str,
    embeddings: np.ndarray,
    label: int,
    strategy: Aggregation = Aggregation.MEAN,
) -> PatientRecord:
    """Score every patch of one patient and aggregate."""
    Z = np.asarray(embeddings, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] < 1:
        raise ValueError("embeddings must be a non-empty (n, d) matrix")
    scores = np.asarray(anomaly_score(model, Z), dtype=np.float64)
    rec = PatientRecord(patient_id=patient_id, label=label, patch_scores=scores)
    rec.aggregate = aggregate(scores, strategy)
    return rec


SCORES_CSV_COLUMNS = ["patient_id", "label", "strategy", "aggregate", "B"]


def write_scores_csv(records: list[PatientRecord], strategy: Aggregation, path: str | Path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SCORES_CSV_COLUMNS)
        for rec in records:
            writer.writerow(
                [
                    rec.patient_id,
                    rec.label,
                    Aggregation(strategy).value,
                    repr(float(rec.aggregate)),
                    rec.patch_scores.size,
                ]
            )


def read_scores_csv(path: str | Path) -> tuple[list[PatientRecord], str]:
    """Read a scored cohort; patch scores are not stored in the CSV, so each
    record carries its aggregate as a single pseudo-score."""
    records = []
    strategies = set()
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SCORES_CSV_COLUMNS:
            raise ValueError(f"{path}: bad scores header {reader.fieldnames}")
        for row in reader:
            agg = float(row["aggregate"])
            rec = PatientRecord(
                patient_id=row["patient_id"],
                label=int(row["label"]),
                patch_scores=np.array([agg]),
            )
            rec.aggregate = agg
            records.append(rec)
            strategies.add(row["strategy"])
    if len(strategies) > 1:
        raise ValueError(f"{path}: mixed strategies {sorted(strategies)}")
    return records, (strategies.pop() if strategies else "")
