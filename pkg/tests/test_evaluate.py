import numpy as np
import pytest

from lungood.evaluate import auroc, choose_threshold, metrics_report, threshold_metrics
from lungood.scoring import PatientRecord


def records_from(labels, scores):
    out = []
    for i, (lab, s) in enumerate(zip(labels, scores)):
        rec = PatientRecord(f"p{i}", int(lab), np.array([float(s)]))
        rec.aggregate = float(s)
        out.append(rec)
    return out


def brute_force_auroc(labels, scores):
    wins = 0.0
    pairs = 0
    for li, si in zip(labels, scores):
        if li != 1:
            continue
        for lj, sj in zip(labels, scores):
            if lj != 0:
                continue
            pairs += 1
            if si > sj:
                wins += 1.0
            elif si == sj:
                wins += 0.5
    return wins / pairs


def test_auroc_four_point_oracle():
    labels = [0, 0, 1, 1]
    scores = [0.1, 0.4, 0.35, 0.8]
    recs = records_from(labels, scores)
    assert auroc(recs) == brute_force_auroc(labels, scores) == 0.75


def test_auroc_perfect_separation():
    recs = records_from([0, 0, 1, 1], [1.0, 2.0, 3.0, 4.0])
    assert auroc(recs) == 1.0


def test_auroc_all_ties():
    recs = records_from([0, 1, 0, 1], [2.0, 2.0, 2.0, 2.0])
    assert auroc(recs) == 0.5


def test_auroc_matches_brute_force_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = rng.integers(0, 8, size=n).astype(float)  # coarse grid forces ties
        recs = records_from(labels, scores)
        assert auroc(recs) == brute_force_auroc(labels, scores)


def test_auroc_invariant_under_increasing_transform():
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 2, size=50)
    labels[0], labels[1] = 0, 1
    scores = rng.normal(size=50)
    base = auroc(records_from(labels, scores))
    assert auroc(records_from(labels, np.exp(scores))) == base
    assert auroc(records_from(labels, 3.0 * scores + 7.0)) == base


def test_auroc_label_flip_symmetry_without_ties():
    rng = np.random.default_rng(2)
    labels = rng.integers(0, 2, size=40)
    labels[0], labels[1] = 0, 1
    scores = rng.permutation(np.arange(40, dtype=float))  # distinct scores
    assert auroc(records_from(1 - labels, scores)) == pytest.approx(
        1.0 - auroc(records_from(labels, scores)), abs=1e-15
    )


def test_auroc_single_class_errors():
    with pytest.raises(ValueError, match="both classes"):
        auroc(records_from([1, 1], [0.1, 0.2]))


def test_threshold_metrics_confusion_arithmetic():
    # 2 TP, 1 FP, 1 FN, 6 TN at threshold 10
    labels = [1, 1, 0, 1] + [0] * 6
    scores = [11, 12, 11, 9] + [1] * 6
    acc, prec, rec = threshold_metrics(records_from(labels, scores), 10.0)
    assert acc == pytest.approx(0.8)
    assert prec == pytest.approx(2 / 3)
    assert rec == pytest.approx(2 / 3)


def test_threshold_below_everything_gives_full_recall():
    recs = records_from([0, 1, 1], [1.0, 2.0, 3.0])
    acc, prec, rec = threshold_metrics(recs, 0.0)
    assert rec == 1.0


def test_threshold_above_everything_precision_undefined():
    recs = records_from([0, 1], [1.0, 2.0])
    with pytest.raises(ValueError, match="precision"):
        threshold_metrics(recs, 5.0)


def sweep_oracle(labels, scores):
    best_j, best_t = -np.inf, None
    for t in sorted(set(scores)):
        tp = sum(1 for l, s in zip(labels, scores) if l == 1 and s >= t)
        fp = sum(1 for l, s in zip(labels, scores) if l == 0 and s >= t)
        n1 = sum(labels)
        n0 = len(labels) - n1
        j = tp / n1 - fp / n0
        if j > best_j:
            best_j, best_t = j, t
    return best_t


def test_choose_threshold_separated_classes():
    labels = [0, 0, 1, 1]
    scores = [1.0, 2.0, 5.0, 6.0]
    assert choose_threshold(records_from(labels, scores)) == 5.0  # smallest diseased score


def test_choose_threshold_all_equal():
    recs = records_from([0, 1], [3.0, 3.0])
    assert choose_threshold(recs) == 3.0


def test_choose_threshold_matches_sweep_oracle():
    labels = [0, 0, 1, 1]
    scores = [0.1, 0.4, 0.35, 0.8]
    t = choose_threshold(records_from(labels, scores))
    assert t == sweep_oracle(labels, scores) == 0.35
    assert t != 0.8  # the max-score cut is not optimal here

    rng = np.random.default_rng(3)
    for _ in range(50):
        n = int(rng.integers(4, 60))
        labels = rng.integers(0, 2, size=n).tolist()
        if max(labels) == min(labels):
            labels[0] = 1 - labels[0]
        scores = rng.integers(0, 10, size=n).astype(float).tolist()
        assert choose_threshold(records_from(labels, scores)) == sweep_oracle(labels, scores)


def test_metrics_report_contents(tmp_path):
    recs = records_from([0, 0, 1, 1], [1.0, 2.0, 5.0, 6.0])
    report = metrics_report(recs, strategy="mean", model="gmm-k4", n_params=10)
    assert report["auroc"] == 1.0
    assert report["acc"] == 1.0
    assert report["threshold"] == 5.0
    assert report["n"] == 4
    assert report["n_params"] == 10
