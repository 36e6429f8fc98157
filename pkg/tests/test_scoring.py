import numpy as np
import pytest

from lungood.flow import FlowConfig, flow_init
from lungood.gmm import GmmModel
from lungood.scoring import (
    Aggregation,
    PatientRecord,
    aggregate,
    anomaly_score,
    read_scores_csv,
    score_patient,
    write_scores_csv,
)

ALL_STRATEGIES = list(Aggregation)


class FixedDensityModel:
    """Stands in for a generative model with a prescribed log-density."""

    def __init__(self, value):
        self.value = value

    def log_density(self, z):
        z = np.asarray(z)
        if z.ndim == 1:
            return self.value
        return np.full(z.shape[0], self.value)


def test_anomaly_score_negates_log_density():
    assert anomaly_score(FixedDensityModel(0.0), np.zeros(2)) == 0.0
    assert anomaly_score(FixedDensityModel(-2.0), np.zeros(2)) == 2.0


def test_anomaly_score_standard_normal_mode():
    model = GmmModel(
        weights=np.array([1.0]), means=np.zeros((1, 1)), covariances=np.ones((1, 1, 1))
    )
    assert anomaly_score(model, np.zeros(1)) == pytest.approx(0.5 * np.log(2 * np.pi), abs=1e-12)


def test_aggregate_hand_values():
    scores = [1.0, 2.0, 3.0]
    assert aggregate(scores, Aggregation.MEAN) == 2.0
    assert aggregate(scores, Aggregation.MEDIAN) == 2.0
    assert aggregate(scores, Aggregation.MAX) == 3.0


def test_aggregate_percentile_linear_interpolation():
    # index rule q*(B-1): 0.95*2 = 1.9 -> 2 + 0.9*(3-2) = 2.9
    assert aggregate([1.0, 2.0, 3.0], Aggregation.P95) == pytest.approx(2.9)
    assert aggregate([1.0, 2.0, 3.0], Aggregation.Q3) == pytest.approx(2.5)
    assert aggregate([1.0, 2.0, 3.0], Aggregation.P99) == pytest.approx(2.98)


def test_aggregate_tail_sums():
    assert aggregate([1.0, 2.0, 3.0], Aggregation.SUM95) == 3.0
    # P99 of [1..5] is 4.96; only 5 survives
    assert aggregate([1.0, 2.0, 3.0, 4.0, 5.0], Aggregation.SUM99) == 5.0
    # identical scores: every one is >= the percentile
    assert aggregate([2.0, 2.0, 2.0], Aggregation.SUM95) == 6.0


def test_mean_aggregation_equals_neg_log_geometric_mean():
    # densities e^-1 and e^-3: mean score 2 = -log sqrt(e^-1 * e^-3)
    log_p = np.array([-1.0, -3.0])
    scores = -log_p
    mean_score = aggregate(scores, Aggregation.MEAN)
    neg_log_geo = -float(np.sum(log_p)) / len(log_p)
    assert mean_score == neg_log_geo == 2.0


def test_mean_geometric_identity_random_sets():
    rng = np.random.default_rng(0)
    for _ in range(100):
        log_p = rng.normal(-5.0, 2.0, size=int(rng.integers(1, 40)))
        mean_score = aggregate(-log_p, Aggregation.MEAN)
        neg_log_geo = -float(np.mean(log_p))
        assert abs(mean_score - neg_log_geo) <= 1e-12


@pytest.mark.parametrize("strategy", ALL_STRATEGIES)
def test_aggregate_permutation_invariant(strategy):
    rng = np.random.default_rng(1)
    for _ in range(20):
        scores = rng.normal(size=int(rng.integers(1, 30)))
        assert aggregate(scores, strategy) == aggregate(rng.permutation(scores), strategy)


@pytest.mark.parametrize("strategy", ALL_STRATEGIES)
def test_single_patch_collapse(strategy):
    assert aggregate([3.25], strategy) == 3.25


def test_adding_extreme_patch_monotonicity():
    rng = np.random.default_rng(2)
    for _ in range(20):
        scores = rng.normal(size=10)
        bigger = np.append(scores, scores.max() + 1.0)
        assert aggregate(bigger, Aggregation.MAX) > aggregate(scores, Aggregation.MAX)
        assert aggregate(bigger, Aggregation.P99) >= aggregate(scores, Aggregation.P99)


def test_aggregate_empty_errors():
    with pytest.raises(ValueError, match="empty"):
        aggregate([], Aggregation.MEAN)


def test_score_patient_identity_flow_prior():
    model = flow_init(2, FlowConfig(n_blocks=2, hidden=8, seed=0))
    Z = np.zeros((2, 2))
    rec = score_patient(model, "p0", Z, label=0, strategy=Aggregation.MEAN)
    assert rec.aggregate == pytest.approx(np.log(2 * np.pi), abs=1e-12)
    assert rec.patch_scores.shape == (2,)


def test_score_patient_order_invariant():
    rng = np.random.default_rng(3)
    model = GmmModel(
        weights=np.array([1.0]), means=np.zeros((1, 3)), covariances=np.eye(3)[None]
    )
    Z = rng.normal(size=(7, 3))
    a = score_patient(model, "p", Z, 1, Aggregation.P95)
    b = score_patient(model, "p", Z[::-1], 1, Aggregation.P95)
    assert a.aggregate == b.aggregate


def test_patient_record_validation():
    with pytest.raises(ValueError, match="at least one"):
        PatientRecord("p", 0, np.array([]))
    with pytest.raises(ValueError, match="finite"):
        PatientRecord("p", 0, np.array([np.inf]))
    with pytest.raises(ValueError, match="label"):
        PatientRecord("p", 2, np.array([1.0]))


def test_scores_csv_round_trip(tmp_path):
    records = [
        PatientRecord("h0", 0, np.array([1.0, 2.0])),
        PatientRecord("d0", 1, np.array([5.0, 7.0, 9.0])),
    ]
    for rec in records:
        rec.aggregate = aggregate(rec.patch_scores, Aggregation.MEAN)
    path = tmp_path / "scores.csv"
    write_scores_csv(records, Aggregation.MEAN, path)
    back, strategy = read_scores_csv(path)
    assert strategy == "mean"
    assert [r.patient_id for r in back] == ["h0", "d0"]
    assert [r.label for r in back] == [0, 1]
    assert back[0].aggregate == 1.5
    assert back[1].aggregate == 7.0
