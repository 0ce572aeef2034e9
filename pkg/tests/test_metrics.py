"""Tests for ranking metrics, identification rates, calibration and cascade gating."""

import numpy as np
import pytest

from core.errors import OracleUnavailableError, UndefinedMetricError, UsageError
from core.models import ClassifierModel, ModelBundle
from evaluation.cascade import CascadePredictor
from evaluation.metrics import (
    average_precision,
    calibration_error,
    evaluate_scores,
    f1_max_threshold,
    identification_rates,
    oracle_criticality,
    pr_curve,
    roc_auc,
    roc_points,
    split_hash,
)
from stages.reward_filter import FilterModel


def _brute_force_auc(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def _brute_force_pr(scores, labels) -> list[tuple[float, float]]:
    n_pos = sum(labels)
    points = []
    for t in sorted(set(scores), reverse=True):
        predicted = [y for s, y in zip(scores, labels) if s >= t]
        tp = sum(predicted)
        points.append((tp / n_pos, tp / len(predicted)))
    return points


def test_auc_examples():
    assert roc_auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    assert roc_auc([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0]) == 0.5
    assert roc_auc([0.1, 0.2, 0.9], [1, 1, 0]) == 0.0


def test_auc_matches_pairwise_definition():
    rng = np.random.default_rng(0)
    scores = np.round(rng.random(60), 1)
    labels = (rng.random(60) < 0.3).astype(int)
    assert roc_auc(scores, labels) == pytest.approx(_brute_force_auc(scores, labels), abs=1e-12)


def test_auc_of_random_scores_is_near_half():
    rng = np.random.default_rng(1)
    labels = (rng.random(20_000) < 0.1).astype(int)
    assert abs(roc_auc(rng.random(20_000), labels) - 0.5) < 0.02


def test_auc_needs_both_classes():
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.2], [1, 1])


def test_roc_points_span_unit_square():
    frame = roc_points([0.9, 0.4, 0.3, 0.8], [1, 0, 0, 1])
    assert frame["fpr"].iloc[0] == 0.0 and frame["tpr"].iloc[-1] == 1.0


def test_pr_curve_matches_reference():
    rng = np.random.default_rng(2)
    scores = np.round(rng.random(50), 1).tolist()
    labels = (rng.random(50) < 0.4).astype(int).tolist()
    labels[0] = 1
    ours = pr_curve(scores, labels)
    ref = _brute_force_pr(scores, labels)
    assert len(ours) == len(ref)
    np.testing.assert_allclose(np.array(ours), np.array(ref), atol=1e-12)


def test_pr_curve_edge_cases():
    assert pr_curve([0.9, 0.8, 0.1], [1, 1, 0]) == [(0.5, 1.0), (1.0, 1.0), (1.0, 2 / 3)]
    assert pr_curve([0.3, 0.3, 0.3], [1, 0, 0]) == [(1.0, 1 / 3)]
    assert average_precision([0.9, 0.8, 0.1], [1, 1, 0]) == pytest.approx(1.0)
    with pytest.raises(UndefinedMetricError):
        pr_curve([0.1, 0.2], [0, 0])


def test_identification_rates():
    scores = [0.9, 0.6, 0.4, 0.3, 0.7, 0.1]
    labels = [1, 1, 1, 0, 0, 0]
    pos_rate, neg_rate = identification_rates(scores, labels, 0.5)
    assert pos_rate == pytest.approx(2 / 3) and neg_rate == pytest.approx(2 / 3)
    assert identification_rates(scores, labels, 0.6) == (pytest.approx(1 / 3), pytest.approx(2 / 3))
    with pytest.raises(ValueError):
        identification_rates(scores, labels, float("nan"))
    with pytest.raises(UndefinedMetricError):
        identification_rates([0.2, 0.3], [0, 0], 0.5)


def test_f1_max_threshold_separates_perfect_scores():
    threshold, f1 = f1_max_threshold([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0])
    assert f1 == 1.0
    assert identification_rates([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0], threshold) == (1.0, 1.0)


def test_evaluate_scores_report():
    report = evaluate_scores("toy", [0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0], seed=4)
    assert report.auc == 1.0 and report.pos_rate == 1.0 and report.neg_rate == 1.0
    assert report.confusion == {"tp": 2, "fp": 0, "tn": 2, "fn": 0}
    row = report.row()
    assert row["tp"] == 2 and "roc" not in row and "runtime_seconds" not in row


def test_calibration_error_examples(env_config):
    states = np.array([[1.0, 0.0], [-0.5, 0.0]])
    X = np.zeros((2, 1, 1))
    exact = oracle_criticality(states, env_config)
    np.testing.assert_array_equal(exact, [1.0, 0.0])
    assert calibration_error(lambda _: np.array([1.0, 0.0]), X, states, env_config) == 0.0
    assert calibration_error(lambda _: np.array([0.5, 0.5]), X, states, env_config) == 0.5
    assert calibration_error(lambda _: np.array([0.5, 0.5]), X, states, None, truth=exact) == 0.5


def test_calibration_error_without_oracle(env_config):
    with pytest.raises(OracleUnavailableError):
        calibration_error(lambda _: np.zeros(1), np.zeros((1, 1, 1)), np.zeros((1, 2)), env_config, oracle_available=False)
    with pytest.raises(OracleUnavailableError):
        calibration_error(lambda _: np.zeros(1), np.zeros((1, 1, 1)), np.zeros((1, 2)), None)


def test_split_hash_tracks_content():
    X = np.zeros((3, 1, 1), dtype=np.float32)
    assert split_hash(X, np.array([0, 1, 0])) == split_hash(X.copy(), np.array([0, 1, 0]))
    assert split_hash(X, np.array([0, 1, 0])) != split_hash(X, np.array([1, 1, 0]))


class IdentityFilter(FilterModel):
    def score(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64).reshape(len(X), -1)[:, 0]


def test_cascade_zeroes_filtered_windows(toy_spec):
    classifier = ModelBundle(model=ClassifierModel(toy_spec), stage="stage2")
    cascade = CascadePredictor(filter=IdentityFilter(model=None, epsilon=0.0), classifier=classifier)
    X = np.array([-1.0, 0.0, 0.5, 2.0], dtype=np.float32).reshape(-1, 1, 1)
    out, passed = cascade.predict_with_gate(X)
    np.testing.assert_array_equal(passed, [False, False, True, True])
    np.testing.assert_array_equal(out[:2], 0.0)
    assert np.all((out[2:] > 0) & (out[2:] < 1))


def test_cascade_needs_both_parts(toy_spec):
    with pytest.raises(UsageError):
        CascadePredictor(filter=IdentityFilter(model=None), classifier=None).predict(np.zeros((1, 1, 1)))
