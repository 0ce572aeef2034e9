"""Classification and calibration metrics for the cascade and its baselines."""

import hashlib
from typing import Any, Callable

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy.stats import rankdata
from sklearn.metrics import average_precision_score, roc_curve

from core.errors import OracleUnavailableError, UndefinedMetricError
from core.hazard_env import EnvConfig, true_criticality


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    if scores.shape != labels.shape:
        raise ValueError(f"{len(scores)} scores for {len(labels)} labels")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return scores, labels


def roc_auc(scores, labels) -> float:
    """P(random positive outranks random negative), ties counted half."""
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC is undefined unless both classes are present")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_points(scores, labels) -> pd.DataFrame:
    scores, labels = _check(scores, labels)
    fpr, tpr, thresholds = roc_curve(labels, scores, drop_intermediate=False)
    return pd.DataFrame({"threshold": thresholds, "fpr": fpr, "tpr": tpr})


def _pr_sweep(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, recall, precision) at every distinct score, highest first."""
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("precision/recall need at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last]
    predicted = last + 1
    return s[last], tp / n_pos, tp / predicted


def pr_curve(scores, labels) -> list[tuple[float, float]]:
    """(recall, precision) per distinct threshold in descending score order."""
    _, recall, precision = _pr_sweep(scores, labels)
    return list(zip(recall.tolist(), precision.tolist()))


def pr_points(scores, labels) -> pd.DataFrame:
    thresholds, recall, precision = _pr_sweep(scores, labels)
    return pd.DataFrame({"threshold": thresholds, "recall": recall, "precision": precision})


def average_precision(scores, labels) -> float:
    scores, labels = _check(scores, labels)
    if labels.sum() == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    return float(average_precision_score(labels, scores))


def confusion(scores, labels, threshold: float) -> dict[str, int]:
    """Counts with ``score > threshold`` predicted positive."""
    scores, labels = _check(scores, labels)
    predicted = scores > threshold
    return {
        "tp": int(np.sum(predicted & (labels == 1))),
        "fp": int(np.sum(predicted & (labels == 0))),
        "tn": int(np.sum(~predicted & (labels == 0))),
        "fn": int(np.sum(~predicted & (labels == 1))),
    }


def identification_rates(scores, labels, threshold: float) -> tuple[float, float]:
    """(TP / |P|, TN / |N|) at ``threshold``."""
    if not np.isfinite(threshold):
        raise ValueError(f"threshold must be finite, got {threshold}")
    counts = confusion(scores, labels, threshold)
    n_pos = counts["tp"] + counts["fn"]
    n_neg = counts["tn"] + counts["fp"]
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("identification rates need both classes")
    return counts["tp"] / n_pos, counts["tn"] / n_neg


def f1_max_threshold(scores, labels) -> tuple[float, float]:
    """(threshold, F1) maximizing F1 under the ``score > threshold`` rule."""
    thresholds, recall, precision = _pr_sweep(scores, labels)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(denom), where=denom > 0)
    best = int(np.argmax(f1))
    return float(np.nextafter(thresholds[best], -np.inf)), float(f1[best])


def calibration_error(
    predictor: Callable[[np.ndarray], np.ndarray] | Any,
    X: np.ndarray,
    states: np.ndarray,
    env_config: EnvConfig | None,
    oracle_available: bool = True,
    truth: np.ndarray | None = None,
) -> float:
    """Mean |predicted criticality - exact criticality| over ``states``.

    ``X`` holds the windows the predictor sees, ``states`` the raw states the
    oracle is evaluated on (row-aligned). ``truth`` reuses precomputed oracle
    values.
    """
    if not oracle_available or (truth is None and env_config is None):
        raise OracleUnavailableError("no exact criticality oracle for this environment")
    if truth is None:
        truth = oracle_criticality(states, env_config)
    predict = predictor.predict if hasattr(predictor, "predict") else predictor
    predicted = np.asarray(predict(X), dtype=np.float64)
    return float(np.mean(np.abs(predicted - truth)))


def oracle_criticality(states: np.ndarray, env_config: EnvConfig, horizon: int | None = None) -> np.ndarray:
    return np.array([true_criticality(s, env_config, horizon) for s in np.asarray(states, dtype=np.float64)])


def split_hash(X: np.ndarray, y: np.ndarray) -> str:
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(X).tobytes())
    digest.update(np.ascontiguousarray(y, dtype=np.int8).tobytes())
    return digest.hexdigest()


class MetricReport(BaseModel):
    """Metrics of one predictor on one test split."""

    name: str
    n_samples: int
    n_positive: int
    n_negative: int
    decision_threshold: float
    confusion: dict[str, int]
    auc: float
    average_precision: float
    pos_rate: float
    neg_rate: float
    f1_max_threshold: float
    f1_max: float
    pos_rate_f1: float
    neg_rate_f1: float
    calibration_error: float | None = None
    calibration_skip_reason: str | None = None
    split_hash: str = ""
    seed: int | None = None
    runtime_seconds: float = Field(0.0, exclude=True)
    roc: pd.DataFrame | None = Field(None, exclude=True)
    pr: pd.DataFrame | None = Field(None, exclude=True)

    model_config = {"arbitrary_types_allowed": True}

    def row(self) -> dict[str, Any]:
        out = self.model_dump(exclude={"confusion"})
        out.update(self.confusion)
        return out


def evaluate_scores(
    name: str,
    scores,
    labels,
    decision_threshold: float = 0.5,
    seed: int | None = None,
    curves: bool = True,
) -> MetricReport:
    scores, labels = _check(scores, labels)
    pos_rate, neg_rate = identification_rates(scores, labels, decision_threshold)
    f1_threshold, f1 = f1_max_threshold(scores, labels)
    pos_f1, neg_f1 = identification_rates(scores, labels, f1_threshold)
    return MetricReport(
        name=name,
        n_samples=len(labels),
        n_positive=int(labels.sum()),
        n_negative=int(len(labels) - labels.sum()),
        decision_threshold=decision_threshold,
        confusion=confusion(scores, labels, decision_threshold),
        auc=roc_auc(scores, labels),
        average_precision=average_precision(scores, labels),
        pos_rate=pos_rate,
        neg_rate=neg_rate,
        f1_max_threshold=f1_threshold,
        f1_max=f1,
        pos_rate_f1=pos_f1,
        neg_rate_f1=neg_f1,
        seed=seed,
        roc=roc_points(scores, labels) if curves else None,
        pr=pr_points(scores, labels) if curves else None,
    )
