"""Reference classifiers trained on the unfiltered train split."""

import logging
import time
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from core.config import PipelineConfig
from core.dataset import LabeledDataset, Standardizer
from core.errors import TrainingDivergenceError
from core.models import ClassifierModel, predict_proba
from core.seeding import seed_everything
from stages import registry
from stages.bbn import cross_entropy, train_bbn
from stages.samplers import BranchSampler

from .metrics import MetricReport, calibration_error, evaluate_scores, split_hash

logger = logging.getLogger(__name__)


@dataclass
class CalibrationSet:
    """Critical-episode windows with their raw states and exact criticality."""

    X: np.ndarray
    states: np.ndarray
    truth: np.ndarray | None
    skip_reason: str | None = None


def _classifier(train: LabeledDataset, config: PipelineConfig) -> ClassifierModel:
    scaler = Standardizer.fit(train)
    spec = config.baselines.backbone.model_copy(update={"input_mean": scaler.mean, "input_scale": scaler.scale})
    return ClassifierModel(spec)


def _fit(model: nn.Module, params, train: LabeledDataset, mode: str, steps: int, config: PipelineConfig, rng, name: str) -> None:
    optimizer = torch.optim.Adam(params, lr=config.baselines.lr)
    sampler = BranchSampler(mode, train.y, rng)
    y = train.y.astype(np.int64)
    model.train()
    for step in range(1, steps + 1):
        idx = sampler.draw(config.baselines.batch_size)
        p = F.softmax(model(torch.from_numpy(train.X[idx])), dim=-1)[:, 1]
        loss = cross_entropy(p, torch.from_numpy(y[idx]))
        if not torch.isfinite(loss):
            raise TrainingDivergenceError(name, step, [])
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    model.eval()


def train_cbs(train: LabeledDataset, config: PipelineConfig) -> nn.Module:
    """Single model, class-balanced sampling, cross-entropy."""
    rng = seed_everything(config.baselines.seed)
    model = _classifier(train, config)
    _fit(model, model.parameters(), train, "class_balanced", config.baselines.steps, config, rng, "cbs")
    return model


def train_decoupling(train: LabeledDataset, config: PipelineConfig) -> nn.Module:
    """Uniform-sampled representation learning, then classifier retraining on balanced draws."""
    rng = seed_everything(config.baselines.seed)
    model = _classifier(train, config)
    _fit(model, model.parameters(), train, "uniform", config.baselines.steps, config, rng, "decoupling")
    for param in model.backbone.parameters():
        param.requires_grad_(False)
    with torch.no_grad():
        nn.init.kaiming_uniform_(model.classifier.weight, a=5**0.5)
        model.bias.zero_()
    head = [model.classifier.weight, model.bias]
    _fit(model, head, train, "class_balanced", config.baselines.classifier_steps, config, rng, "decoupling")
    for param in model.backbone.parameters():
        param.requires_grad_(True)
    return model


def train_plain_bbn(train: LabeledDataset, config: PipelineConfig) -> nn.Module:
    """Original BBN: unnormalized classifier, cross-entropy on both branches."""
    bbn = config.stage2.model_copy(
        update={"normalized": False, "branch_a_loss": "ce", "init_from_stage1": False, "backbone": config.baselines.backbone}
    )
    return train_bbn(train, None, bbn, config.baselines.seed).model


def train_no_filter(train: LabeledDataset, config: PipelineConfig) -> nn.Module:
    """Enhanced BBN trained without the stage-1 filter."""
    bbn = config.stage2.model_copy(update={"init_from_stage1": False})
    return train_bbn(train, None, bbn, config.baselines.seed).model


registry.baselines.register("cbs", train_cbs)
registry.baselines.register("decoupling", train_decoupling)
registry.baselines.register("bbn", train_plain_bbn)
registry.baselines.register("no_filter", train_no_filter)


def attach_calibration(report: MetricReport, predict, calibration: CalibrationSet | None) -> MetricReport:
    """Fill calibration error, or record why it was skipped."""
    if calibration is None:
        report.calibration_skip_reason = "no calibration states"
    elif calibration.truth is None:
        report.calibration_skip_reason = calibration.skip_reason or "oracle unavailable"
    else:
        report.calibration_error = calibration_error(predict, calibration.X, calibration.states, None, truth=calibration.truth)
    return report


def run_baselines(
    train: LabeledDataset,
    test: LabeledDataset,
    config: PipelineConfig,
    names: list[str] | None = None,
    calibration: CalibrationSet | None = None,
    models: dict[str, nn.Module] | None = None,
) -> list[MetricReport]:
    """One report per baseline, all on the same test split."""
    names = config.baselines.names if names is None else names
    trainers = [(name, registry.baselines.get(name)) for name in names]
    test_hash = split_hash(test.X, test.y)
    reports = []
    for name, trainer in trainers:
        started = time.perf_counter()
        model = trainer(train, config)
        scores = predict_proba(model, test.X)
        report = evaluate_scores(name, scores, test.y, config.evaluation.decision_threshold, config.baselines.seed)
        report.split_hash = test_hash
        report.runtime_seconds = time.perf_counter() - started
        attach_calibration(report, lambda X, m=model: predict_proba(m, X), calibration)
        logger.info("baseline %s: AUC %.4f (%.1fs)", name, report.auc, report.runtime_seconds)
        if models is not None:
            models[name] = model
        reports.append(report)
    return reports
