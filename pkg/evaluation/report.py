"""Evaluate stage: cascades and baselines on the held-out test split."""

import logging
import time

import numpy as np
import pandas as pd

from core import dataset as dataset_io
from core.checkpoint import checkpoint_load, checkpoint_save
from core.dataset import LabeledDataset, critical_episode_index
from core.errors import EnumerationBudgetError, MissingArtifactError, TrainingDivergenceError
from core.hazard_env import EnvConfig
from core.models import ModelBundle
from core.reports import read_csv, write_csv, write_yaml
from stages import registry
from stages.base import BaseStage, RunContext, StageName, StageResult
from stages.reward_filter import load_filter

from .baselines import CalibrationSet, attach_calibration, run_baselines
from .cascade import CascadePredictor
from .metrics import MetricReport, evaluate_scores, oracle_criticality, split_hash
from .plots import plot_pr, plot_roc

logger = logging.getLogger(__name__)

COMPARISON_FILE = "comparison.csv"
COLUMNS = [
    "name", "status", "auc", "average_precision", "pos_rate", "neg_rate", "f1_max_threshold", "f1_max",
    "pos_rate_f1", "neg_rate_f1", "calibration_error", "calibration_skip_reason",
    "tp", "fp", "tn", "fn", "n_samples", "n_positive", "n_negative", "split_hash",
]


def calibration_set(ctx: RunContext, test: LabeledDataset) -> CalibrationSet:
    """Evenly spaced critical-episode states of the test split with exact criticality."""
    index = critical_episode_index(test, ctx.episodes("test"))
    if len(index) == 0:
        return CalibrationSet(X=np.empty((0,)), states=np.empty((0,)), truth=None, skip_reason="no critical episodes in the test split")
    X = np.concatenate([ep.X for ep in index.episodes.values()])
    states = np.concatenate([ep.states[:-1] for ep in index.episodes.values()])
    limit = ctx.config.evaluation.calibration_max_states
    if len(X) > limit:
        keep = np.unique(np.linspace(0, len(X) - 1, limit).astype(np.int64))
        X, states = X[keep], states[keep]
    env = EnvConfig(**dataset_io.read_manifest(ctx.layout.data("test"))["env"])
    try:
        truth = oracle_criticality(states, env, test.horizon)
    except EnumerationBudgetError as e:
        return CalibrationSet(X=X, states=states, truth=None, skip_reason=str(e))
    return CalibrationSet(X=X, states=states, truth=truth)


def comparison_table(reports: list[MetricReport], skipped: dict[str, str]) -> pd.DataFrame:
    rows = [report.row() | {"status": "ok"} for report in reports]
    rows += [{"name": name, "status": f"skipped: {reason}"} for name, reason in skipped.items()]
    return pd.DataFrame(rows).reindex(columns=COLUMNS)


class EvaluateStage(BaseStage):
    name = StageName.EVALUATE
    description = "Compare the stage-2/3 cascades with the baselines on the test split"

    def requires(self, ctx: RunContext):
        return [
            (ctx.layout.data("test") / dataset_io.MANIFEST_FILE, "run `critcascade generate` first"),
            (ctx.layout.data("train") / dataset_io.MANIFEST_FILE, "run `critcascade generate` first"),
            (ctx.layout.reward_checkpoint, "run `critcascade stage1` first"),
            (ctx.layout.bbn_checkpoint, "run `critcascade stage2` first"),
        ]

    def outputs(self, ctx: RunContext):
        return [ctx.layout.evaluation / COMPARISON_FILE, ctx.layout.evaluation / "summary.yaml"]

    def run(self, ctx: RunContext) -> StageResult:
        cfg = ctx.config
        for name in cfg.baselines.names:
            registry.baselines.get(name)
        test = ctx.load_dataset(ctx.layout.data("test"))
        test_hash = split_hash(test.X, test.y)
        calibration = calibration_set(ctx, test)
        threshold = cfg.evaluation.decision_threshold
        filt = load_filter(ctx)

        reports: list[MetricReport] = []
        skipped: dict[str, str] = {}
        passed = None
        cascades = [("stage2_cascade", ctx.layout.bbn_checkpoint, "stage2"), ("stage3_cascade", ctx.layout.dqn_checkpoint, "stage3")]
        for name, path, stage in cascades:
            if not path.exists():
                skipped[name] = f"{path.name} not found; run `critcascade {stage}`"
                continue
            started = time.perf_counter()
            cascade = CascadePredictor(filt, checkpoint_load(path, ctx.config_hash, stage, force=ctx.force), mode=stage)
            scores, passed = cascade.predict_with_gate(test.X)
            report = evaluate_scores(name, scores, test.y, threshold, cfg.seed)
            report.split_hash = test_hash
            report.runtime_seconds = time.perf_counter() - started
            reports.append(attach_calibration(report, cascade.predict, calibration))
            logger.info("%s: AUC %.4f", name, report.auc)

        train = ctx.load_dataset(ctx.layout.data("train"))
        models = {}
        for name in cfg.baselines.names:
            try:
                reports += run_baselines(train, test, cfg, [name], calibration, models)
            except TrainingDivergenceError as e:
                skipped[name] = str(e)
        artifacts = [
            checkpoint_save(ModelBundle(model, f"baseline_{name}", ctx.config_hash), ctx.layout.baselines / f"{name}.ckpt")
            for name, model in models.items()
        ]

        out = ctx.layout.evaluation
        for report in reports:
            artifacts.append(write_csv(report.roc, out / "curves" / f"roc_{report.name}.csv", ctx.config_hash))
            artifacts.append(write_csv(report.pr, out / "curves" / f"pr_{report.name}.csv", ctx.config_hash))
        table = comparison_table(reports, skipped)
        artifacts.append(write_csv(table, out / COMPARISON_FILE, ctx.config_hash))

        stage1 = {"epsilon": filt.epsilon}
        if passed is not None and len(test.P) and len(test.N):
            stage1["test_retained_positive_rate"] = float(passed[test.P].mean())
            stage1["test_removed_negative_rate"] = float(1.0 - passed[test.N].mean())
        summary = {
            "split_hash": test_hash,
            "decision_threshold": threshold,
            "stage1": stage1,
            "reports": [report.model_dump(mode="json") for report in reports],
            "skipped": skipped,
            "calibration_states": int(len(calibration.X)),
        }
        artifacts.append(write_yaml(summary, out / "summary.yaml", ctx.config_hash))

        if cfg.evaluation.plots and reports:
            artifacts.append(plot_roc({r.name: r.roc for r in reports}, {r.name: r.auc for r in reports}, ctx.layout.plots / "roc.svg"))
            artifacts.append(plot_pr({r.name: r.pr for r in reports}, ctx.layout.plots / "pr.svg"))
        return StageResult(success=True, stage=self.name, report=summary, artifacts=artifacts)


def load_comparison(ctx: RunContext) -> pd.DataFrame:
    """Comparison table of a finished evaluation, provenance-checked."""
    path = ctx.layout.evaluation / COMPARISON_FILE
    if not path.exists():
        raise MissingArtifactError(str(path), "run `critcascade evaluate` first")
    table, found = read_csv(path)
    ctx.check_provenance(found, path)
    return table


registry.stages.register(StageName.EVALUATE.value, EvaluateStage())
