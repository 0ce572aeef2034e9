"""Stage 2: bilateral-branch classifier trained on the stage-1 survivors."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F

from core import dataset as dataset_io
from core.checkpoint import checkpoint_load, checkpoint_save
from core.config import BBNConfig
from core.dataset import LabeledDataset, Standardizer, split_by_episode
from core.errors import DataIntegrityError, OverFilteringError, ShapeError, TrainingDivergenceError
from core.models import BBNModel, ModelBundle, predict_proba
from core.reports import Stage2Report, write_csv, write_yaml
from core.seeding import seed_everything
from evaluation.metrics import roc_auc

from . import registry
from .base import BaseStage, RunContext, StageName, StageResult
from .samplers import BranchSampler

logger = logging.getLogger(__name__)

STAGE = "stage2"
PROB_CLAMP = 1e-7


def _as_tensor(value) -> torch.Tensor:
    return value if torch.is_tensor(value) else torch.as_tensor(value, dtype=torch.float64)


def _p_true(p_pos, y) -> torch.Tensor:
    p_pos, y = _as_tensor(p_pos), _as_tensor(y).to(_as_tensor(p_pos).dtype)
    if torch.isnan(p_pos).any():
        raise DataIntegrityError("NaN probability passed to a loss")
    if not torch.all((y == 0) | (y == 1)):
        raise DataIntegrityError("labels must be 0 or 1")
    p_t = torch.where(y == 1, p_pos, 1.0 - p_pos)
    return p_t.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)


def cross_entropy(p_pos, y) -> torch.Tensor:
    """Mean binary cross-entropy on positive-class probabilities."""
    return (-torch.log(_p_true(p_pos, y))).mean()


def focal_loss(p_pos, y, gamma: float = 2.0) -> torch.Tensor:
    """Mean of -(1 - p_t)^gamma * log p_t."""
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    p_t = _p_true(p_pos, y)
    return ((1.0 - p_t) ** gamma * -torch.log(p_t)).mean()


def branch_losses(logits: torch.Tensor, y_a, y_b, gamma: float, branch_a_loss: str = "focal"):
    """(L_a, L_b) computed on the same mixed positive-class probability."""
    p = F.softmax(logits, dim=-1)[:, 1]
    loss_a = focal_loss(p, y_a, gamma) if branch_a_loss == "focal" else cross_entropy(p, y_a)
    return loss_a, cross_entropy(p, y_b)


def combined_loss(logits: torch.Tensor, y_a, y_b, alpha: float, gamma: float = 2.0, branch_a_loss: str = "focal") -> torch.Tensor:
    """alpha * L_a(p, y_a) + (1 - alpha) * CE(p, y_b)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    loss_a, loss_b = branch_losses(logits, y_a, y_b, gamma, branch_a_loss)
    return alpha * loss_a + (1.0 - alpha) * loss_b


def alpha_schedule(epoch: int, n_epochs: int, kind: str = "cosine", alpha_max: float = 1.0, alpha_min: float = 0.0) -> float:
    """Mixing weight for a 0-based epoch; first epoch alpha_max, last alpha_min."""
    if kind == "constant" or n_epochs <= 1:
        return alpha_max
    t = epoch / (n_epochs - 1)
    if kind == "cosine":
        weight = 0.5 * (1.0 + math.cos(math.pi * t))
    elif kind == "parabolic":
        weight = 1.0 - t * t
    else:
        raise ValueError(f"unknown alpha schedule '{kind}'")
    return alpha_min + (alpha_max - alpha_min) * weight


@dataclass
class BBNTraining:
    model: BBNModel
    epoch_log: list[dict] = field(default_factory=list)

    @property
    def final_alpha(self) -> float:
        return self.epoch_log[-1]["alpha"] if self.epoch_log else float("nan")


def build_bbn(train: LabeledDataset, config: BBNConfig, init: ModelBundle | None = None) -> BBNModel:
    """Fresh BBN; with ``init`` both branch backbones start from its backbone."""
    if init is not None:
        source = init.model.backbone
        model = BBNModel(
            source.spec,
            d_proj=config.d_proj,
            shared_backbone=config.shared_backbone,
            normalized=config.normalized,
            logit_scale=config.logit_scale,
            inference_alpha=config.inference_alpha,
        )
        model.backbone_a.load_state_dict(source.state_dict())
        model.backbone_b.load_state_dict(source.state_dict())
        return model
    scaler = Standardizer.fit(train)
    spec = config.backbone.model_copy(
        update={
            "window_len": train.window_len,
            "state_dim": train.state_dim,
            "input_mean": scaler.mean,
            "input_scale": scaler.scale,
        }
    )
    return BBNModel(
        spec,
        d_proj=config.d_proj,
        shared_backbone=config.shared_backbone,
        normalized=config.normalized,
        logit_scale=config.logit_scale,
        inference_alpha=config.inference_alpha,
    )


def train_bbn(
    survivors: LabeledDataset,
    init: ModelBundle | None,
    config: BBNConfig,
    seed: int,
    val: LabeledDataset | None = None,
) -> BBNTraining:
    """Class-balanced branch a plus uniform branch b, mixed by a scheduled alpha."""
    if len(survivors.P) == 0 or len(survivors.N) == 0:
        raise OverFilteringError(
            f"stage 2 received a single-class survivor set (|P|={len(survivors.P)}, |N|={len(survivors.N)}); "
            "stage 1 over-filtered, lower target_recall pressure or inspect the reward model"
        )
    seed_everything(seed)
    model = build_bbn(survivors, config, init if config.init_from_stage1 else None)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    rng_a, rng_b = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    sampler_a = BranchSampler("class_balanced", survivors.y, rng_a)
    sampler_b = BranchSampler("uniform", survivors.y, rng_b)
    X = survivors.X
    y = survivors.y.astype(np.int64)

    result = BBNTraining(model=model)
    step = 0
    recent: list[float] = []
    for epoch in range(config.epochs):
        alpha = alpha_schedule(epoch, config.epochs, config.alpha_schedule, config.alpha_max, config.alpha_min)
        model.train()
        sums = np.zeros(3)
        for _ in range(config.steps_per_epoch):
            step += 1
            idx_a = sampler_a.draw(config.batch_size)
            idx_b = sampler_b.draw(config.batch_size)
            logits = model(torch.from_numpy(X[idx_a]), torch.from_numpy(X[idx_b]), alpha)
            loss_a, loss_b = branch_losses(logits, torch.from_numpy(y[idx_a]), torch.from_numpy(y[idx_b]), config.gamma, config.branch_a_loss)
            loss = alpha * loss_a + (1.0 - alpha) * loss_b
            if not torch.isfinite(loss):
                raise TrainingDivergenceError(STAGE, step, recent[-5:])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            model.classifier.renormalize_()
            recent.append(loss.item())
            sums += (loss_a.item(), loss_b.item(), loss.item())

        means = sums / config.steps_per_epoch
        val_auc = None
        if val is not None and len(val.P) and len(val.N):
            val_auc = roc_auc(predict_criticality_stage2(model, val.X), val.y)
        result.epoch_log.append(
            {"epoch": epoch, "alpha": alpha, "loss_a": means[0], "loss_b": means[1], "loss": means[2], "val_auc": val_auc}
        )
        logger.info("stage2 epoch %d/%d alpha %.3f loss %.5f val_auc %s", epoch + 1, config.epochs, alpha, means[2], val_auc)
    model.eval()
    return result


def predict_criticality_stage2(model: BBNModel, X) -> np.ndarray:
    """Softmax positive-class probability at the model's inference alpha."""
    X = np.asarray(X)
    spec = model.backbone_a.spec
    if X.ndim != 3 or X.shape[1:] != (spec.window_len, spec.state_dim):
        raise ShapeError(f"expected windows (*, {spec.window_len}, {spec.state_dim}), got {X.shape}")
    return predict_proba(model, X)


class BBNStage(BaseStage):
    name = StageName.STAGE2
    description = "Train the enhanced BBN on the stage-1 survivors"

    def requires(self, ctx: RunContext):
        needed = [(ctx.layout.survivors / dataset_io.MANIFEST_FILE, "run `critcascade stage1` first")]
        if ctx.config.stage2.init_from_stage1:
            needed.append((ctx.layout.reward_checkpoint, "run `critcascade stage1` first"))
        return needed

    def outputs(self, ctx: RunContext):
        return [ctx.layout.bbn_checkpoint, ctx.layout.stage2 / "report.yaml"]

    def run(self, ctx: RunContext) -> StageResult:
        cfg = ctx.config
        survivors = ctx.load_dataset(ctx.layout.survivors)
        train, val = split_by_episode(survivors, cfg.dataset.val_fraction, cfg.dataset.split_seed)
        init = None
        if cfg.stage2.init_from_stage1:
            init = checkpoint_load(ctx.layout.reward_checkpoint, ctx.config_hash, "stage1", force=ctx.force)
        trained = train_bbn(train, init, cfg.stage2, cfg.stage2.seed, val=val)

        last = trained.epoch_log[-1]
        bundle = ModelBundle(
            model=trained.model,
            stage=STAGE,
            config_hash=ctx.config_hash,
            metrics={"final_loss": last["loss"], "val_auc": last["val_auc"]},
            extra={"alpha_schedule": cfg.stage2.alpha_schedule, "final_alpha": trained.final_alpha},
        )
        report = Stage2Report(
            epochs=cfg.stage2.epochs,
            final_alpha=trained.final_alpha,
            final_loss=last["loss"],
            val_auc=last["val_auc"],
            n_train=len(train),
            n_train_positive=int(len(train.P)),
            inference_alpha=cfg.stage2.inference_alpha,
        )
        out = ctx.layout.stage2
        artifacts = [
            checkpoint_save(bundle, ctx.layout.bbn_checkpoint),
            write_csv(pd.DataFrame(trained.epoch_log), out / "epoch_log.csv", ctx.config_hash),
            write_yaml(report, out / "report.yaml", ctx.config_hash),
        ]
        return StageResult(success=True, stage=self.name, report=report.model_dump(), artifacts=artifacts)


registry.stages.register(StageName.STAGE2.value, BBNStage())
