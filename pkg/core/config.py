"""Configuration schema for a full pipeline run."""

import hashlib
import json
from typing import Literal

from pydantic import BaseModel, Field, model_validator

from .hazard_env import EnvConfig
from .models import BackboneSpec

# Offset between the train and test seed ranges.
TEST_SEED_OFFSET = 1_000_003


class DatasetParams(BaseModel):
    window_len: int = Field(10, ge=1)
    horizon: int | None = Field(None, ge=1)
    n_train_episodes: int = Field(6000, ge=1)
    n_test_episodes: int = Field(3000, ge=1)
    train_seed: int | None = None
    test_seed: int | None = None
    val_fraction: float = Field(0.2, gt=0, lt=1)
    split_seed: int | None = None
    calibrate_rarity: bool = True
    target_critical_rate: float = Field(2.5e-3, gt=0, lt=1)
    n_pilot_episodes: int = Field(4000, ge=1)


class RewardConfig(BaseModel):
    backbone: BackboneSpec = Field(default_factory=BackboneSpec)
    steps: int = Field(2000, ge=0)
    batch_size: int = Field(256, ge=1)
    lr: float = Field(1e-3, gt=0)
    weight_decay: float = Field(0.0, ge=0)
    target_recall: float = Field(0.995, gt=0, le=1)
    log_every: int = Field(200, ge=1)
    histogram_bins: int = Field(50, ge=2)
    seed: int | None = None


class BBNConfig(BaseModel):
    backbone: BackboneSpec = Field(default_factory=BackboneSpec)
    d_proj: int = Field(64, ge=1)
    shared_backbone: bool = False
    normalized: bool = True
    logit_scale: float = Field(10.0, gt=0)
    gamma: float = Field(2.0, ge=0)
    branch_a_loss: Literal["focal", "ce"] = "focal"
    epochs: int = Field(20, ge=1)
    steps_per_epoch: int = Field(200, ge=1)
    batch_size: int = Field(128, ge=1)
    lr: float = Field(1e-3, gt=0)
    alpha_max: float = Field(1.0, ge=0, le=1)
    alpha_min: float = Field(0.0, ge=0, le=1)
    alpha_schedule: Literal["cosine", "parabolic", "constant"] = "cosine"
    inference_alpha: float = Field(0.5, ge=0, le=1)
    init_from_stage1: bool = True
    seed: int | None = None


class DenseDQNConfig(BaseModel):
    gamma: float = Field(0.99, ge=0, le=1)
    target_sync_period: int = Field(250, ge=1)
    finetune_scope: list[str] = Field(default_factory=lambda: ["proj_a.*", "proj_b.*", "classifier.*"])
    batch_size: int = Field(64, ge=1)
    steps: int = Field(2000, ge=0)
    lr: float = Field(1e-4, gt=0)
    log_every: int = Field(200, ge=1)
    seed: int | None = None

    @model_validator(mode="after")
    def _scope_not_empty(self):
        if not self.finetune_scope:
            raise ValueError("finetune_scope must name at least one parameter pattern")
        return self


class BaselineConfig(BaseModel):
    names: list[str] = Field(default_factory=lambda: ["bbn", "cbs", "decoupling", "no_filter"])
    backbone: BackboneSpec = Field(default_factory=BackboneSpec)
    steps: int = Field(4000, ge=1)
    classifier_steps: int = Field(1000, ge=1)
    batch_size: int = Field(256, ge=1)
    lr: float = Field(1e-3, gt=0)
    seed: int | None = None


class EvalConfig(BaseModel):
    decision_threshold: float = Field(0.5, ge=0, le=1)
    calibration_max_states: int = Field(2000, ge=1)
    plots: bool = True


class PipelineConfig(BaseModel):
    """Everything one experiment needs; every seed resolved explicitly."""

    seed: int = 0
    output_dir: str = "runs/default"
    env: EnvConfig = Field(default_factory=EnvConfig)
    dataset: DatasetParams = Field(default_factory=DatasetParams)
    stage1: RewardConfig = Field(default_factory=RewardConfig)
    stage2: BBNConfig = Field(default_factory=BBNConfig)
    stage3: DenseDQNConfig = Field(default_factory=DenseDQNConfig)
    baselines: BaselineConfig = Field(default_factory=BaselineConfig)
    evaluation: EvalConfig = Field(default_factory=EvalConfig)

    def resolved(self) -> "PipelineConfig":
        """Copy with derived seeds, horizon and backbone shapes filled in."""
        cfg = self.model_copy(deep=True)
        s = cfg.seed
        ds = cfg.dataset
        ds.train_seed = s if ds.train_seed is None else ds.train_seed
        ds.test_seed = s + TEST_SEED_OFFSET if ds.test_seed is None else ds.test_seed
        ds.split_seed = s + 1 if ds.split_seed is None else ds.split_seed
        ds.horizon = cfg.env.horizon_h if ds.horizon is None else ds.horizon
        for offset, part in enumerate((cfg.stage1, cfg.stage2, cfg.stage3, cfg.baselines), start=11):
            part.seed = s + offset if part.seed is None else part.seed
        for spec in (cfg.stage1.backbone, cfg.stage2.backbone, cfg.baselines.backbone):
            spec.window_len = ds.window_len
            spec.state_dim = cfg.env.state_dim
        return cfg

    def config_hash(self) -> str:
        canonical = json.dumps(self.resolved().model_dump(mode="json", exclude={"output_dir"}), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()
