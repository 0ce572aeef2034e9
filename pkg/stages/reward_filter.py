"""Stage 1: pairwise-ranking reward model that pre-identifies easy negatives."""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F

from core import dataset as dataset_io
from core.checkpoint import checkpoint_load, checkpoint_save
from core.config import RewardConfig
from core.dataset import LabeledDataset, Standardizer, split_by_episode
from core.errors import ShapeError, TrainingDivergenceError, UsageError
from core.models import ModelBundle, RewardModel
from core.reports import Stage1Report, write_csv, write_yaml
from core.seeding import seed_everything

from . import registry
from .base import BaseStage, RunContext, StageName, StageResult

logger = logging.getLogger(__name__)

STAGE = "stage1"
# Fixed pairs used to compare held-out loss before and after training.
HELDOUT_PAIRS = 4096


@dataclass
class PairBatch:
    """Positive/negative windows drawn pairwise."""

    positives: np.ndarray
    negatives: np.ndarray

    def __post_init__(self):
        if len(self.positives) != len(self.negatives):
            raise ShapeError(f"{len(self.positives)} positives paired with {len(self.negatives)} negatives")

    def __len__(self) -> int:
        return len(self.positives)

    @classmethod
    def draw(cls, ds: LabeledDataset, size: int, rng: np.random.Generator) -> "PairBatch":
        """Uniform with replacement from P and, independently, from N."""
        pos = ds.P[rng.integers(len(ds.P), size=size)]
        neg = ds.N[rng.integers(len(ds.N), size=size)]
        return cls(positives=ds.X[pos], negatives=ds.X[neg])


def ranking_loss(r_pos, r_neg) -> torch.Tensor:
    """Mean of -log sigmoid(r_p - r_n) over pairs."""
    r_pos = r_pos if torch.is_tensor(r_pos) else torch.as_tensor(r_pos, dtype=torch.float64)
    r_neg = r_neg if torch.is_tensor(r_neg) else torch.as_tensor(r_neg, dtype=torch.float64)
    r_pos, r_neg = r_pos.reshape(-1), r_neg.reshape(-1)
    if r_pos.numel() == 0 or r_pos.shape != r_neg.shape:
        raise ShapeError(f"ranking_loss needs equal non-empty batches, got {r_pos.numel()} and {r_neg.numel()}")
    return F.softplus(-(r_pos - r_neg)).mean()


@torch.no_grad()
def score_samples(model: RewardModel, X, batch_size: int = 8192) -> np.ndarray:
    """r_theta(x) for every window, as float64."""
    model.eval()
    dtype = next(model.parameters()).dtype
    X = np.asarray(X)
    out = np.empty(len(X), dtype=np.float64)
    for start in range(0, len(X), batch_size):
        batch = torch.as_tensor(X[start : start + batch_size], dtype=dtype)
        out[start : start + batch_size] = model(batch).double().numpy()
    return out


@dataclass
class FilterModel:
    """Reward model plus its calibrated threshold."""

    model: RewardModel
    epsilon: float | None = None
    calibration: dict[str, Any] = field(default_factory=dict)
    training_log: list[dict[str, float]] = field(default_factory=list)

    def score(self, X) -> np.ndarray:
        return score_samples(self.model, X)

    def passes(self, X) -> np.ndarray:
        """True where a window survives the filter (r > epsilon)."""
        if self.epsilon is None:
            raise UsageError("reward filter has no calibrated threshold")
        return self.score(X) > self.epsilon

    def to_bundle(self, config_hash: str) -> ModelBundle:
        return ModelBundle(
            model=self.model,
            stage=STAGE,
            config_hash=config_hash,
            metrics={k: v for k, v in self.calibration.items() if isinstance(v, float)},
            extra={"epsilon": self.epsilon, "calibration": self.calibration},
        )

    @classmethod
    def from_bundle(cls, bundle: ModelBundle) -> "FilterModel":
        return cls(model=bundle.model, epsilon=bundle.extra.get("epsilon"), calibration=bundle.extra.get("calibration", {}))


def pair_statistics(model: RewardModel, ds: LabeledDataset, n_pairs: int, seed: int) -> tuple[float, float]:
    """(mean ranking loss, fraction with r_p > r_n) over fixed random pairs."""
    pairs = PairBatch.draw(ds, n_pairs, np.random.default_rng(seed))
    r_p = torch.from_numpy(score_samples(model, pairs.positives))
    r_n = torch.from_numpy(score_samples(model, pairs.negatives))
    return ranking_loss(r_p, r_n).item(), float((r_p > r_n).double().mean())


def _split_by_sample(ds: LabeledDataset, val_fraction: float, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    rng = np.random.default_rng(seed)
    val = []
    for group in (ds.P, ds.N):
        n_val = min(max(int(round(val_fraction * len(group))), 1), len(group) - 1)
        val.append(rng.permutation(group)[:n_val])
    in_val = np.zeros(len(ds), dtype=bool)
    in_val[np.concatenate(val)] = True
    return ds.subset(np.flatnonzero(~in_val)), ds.subset(np.flatnonzero(in_val))


def train_reward_model(
    ds: LabeledDataset,
    config: RewardConfig,
    seed: int,
    val: LabeledDataset | None = None,
    val_fraction: float = 0.2,
) -> FilterModel:
    """Fit r_theta with the ranking loss, then calibrate epsilon on ``val``.

    Without an explicit ``val`` the data is split by episode; when that leaves
    one side without positives the split falls back to a per-sample one.
    """
    if len(ds.P) < 2:
        raise UsageError(f"stage 1 needs at least two positives, got {len(ds.P)}")
    if val is None:
        train, val = split_by_episode(ds, val_fraction, seed)
        if len(train.P) == 0 or len(val.P) == 0:
            logger.warning("Episode split left a side without positives; splitting by sample")
            train, val = _split_by_sample(ds, val_fraction, seed)
    else:
        train = ds
    if len(train.N) == 0:
        raise UsageError("stage 1 needs negatives in the training split")

    rng = seed_everything(seed)
    scaler = Standardizer.fit(train)
    spec = config.backbone.model_copy(
        update={
            "window_len": train.window_len,
            "state_dim": train.state_dim,
            "input_mean": scaler.mean,
            "input_scale": scaler.scale,
        }
    )
    model = RewardModel(spec)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    heldout_init = pair_statistics(model, val, HELDOUT_PAIRS, seed) if len(val.N) else (float("nan"), float("nan"))

    log: list[dict[str, float]] = []
    model.train()
    for step in range(1, config.steps + 1):
        pairs = PairBatch.draw(train, config.batch_size, rng)
        r = model(torch.from_numpy(np.concatenate([pairs.positives, pairs.negatives])))
        loss = ranking_loss(r[: len(pairs)], r[len(pairs) :])
        if not torch.isfinite(loss):
            raise TrainingDivergenceError(STAGE, step, [row["loss"] for row in log[-5:]])
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        log.append({"step": step, "loss": loss.item()})
        if step % config.log_every == 0:
            logger.info("stage1 step %d/%d loss %.5f", step, config.steps, loss.item())
    model.eval()

    fm = FilterModel(model=model, training_log=log)
    fm.epsilon = calibrate_threshold(fm, val, config.target_recall)
    heldout_final = pair_statistics(model, val, HELDOUT_PAIRS, seed) if len(val.N) else (float("nan"), float("nan"))
    val_scores = fm.score(val.X)
    fm.calibration = {
        "target_recall": config.target_recall,
        "val_retained_positive_rate": float(np.mean(val_scores[val.P] > fm.epsilon)),
        "val_removed_negative_rate": float(np.mean(val_scores[val.N] <= fm.epsilon)) if len(val.N) else 0.0,
        "val_pair_loss_init": heldout_init[0],
        "val_pair_loss_final": heldout_final[0],
        "val_pair_accuracy": heldout_final[1],
        "n_val_positive": int(len(val.P)),
        "n_val_negative": int(len(val.N)),
        "seed": seed,
    }
    logger.info(
        "stage1 calibrated epsilon=%.6g: val recall %.4f, val removed negatives %.4f",
        fm.epsilon,
        fm.calibration["val_retained_positive_rate"],
        fm.calibration["val_removed_negative_rate"],
    )
    return fm


def calibrate_threshold(model: FilterModel | RewardModel, val: LabeledDataset, target_recall: float) -> float:
    """Largest epsilon keeping at least ``target_recall`` of val positives above it."""
    if not 0.0 < target_recall <= 1.0:
        raise ValueError(f"target_recall must lie in (0, 1], got {target_recall}")
    if len(val.P) == 0:
        raise UsageError("cannot calibrate a threshold on a split without positives")
    scorer = model.score if isinstance(model, FilterModel) else (lambda X: score_samples(model, X))
    scores = np.sort(scorer(val.X[val.P]))
    m = len(scores)
    k = min(max(math.ceil(target_recall * m - 1e-9), 1), m)
    return float(np.nextafter(scores[m - k], -np.inf))


@dataclass
class FilterStats:
    """Outcome of applying the threshold to a dataset."""

    epsilon: float
    n_positive: int
    n_negative: int
    n_survivors: int
    n_survivor_negative: int
    retained_positive_fraction: float
    removed_negative_fraction: float
    original_imbalance_ratio: float | None
    survivor_imbalance_ratio: float | None


def filter_dataset(
    model: FilterModel, ds: LabeledDataset, scores: np.ndarray | None = None
) -> tuple[LabeledDataset, FilterStats]:
    """Keep every positive plus the negatives scored above epsilon."""
    if model.epsilon is None:
        raise UsageError("reward filter has no calibrated threshold")
    scores = model.score(ds.X) if scores is None else scores
    above = scores > model.epsilon
    keep = (ds.y == 1) | above
    survivors = ds.subset(np.flatnonzero(keep))
    survivors.manifest["stage1_epsilon"] = float(model.epsilon)

    n_pos, n_neg = int(len(ds.P)), int(len(ds.N))
    n_neg_kept = int(np.count_nonzero(above[ds.N]))
    stats = FilterStats(
        epsilon=float(model.epsilon),
        n_positive=n_pos,
        n_negative=n_neg,
        n_survivors=len(survivors),
        n_survivor_negative=n_neg_kept,
        retained_positive_fraction=float(np.mean(above[ds.P])) if n_pos else 0.0,
        removed_negative_fraction=1.0 - n_neg_kept / n_neg if n_neg else 0.0,
        original_imbalance_ratio=n_neg / n_pos if n_pos else None,
        survivor_imbalance_ratio=n_neg_kept / n_pos if n_pos else None,
    )
    logger.info(
        "stage1 filter: %d -> %d samples, removed %.4f of negatives, kept %.4f of positives above epsilon",
        len(ds),
        len(survivors),
        stats.removed_negative_fraction,
        stats.retained_positive_fraction,
    )
    return survivors, stats


def score_histogram(scores: np.ndarray, labels: np.ndarray, bins: int = 50) -> pd.DataFrame:
    """Per-class counts over shared bin edges."""
    edges = np.histogram_bin_edges(scores, bins=bins)
    pos, _ = np.histogram(scores[labels == 1], bins=edges)
    neg, _ = np.histogram(scores[labels == 0], bins=edges)
    return pd.DataFrame({"bin_left": edges[:-1], "bin_right": edges[1:], "positive": pos, "negative": neg})


class RewardFilterStage(BaseStage):
    name = StageName.STAGE1
    description = "Train the reward model, calibrate epsilon and filter the train split"

    def requires(self, ctx: RunContext):
        return [(ctx.layout.data("train") / dataset_io.MANIFEST_FILE, "run `critcascade generate` first")]

    def outputs(self, ctx: RunContext):
        return [ctx.layout.reward_checkpoint, ctx.layout.stage1 / "report.yaml"]

    def run(self, ctx: RunContext) -> StageResult:
        cfg = ctx.config
        ds = ctx.load_dataset(ctx.layout.data("train"))
        train, val = split_by_episode(ds, cfg.dataset.val_fraction, cfg.dataset.split_seed)
        if len(train.P) == 0 or len(val.P) == 0:
            train, val = _split_by_sample(ds, cfg.dataset.val_fraction, cfg.dataset.split_seed)
        fm = train_reward_model(train, cfg.stage1, cfg.stage1.seed, val=val)

        scores = fm.score(ds.X)
        survivors, stats = filter_dataset(fm, ds, scores)
        survivors.manifest["config_hash"] = ctx.config_hash
        _, train_stats = filter_dataset(fm, train, fm.score(train.X))

        out = ctx.layout.stage1
        artifacts = [
            checkpoint_save(fm.to_bundle(ctx.config_hash), ctx.layout.reward_checkpoint),
            dataset_io.save(survivors, ctx.layout.survivors),
            write_csv(pd.DataFrame(fm.training_log, columns=["step", "loss"]), out / "training_log.csv", ctx.config_hash),
        ]
        histogram = score_histogram(scores, ds.y, cfg.stage1.histogram_bins)
        artifacts.append(write_csv(histogram, out / "score_histogram.csv", ctx.config_hash))
        if cfg.evaluation.plots:
            from evaluation.plots import plot_score_histogram

            artifacts.append(plot_score_histogram(histogram, fm.epsilon, out / "score_histogram.svg"))

        report = Stage1Report(
            epsilon=fm.epsilon,
            target_recall=cfg.stage1.target_recall,
            val_retained_positive_rate=fm.calibration["val_retained_positive_rate"],
            val_removed_negative_rate=fm.calibration["val_removed_negative_rate"],
            val_pair_loss_init=fm.calibration["val_pair_loss_init"],
            val_pair_loss_final=fm.calibration["val_pair_loss_final"],
            train_retained_positive_rate=train_stats.retained_positive_fraction,
            train_removed_negative_rate=train_stats.removed_negative_fraction,
            original_imbalance_ratio=stats.original_imbalance_ratio,
            survivor_imbalance_ratio=stats.survivor_imbalance_ratio,
            n_survivors=stats.n_survivors,
            n_survivor_positive=stats.n_positive,
            n_survivor_negative=stats.n_survivor_negative,
            notes=["single threshold epsilon applied; no secondary reporting threshold"],
        )
        artifacts.append(write_yaml(report, out / "report.yaml", ctx.config_hash))
        return StageResult(success=True, stage=self.name, report=report.model_dump() | {"filter": asdict(stats)}, artifacts=artifacts)


def load_filter(ctx: RunContext) -> FilterModel:
    bundle = checkpoint_load(ctx.layout.reward_checkpoint, ctx.config_hash, STAGE, force=ctx.force)
    return FilterModel.from_bundle(bundle)


registry.stages.register(StageName.STAGE1.value, RewardFilterStage())
