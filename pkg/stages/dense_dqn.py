"""Stage 3: offline dense DQN fine-tuning on critical episodes only.

The Q-value of a windowed state is the positive-class probability of the
stage-2 classifier. The scripted policy is deterministic and its action is a
function of the state, so the max over next actions reduces to scoring the
next window.
"""

import copy
import logging
from dataclasses import dataclass, field
from fnmatch import fnmatch

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F

from core import dataset as dataset_io
from core.checkpoint import checkpoint_load, checkpoint_save
from core.config import DenseDQNConfig
from core.dataset import CriticalEpisodeIndex, critical_episode_index, imbalance_ratio
from core.errors import ConfigurationError, DataIntegrityError, TrainingDivergenceError, UsageError
from core.models import BBNModel, ModelBundle
from core.reports import Stage3Report, write_csv, write_yaml
from core.seeding import seed_everything

from . import registry
from .base import BaseStage, RunContext, StageName, StageResult

logger = logging.getLogger(__name__)

STAGE = "stage3"


@dataclass
class Transition:
    """(s, a, r, s') with s and s' windowed."""

    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    terminal: bool
    episode_id: str
    in_critical_episode: bool = True
    label: int = 0


@dataclass
class Replay:
    """Column store of transitions; immutable once built."""

    X: np.ndarray
    A: np.ndarray
    r: np.ndarray
    X_next: np.ndarray
    terminal: np.ndarray
    episode_ids: np.ndarray
    in_critical: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.r)

    def __getitem__(self, i: int) -> Transition:
        return Transition(
            s=self.X[i],
            a=self.A[i],
            r=float(self.r[i]),
            s_next=self.X_next[i],
            terminal=bool(self.terminal[i]),
            episode_id=str(self.episode_ids[i]),
            in_critical_episode=bool(self.in_critical[i]),
            label=int(self.labels[i]),
        )

    def transitions(self) -> list[Transition]:
        return [self[i] for i in range(len(self))]

    def subset(self, indices) -> "Replay":
        idx = np.asarray(indices, dtype=np.int64)
        return Replay(*(getattr(self, name)[idx] for name in self.__dataclass_fields__))

    @classmethod
    def concat(cls, parts: list["Replay"]) -> "Replay":
        return cls(*(np.concatenate([getattr(p, name) for p in parts]) for name in cls.__dataclass_fields__))

    def shuffled(self, seed: int) -> "Replay":
        return self.subset(np.random.default_rng(seed).permutation(len(self)))

    def counts(self) -> tuple[int, int]:
        """(N_p, N_n') over the critical-episode rows."""
        labels = self.labels[self.in_critical]
        return int(np.sum(labels == 1)), int(np.sum(labels == 0))


def build_replay(index: CriticalEpisodeIndex) -> Replay:
    """All transitions of the indexed critical episodes, in index order."""
    if len(index) == 0:
        raise UsageError("no critical episodes: the replay for dense DQN would be empty")
    parts = []
    for ep in index.episodes.values():
        n = len(ep)
        parts.append(
            Replay(
                X=ep.X,
                A=ep.actions.astype(np.float32),
                r=ep.rewards,
                X_next=ep.X_next,
                terminal=ep.terminal,
                episode_ids=np.full(n, ep.episode_id, dtype=object),
                in_critical=np.ones(n, dtype=bool),
                labels=ep.labels.astype(np.int8),
            )
        )
    replay = Replay.concat(parts)
    logger.info("Replay: %d transitions from %d critical episodes", len(replay), len(index))
    return replay


def q_values(model: nn.Module, X) -> torch.Tensor:
    """Positive-class probability used as Q(s, a)."""
    dtype = next(model.parameters()).dtype
    q = F.softmax(model(torch.as_tensor(np.asarray(X), dtype=dtype)), dim=-1)[:, 1]
    if not torch.isfinite(q).all():
        raise DataIntegrityError("non-finite Q values")
    return q


@torch.no_grad()
def bellman_targets(batch: Replay, target_model: nn.Module, gamma: float) -> torch.Tensor:
    """r for terminal rows, r + gamma * Q_target(s') otherwise; clamped to [0, 1]."""
    dtype = next(target_model.parameters()).dtype
    r = torch.as_tensor(batch.r, dtype=dtype)
    terminal = torch.as_tensor(batch.terminal)
    bootstrap = torch.zeros_like(r)
    live = ~terminal
    if live.any():
        bootstrap[live] = q_values(target_model, batch.X_next[live.numpy()])
    return torch.where(terminal, r, r + gamma * bootstrap).clamp(0.0, 1.0)


def dqn_target(transition: Transition, target_model: nn.Module, gamma: float) -> float:
    if transition.terminal:
        return float(min(max(transition.r, 0.0), 1.0))
    with torch.no_grad():
        q_next = q_values(target_model, transition.s_next[None]).item()
    return float(min(max(transition.r + gamma * q_next, 0.0), 1.0))


def dense_dqn_loss(batch: Replay, model: nn.Module, target_model: nn.Module, gamma: float) -> torch.Tensor:
    """Sum of squared Bellman errors over rows from critical episodes.

    Other rows are dropped before the forward pass, so they change neither the
    value nor the gradient.
    """
    rows = batch.subset(np.flatnonzero(batch.in_critical))
    if len(rows) == 0:
        return sum(p.sum() * 0.0 for p in model.parameters() if p.requires_grad)
    y = bellman_targets(rows, target_model, gamma)
    q = q_values(model, rows.X)
    return ((y - q) ** 2).sum()


def resolve_scope(model: nn.Module, patterns: list[str]) -> list[str]:
    names = [name for name, _ in model.named_parameters() if any(fnmatch(name, p) for p in patterns)]
    if not names:
        raise ConfigurationError(f"finetune_scope {patterns} matches no parameter of the model")
    return names


def check_q_head(model: nn.Module) -> None:
    """The stage-2 model must expose a two-class classifier to act as a Q-network."""
    if not isinstance(model, BBNModel) or model.classifier.weight.shape[0] != 2:
        raise UsageError(f"stage 3 needs a two-class BBN checkpoint, got {type(model).__name__}")


def finetune(
    model: nn.Module,
    replay: Replay,
    config: DenseDQNConfig,
    config_hash: str = "",
    log: list[dict] | None = None,
) -> ModelBundle:
    """Fine-tune the scoped parameters of a copy of ``model``; the rest stay bit-identical."""
    if len(replay) == 0:
        raise UsageError("dense DQN needs a non-empty replay")
    model = copy.deepcopy(model)
    scope = set(resolve_scope(model, config.finetune_scope))
    for name, param in model.named_parameters():
        param.requires_grad_(name in scope)
    trainable = [p for name, p in model.named_parameters() if name in scope]
    classifier = getattr(model, "classifier", None)
    renormalize = classifier is not None and classifier.weight.requires_grad

    rng = seed_everything(config.seed if config.seed is not None else 0)
    optimizer = torch.optim.Adam(trainable, lr=config.lr)
    target = copy.deepcopy(model).eval()
    for param in target.parameters():
        param.requires_grad_(False)
    model.eval()

    recent: list[float] = []
    for step in range(1, config.steps + 1):
        batch = replay.subset(rng.integers(len(replay), size=config.batch_size))
        loss = dense_dqn_loss(batch, model, target, config.gamma)
        if not torch.isfinite(loss):
            raise TrainingDivergenceError(STAGE, step, recent[-5:])
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if renormalize:
            classifier.renormalize_()
        if step % config.target_sync_period == 0:
            target.load_state_dict(model.state_dict())
        recent.append(loss.item())
        if log is not None:
            n_pos, n_neg = batch.counts()
            row = {"step": step, "loss": loss.item(), "n_pos": n_pos, "n_neg": n_neg, "grad_norm_pos": None, "grad_norm_neg": None}
            if step % config.log_every == 0:
                balance = gradient_balance_report(batch, model, target, config.gamma, config.finetune_scope)
                row.update(grad_norm_pos=balance.grad_norm_pos, grad_norm_neg=balance.grad_norm_neg)
            log.append(row)
        if step % config.log_every == 0:
            logger.info("stage3 step %d/%d loss %.5f", step, config.steps, loss.item())

    for param in model.parameters():
        param.requires_grad_(True)
    return ModelBundle(model=model, stage=STAGE, config_hash=config_hash, extra={"finetune_scope": sorted(scope)})


@dataclass
class GradientBalance:
    n_pos: int
    n_neg: int
    grad_norm_pos: float
    grad_norm_neg: float
    decomposition_error: float
    parameters: list[str] = field(default_factory=list)


def _grads(loss: torch.Tensor, params: list[torch.Tensor]) -> list[torch.Tensor]:
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def _norm(grads: list[torch.Tensor]) -> float:
    return float(torch.sqrt(sum((g**2).sum() for g in grads)))


def gradient_balance_report(
    batch: Replay,
    model: nn.Module,
    target_model: nn.Module | None = None,
    gamma: float = 0.99,
    scope: list[str] | None = None,
) -> GradientBalance:
    """Split the loss gradient into positive-sample and negative-sample terms.

    Runs on float64 copies. Positive rows are the samples labelled 1 in the
    dataset; negative rows are the remaining critical-episode transitions.
    """
    model64 = copy.deepcopy(model).double()
    target64 = copy.deepcopy(target_model if target_model is not None else model).double()
    for param in target64.parameters():
        param.requires_grad_(False)
    names = resolve_scope(model64, scope) if scope else [n for n, _ in model64.named_parameters()]
    lookup = dict(model64.named_parameters())
    params = [lookup[n].requires_grad_(True) for n in names]

    rows = batch.subset(np.flatnonzero(batch.in_critical))
    pos = rows.labels == 1

    def term(mask: np.ndarray) -> list[torch.Tensor]:
        if not mask.any():
            return [torch.zeros_like(p) for p in params]
        return _grads(dense_dqn_loss(rows.subset(np.flatnonzero(mask)), model64, target64, gamma), params)

    g_pos = term(pos)
    g_neg = term(~pos)
    g_total = term(np.ones(len(rows), dtype=bool))
    error = _norm([gp + gn - gt for gp, gn, gt in zip(g_pos, g_neg, g_total)])
    return GradientBalance(
        n_pos=int(pos.sum()),
        n_neg=int((~pos).sum()),
        grad_norm_pos=_norm(g_pos),
        grad_norm_neg=_norm(g_neg),
        decomposition_error=error,
        parameters=names,
    )


class DenseDQNStage(BaseStage):
    name = StageName.STAGE3
    description = "Fine-tune the stage-2 classifier head with dense DQN"

    def requires(self, ctx: RunContext):
        return [
            (ctx.layout.bbn_checkpoint, "run `critcascade stage2` first"),
            (ctx.layout.data("train") / dataset_io.MANIFEST_FILE, "run `critcascade generate` first"),
        ]

    def outputs(self, ctx: RunContext):
        return [ctx.layout.dqn_checkpoint, ctx.layout.stage3 / "report.yaml"]

    def run(self, ctx: RunContext) -> StageResult:
        cfg = ctx.config.stage3
        ds = ctx.load_dataset(ctx.layout.data("train"))
        index = critical_episode_index(ds, ctx.episodes("train"))
        replay = build_replay(index)
        stage2 = checkpoint_load(ctx.layout.bbn_checkpoint, ctx.config_hash, "stage2", force=ctx.force)
        check_q_head(stage2.model)

        step_log: list[dict] = []
        bundle = finetune(stage2.model, replay, cfg, ctx.config_hash, log=step_log)
        before = gradient_balance_report(replay, stage2.model, gamma=cfg.gamma, scope=cfg.finetune_scope)
        after = gradient_balance_report(replay, bundle.model, gamma=cfg.gamma, scope=cfg.finetune_scope)
        n_pos, n_neg = replay.counts()
        bundle.metrics = {"grad_norm_pos": after.grad_norm_pos, "grad_norm_neg": after.grad_norm_neg}

        balance = pd.DataFrame(
            [
                {"model": name, "n_pos": b.n_pos, "n_neg": b.n_neg, "grad_norm_pos": b.grad_norm_pos,
                 "grad_norm_neg": b.grad_norm_neg, "decomposition_error": b.decomposition_error}
                for name, b in (("stage2", before), ("stage3", after))
            ]
        )
        report = Stage3Report(
            steps=cfg.steps,
            n_replay=len(replay),
            n_critical_episodes=len(index),
            replay_positive=n_pos,
            replay_negative=n_neg,
            dataset_imbalance_ratio=imbalance_ratio(ds),
            replay_imbalance_ratio=n_neg / n_pos if n_pos else None,
            final_loss=step_log[-1]["loss"] if step_log else None,
            grad_norm_pos=after.grad_norm_pos,
            grad_norm_neg=after.grad_norm_neg,
            decomposition_error=after.decomposition_error,
            trainable_parameters=bundle.extra["finetune_scope"],
        )
        out = ctx.layout.stage3
        columns = ["step", "loss", "n_pos", "n_neg", "grad_norm_pos", "grad_norm_neg"]
        artifacts = [
            checkpoint_save(bundle, ctx.layout.dqn_checkpoint),
            write_csv(pd.DataFrame(step_log, columns=columns), out / "step_log.csv", ctx.config_hash),
            write_csv(balance, out / "gradient_balance.csv", ctx.config_hash),
            write_yaml(report, out / "report.yaml", ctx.config_hash),
        ]
        return StageResult(success=True, stage=self.name, report=report.model_dump(), artifacts=artifacts)


registry.stages.register(StageName.STAGE3.value, DenseDQNStage())
