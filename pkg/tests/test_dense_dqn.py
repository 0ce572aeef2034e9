"""Tests for the stage-3 replay, Bellman targets and dense DQN fine-tuning."""

import copy

import numpy as np
import pytest
import torch
import torch.nn as nn

from core.config import DenseDQNConfig, PipelineConfig
from core.dataset import CriticalEpisodeIndex, build_dataset, critical_episode_index, imbalance_ratio
from core.errors import ConfigurationError, UsageError
from core.gradcheck import grad_check
from core.hazard_env import calibrate_rarity, generate_episodes
from core.models import BackboneSpec, BBNModel
from stages.dense_dqn import (
    Replay,
    bellman_targets,
    build_replay,
    dense_dqn_loss,
    dqn_target,
    finetune,
    gradient_balance_report,
    resolve_scope,
)


class ZeroLogits(nn.Module):
    """Q(s) = 0.5 everywhere."""

    def __init__(self):
        super().__init__()
        self.linear = nn.Linear(1, 2)
        nn.init.zeros_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)

    def forward(self, X):
        return self.linear(X.reshape(len(X), -1)[:, :1])


@pytest.fixture
def replay_setup(busy_env):
    episodes = generate_episodes(busy_env, 80, seed=5)
    ds = build_dataset(episodes, window_len=3, horizon=busy_env.horizon_h)
    return ds, build_replay(critical_episode_index(ds, episodes))


@pytest.fixture
def q_model():
    torch.manual_seed(0)
    return BBNModel(BackboneSpec(window_len=3, state_dim=2, hidden=[16], d_feat=8), d_proj=8)


def _rows(replay: Replay, n: int) -> Replay:
    return replay.subset(np.arange(n))


def test_replay_holds_one_reward_per_episode(replay_setup):
    ds, replay = replay_setup
    n_episodes = len(set(replay.episode_ids))
    assert replay.r.sum() == n_episodes
    np.testing.assert_array_equal(replay.r[replay.terminal], 1.0)
    n_pos, n_neg = replay.counts()
    assert n_pos == int(replay.labels.sum()) and n_pos + n_neg == len(replay)
    assert n_neg / n_pos < imbalance_ratio(ds)


def test_empty_index_is_refused():
    with pytest.raises(UsageError):
        build_replay(CriticalEpisodeIndex())


def test_target_bootstraps_from_next_state(replay_setup):
    _, replay = replay_setup
    live = replay.subset(np.flatnonzero(~replay.terminal)[:4])
    y = bellman_targets(live, ZeroLogits(), 0.99)
    torch.testing.assert_close(y, torch.full((4,), 0.495))
    assert dqn_target(live[0], ZeroLogits(), 0.99) == pytest.approx(0.495)


def test_terminal_target_is_reward(replay_setup):
    _, replay = replay_setup
    terminal = replay.subset(np.flatnonzero(replay.terminal))
    np.testing.assert_array_equal(bellman_targets(terminal, ZeroLogits(), 0.99).numpy(), 1.0)
    assert dqn_target(terminal[0], ZeroLogits(), 0.99) == 1.0


def test_zero_discount_target_is_reward(replay_setup, q_model):
    _, replay = replay_setup
    y = bellman_targets(replay, q_model, 0.0)
    np.testing.assert_array_equal(y.numpy(), replay.r)


def test_rows_outside_critical_episodes_are_ignored(replay_setup, q_model):
    _, replay = replay_setup
    batch = _rows(replay, 12)
    noise = batch.subset(np.arange(6))
    noise.in_critical = np.zeros(6, dtype=bool)
    noise.X = noise.X + 5.0
    noise.r = np.ones(6, dtype=np.float32)
    mixed = Replay.concat([noise.subset([0, 1, 2]), batch, noise.subset([3, 4, 5])])

    clean = dense_dqn_loss(batch, q_model, q_model, 0.99)
    (grad_clean,) = torch.autograd.grad(clean, [q_model.classifier.weight])
    dirty = dense_dqn_loss(mixed, q_model, q_model, 0.99)
    (grad_dirty,) = torch.autograd.grad(dirty, [q_model.classifier.weight])
    assert clean.item() == dirty.item()
    assert torch.equal(grad_clean, grad_dirty)


def test_gradient_decomposes_into_class_terms(replay_setup, q_model):
    _, replay = replay_setup
    balance = gradient_balance_report(replay, q_model, gamma=0.99)
    assert balance.decomposition_error <= 1e-8
    assert balance.n_pos == replay.counts()[0]
    assert balance.grad_norm_pos > 0 and balance.grad_norm_neg > 0


def test_positive_only_batch_has_no_negative_gradient(replay_setup, q_model):
    _, replay = replay_setup
    positives = replay.subset(np.flatnonzero(replay.labels == 1))
    balance = gradient_balance_report(positives, q_model, scope=["classifier.*"])
    assert balance.n_neg == 0 and balance.grad_norm_neg == 0.0
    assert balance.parameters == ["classifier.weight"]


def test_zero_steps_leave_model_unchanged(replay_setup, q_model):
    _, replay = replay_setup
    bundle = finetune(q_model, replay, DenseDQNConfig(steps=0))
    for (name, before), after in zip(q_model.state_dict().items(), bundle.model.state_dict().values()):
        assert torch.equal(before, after), name


def test_frozen_parameters_stay_bit_identical(replay_setup, q_model):
    _, replay = replay_setup
    config = DenseDQNConfig(steps=30, batch_size=16, lr=1e-2, target_sync_period=10, log_every=10, finetune_scope=["classifier.*"], seed=0)
    log: list[dict] = []
    bundle = finetune(q_model, replay, config, config_hash="h", log=log)
    after = bundle.model.state_dict()
    for name, before in q_model.state_dict().items():
        if name.startswith("classifier."):
            assert not torch.equal(before, after[name])
        else:
            assert torch.equal(before, after[name]), name
    assert bundle.stage == "stage3" and bundle.extra["finetune_scope"] == ["classifier.weight"]
    assert len(log) == 30
    assert log[9]["grad_norm_pos"] is not None and log[0]["grad_norm_pos"] is None
    norms = bundle.model.classifier.weight.detach().norm(dim=1)
    torch.testing.assert_close(norms, torch.ones(2), atol=1e-5, rtol=0)


def test_unknown_scope_is_a_configuration_error(q_model):
    with pytest.raises(ConfigurationError):
        resolve_scope(q_model, ["decoder.*"])


def test_dense_dqn_loss_gradient_with_frozen_target(replay_setup):
    _, replay = replay_setup
    torch.manual_seed(1)
    spec = BackboneSpec(window_len=3, state_dim=2, hidden=[16], d_feat=8, activation="tanh")
    model = BBNModel(spec, d_proj=8, logit_scale=1.0).double()
    target = copy.deepcopy(model)
    for param in target.parameters():
        param.requires_grad_(False)
    rows = np.union1d(np.linspace(0, len(replay) - 1, 56).astype(np.int64), np.flatnonzero(replay.terminal)[:8])
    batch = replay.subset(rows)
    assert batch.terminal.any() and not batch.terminal.all()
    params = list(model.parameters())
    assert sum(p.numel() for p in params) >= 200

    def loss_fn(_, rows):
        return dense_dqn_loss(rows, model, target, 0.9)

    assert grad_check(loss_fn, params, batch, n_coords=200) <= 1e-4


@pytest.mark.slow
def test_default_experiment_replay_is_balanced():
    """Critical episodes of the default run carry negatives, but far fewer than the dataset."""
    cfg = PipelineConfig().resolved()
    params = cfg.dataset
    env, _ = calibrate_rarity(cfg.env, params.target_critical_rate, params.n_pilot_episodes, seed=params.train_seed)
    episodes = generate_episodes(env, params.n_train_episodes, params.train_seed)
    ds = build_dataset(episodes, params.window_len, params.horizon)
    n_pos, n_neg = build_replay(critical_episode_index(ds, episodes)).counts()
    assert imbalance_ratio(ds) >= 1e4
    assert n_neg > 0
    assert n_neg / n_pos <= 50
