"""Tests for the stage-2 losses, samplers, schedule and training loop."""

import math

import numpy as np
import pytest
import torch

from core.config import BBNConfig
from core.errors import DataIntegrityError, OverFilteringError, ShapeError
from core.gradcheck import grad_check
from core.models import BackboneSpec, BBNModel
from evaluation.metrics import roc_auc
from stages.bbn import (
    alpha_schedule,
    combined_loss,
    cross_entropy,
    focal_loss,
    predict_criticality_stage2,
    train_bbn,
)
from stages.samplers import BranchSampler


def test_focal_loss_value():
    assert focal_loss([0.5], [1]).item() == pytest.approx(0.25 * math.log(2.0), rel=1e-9)
    assert focal_loss([0.5], [0]).item() == pytest.approx(0.25 * math.log(2.0), rel=1e-9)


def test_focal_with_zero_gamma_is_cross_entropy():
    p = torch.tensor([0.1, 0.7, 0.95, 0.3], dtype=torch.float64)
    y = torch.tensor([1, 0, 1, 0])
    torch.testing.assert_close(focal_loss(p, y, gamma=0.0), cross_entropy(p, y))


def test_focal_down_weights_easy_samples():
    easy, hard = focal_loss([0.95], [1]).item(), focal_loss([0.2], [1]).item()
    assert easy / cross_entropy([0.95], [1]).item() < hard / cross_entropy([0.2], [1]).item()


def test_losses_reject_bad_input():
    with pytest.raises(DataIntegrityError):
        focal_loss([float("nan")], [1])
    with pytest.raises(DataIntegrityError):
        cross_entropy([0.5], [2])
    with pytest.raises(ValueError):
        focal_loss([0.5], [1], gamma=-1.0)


def test_combined_loss_endpoints():
    logits = torch.tensor([[0.2, -0.4], [1.5, 0.3], [-0.7, 0.9]], dtype=torch.float64)
    y_a, y_b = torch.tensor([1, 1, 0]), torch.tensor([0, 1, 1])
    p = torch.softmax(logits, dim=-1)[:, 1]
    torch.testing.assert_close(combined_loss(logits, y_a, y_b, 1.0, gamma=2.0), focal_loss(p, y_a, 2.0))
    torch.testing.assert_close(combined_loss(logits, y_a, y_b, 0.0, gamma=2.0), cross_entropy(p, y_b))
    with pytest.raises(ValueError):
        combined_loss(logits, y_a, y_b, 1.2)


def test_combined_loss_gradient():
    logits = torch.tensor([[0.2, -0.4], [1.5, 0.3], [-0.7, 0.9], [0.0, 0.1]], dtype=torch.float64, requires_grad=True)
    y_a, y_b = torch.tensor([1, 0, 0, 1]), torch.tensor([0, 0, 1, 1])

    def loss_fn(params, _):
        return combined_loss(params[0], y_a, y_b, 0.35, gamma=2.0)

    assert grad_check(loss_fn, [logits], None) <= 1e-4


def test_class_balanced_sampler_statistics():
    labels = np.array([1] * 3 + [0] * 997)
    sampler = BranchSampler("class_balanced", labels, np.random.default_rng(0))
    draws = sampler.draw(100_000)
    share = labels[draws].mean()
    assert abs(share - 0.5) < 0.01
    positives = np.bincount(draws[labels[draws] == 1], minlength=3)[:3]
    assert np.all(np.abs(positives / positives.sum() - 1 / 3) < 0.02)


def test_uniform_sampler_follows_class_frequency():
    labels = np.array([1] * 100 + [0] * 900)
    draws = BranchSampler("uniform", labels, np.random.default_rng(1)).draw(100_000)
    assert abs(labels[draws].mean() - 0.1) < 0.01


def test_balanced_sampler_needs_both_classes():
    with pytest.raises(OverFilteringError):
        BranchSampler("class_balanced", np.zeros(10), np.random.default_rng(0))


@pytest.mark.parametrize("kind", ["cosine", "parabolic"])
def test_alpha_schedule_endpoints(kind):
    assert alpha_schedule(0, 10, kind) == pytest.approx(1.0)
    assert alpha_schedule(9, 10, kind) == pytest.approx(0.0, abs=1e-12)
    values = [alpha_schedule(e, 10, kind) for e in range(10)]
    assert values == sorted(values, reverse=True)


def test_alpha_schedule_constant_and_bounds():
    assert alpha_schedule(4, 10, "constant", alpha_max=0.7) == 0.7
    assert alpha_schedule(0, 1, "cosine", alpha_max=0.8) == 0.8
    assert alpha_schedule(9, 10, "cosine", alpha_max=0.9, alpha_min=0.2) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        alpha_schedule(1, 10, "linear")


def _toy_config(**update) -> BBNConfig:
    config = BBNConfig(
        backbone=BackboneSpec(window_len=1, state_dim=1, hidden=[16], d_feat=8),
        d_proj=8,
        epochs=4,
        steps_per_epoch=50,
        batch_size=32,
        lr=1e-2,
        init_from_stage1=False,
    )
    return config.model_copy(update=update)


def test_training_on_single_class_is_refused(toy_train):
    only_negatives = toy_train.subset(toy_train.N)
    with pytest.raises(OverFilteringError):
        train_bbn(only_negatives, None, _toy_config(), seed=0)


def test_training_separates_toy_classes(toy_train, toy_val):
    trained = train_bbn(toy_train, None, _toy_config(), seed=0, val=toy_val)
    assert [row["epoch"] for row in trained.epoch_log] == [0, 1, 2, 3]
    assert trained.epoch_log[0]["alpha"] == pytest.approx(1.0)
    assert trained.final_alpha == pytest.approx(0.0, abs=1e-12)
    assert trained.epoch_log[-1]["val_auc"] >= 0.99
    norms = trained.model.classifier.weight.detach().norm(dim=1)
    torch.testing.assert_close(norms, torch.ones(2), atol=1e-5, rtol=0)
    assert roc_auc(predict_criticality_stage2(trained.model, toy_val.X), toy_val.y) >= 0.99


def test_prediction_is_a_probability(toy_spec):
    torch.manual_seed(0)
    model = BBNModel(toy_spec, d_proj=4)
    X = np.linspace(-2, 2, 9, dtype=np.float32).reshape(-1, 1, 1)
    p = predict_criticality_stage2(model, X)
    assert np.all((p >= 0) & (p <= 1))
    logits = model(torch.from_numpy(X))
    np.testing.assert_allclose(torch.softmax(logits, dim=-1).sum(dim=1).detach().numpy(), 1.0, atol=1e-6)
    with pytest.raises(ShapeError):
        predict_criticality_stage2(model, np.zeros((2, 3, 1), dtype=np.float32))


def test_swapping_branches_with_complementary_alpha():
    torch.manual_seed(0)
    spec = BackboneSpec(window_len=1, state_dim=1, hidden=[8], d_feat=4)
    model = BBNModel(spec, d_proj=4, shared_backbone=True)
    with torch.no_grad():
        model.proj_b.weight.copy_(model.proj_a.weight)
    x_a, x_b = torch.randn(5, 1, 1), torch.randn(5, 1, 1)
    torch.testing.assert_close(model(x_a, x_b, 0.3), model(x_b, x_a, 0.7))
