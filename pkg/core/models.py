"""Backbone and head contracts shared by every learning stage."""

import copy
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, Field

from .errors import DataIntegrityError, NormalizationError, ShapeError

ACTIVATIONS = {"relu": nn.ReLU, "tanh": nn.Tanh, "gelu": nn.GELU}


class BackboneSpec(BaseModel):
    """Architecture descriptor of a backbone."""

    kind: Literal["mlp", "transformer"] = "mlp"
    window_len: int = Field(10, ge=1)
    state_dim: int = Field(2, ge=1)
    hidden: list[int] = Field(default_factory=lambda: [64, 64, 64])
    d_feat: int = Field(64, ge=1)
    activation: Literal["relu", "tanh", "gelu"] = "relu"
    n_layers: int = Field(2, ge=1)
    n_heads: int = Field(4, ge=1)
    input_mean: list[float] | None = None
    input_scale: list[float] | None = None


class Backbone(nn.Module):
    """Maps a window (window_len x state_dim) to a feature vector of size d_feat."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        d = spec.state_dim
        mean = spec.input_mean if spec.input_mean is not None else [0.0] * d
        scale = spec.input_scale if spec.input_scale is not None else [1.0] * d
        self.register_buffer("input_mean", torch.tensor(mean, dtype=torch.float32))
        self.register_buffer("input_scale", torch.tensor(scale, dtype=torch.float32))
        act = ACTIVATIONS[spec.activation]

        if spec.kind == "mlp":
            layers: list[nn.Module] = [nn.Flatten()]
            width = spec.window_len * d
            for h in spec.hidden:
                layers += [nn.Linear(width, h), act()]
                width = h
            self.body = nn.Sequential(*layers)
            self.final = nn.Linear(width, spec.d_feat)
        else:
            self.embed = nn.Linear(d, spec.d_feat)
            self.position = nn.Parameter(torch.zeros(spec.window_len, spec.d_feat))
            block = nn.TransformerEncoderLayer(
                d_model=spec.d_feat,
                nhead=spec.n_heads,
                dim_feedforward=2 * spec.d_feat,
                dropout=0.0,
                activation=spec.activation if spec.activation != "tanh" else "relu",
                batch_first=True,
            )
            self.body = nn.TransformerEncoder(block, num_layers=spec.n_layers, enable_nested_tensor=False)
            self.final = nn.Linear(spec.d_feat, spec.d_feat)

    def forward(self, X: torch.Tensor) -> torch.Tensor:
        X = (X - self.input_mean.to(X.dtype)) / self.input_scale.to(X.dtype)
        if self.spec.kind == "mlp":
            return self.final(self.body(X))
        h = self.body(self.embed(X) + self.position)
        return self.final(h.mean(dim=1))


class ScalarHead(nn.Module):
    """Linear map from features to an unsquashed scalar."""

    def __init__(self, d_feat: int):
        super().__init__()
        self.linear = nn.Linear(d_feat, 1)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return self.linear(f).squeeze(-1)


class ClassifierHead(nn.Module):
    """Per-class weight vectors; optionally scaled to unit norm before the dot product."""

    def __init__(self, d_in: int, n_classes: int = 2, normalized: bool = True, logit_scale: float = 10.0):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(n_classes, d_in))
        nn.init.kaiming_uniform_(self.weight, a=5**0.5)
        self.normalized = normalized
        self.logit_scale = logit_scale if normalized else 1.0

    def effective_weight(self) -> torch.Tensor:
        if not self.normalized:
            return self.weight
        return self.weight / self.weight.norm(dim=1, keepdim=True)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.logit_scale * (z @ self.effective_weight().T)

    @torch.no_grad()
    def renormalize_(self) -> None:
        if self.normalized:
            norms = self.weight.norm(dim=1, keepdim=True)
            if torch.any(norms == 0):
                raise NormalizationError("classifier weight vector has zero norm")
            self.weight.div_(norms)


def forward_features(backbone: Backbone, X) -> torch.Tensor:
    """Validated backbone call."""
    X = torch.as_tensor(X, dtype=next(backbone.parameters()).dtype)
    expected = (backbone.spec.window_len, backbone.spec.state_dim)
    if X.dim() == 2:
        X = X.unsqueeze(0)
    if X.dim() != 3 or tuple(X.shape[1:]) != expected:
        raise ShapeError(f"expected input (*, {expected[0]}, {expected[1]}), got {tuple(X.shape)}")
    if not torch.isfinite(X).all():
        raise DataIntegrityError("non-finite input to backbone")
    return backbone(X)


def normalize_classifier(head: ClassifierHead) -> ClassifierHead:
    """Copy of ``head`` whose weights have unit Euclidean norm."""
    norms = head.weight.detach().norm(dim=1, keepdim=True)
    if torch.any(norms == 0):
        raise NormalizationError("cannot normalize a zero-norm weight vector")
    out = copy.deepcopy(head)
    with torch.no_grad():
        out.weight.copy_(head.weight / norms)
    out.normalized = True
    return out


def mix_features(f_a, f_b, W_a, W_b, alpha: float) -> torch.Tensor:
    """z = alpha * W_a^T f_a + (1 - alpha) * W_b^T f_b for batched features."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    f_a, f_b = torch.as_tensor(f_a), torch.as_tensor(f_b)
    W_a, W_b = torch.as_tensor(W_a), torch.as_tensor(W_b)
    if f_a.shape[-1] != W_a.shape[0] or f_b.shape[-1] != W_b.shape[0] or W_a.shape[1] != W_b.shape[1]:
        raise ShapeError(f"cannot mix features {tuple(f_a.shape)}, {tuple(f_b.shape)} with {tuple(W_a.shape)}, {tuple(W_b.shape)}")
    return alpha * (f_a @ W_a) + (1.0 - alpha) * (f_b @ W_b)


class RewardModel(nn.Module):
    """Backbone + scalar head, r_theta(x)."""

    kind = "reward"

    def __init__(self, backbone_spec: BackboneSpec):
        super().__init__()
        self.backbone = Backbone(backbone_spec)
        self.head = ScalarHead(backbone_spec.d_feat)

    @property
    def arch(self) -> dict[str, Any]:
        return {"kind": self.kind, "backbone": self.backbone.spec.model_dump()}

    @classmethod
    def from_arch(cls, arch: dict[str, Any]) -> "RewardModel":
        return cls(BackboneSpec(**arch["backbone"]))

    def forward(self, X: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(X))


class BBNModel(nn.Module):
    """Two branches mixed by alpha, followed by a (normalized) classifier."""

    kind = "bbn"

    def __init__(
        self,
        backbone_spec: BackboneSpec,
        d_proj: int = 64,
        shared_backbone: bool = False,
        normalized: bool = True,
        logit_scale: float = 10.0,
        inference_alpha: float = 0.5,
    ):
        super().__init__()
        self.backbone_a = Backbone(backbone_spec)
        self.backbone_b = self.backbone_a if shared_backbone else Backbone(backbone_spec)
        self.proj_a = nn.Linear(backbone_spec.d_feat, d_proj, bias=False)
        self.proj_b = nn.Linear(backbone_spec.d_feat, d_proj, bias=False)
        self.classifier = ClassifierHead(d_proj, normalized=normalized, logit_scale=logit_scale)
        self.shared_backbone = shared_backbone
        self.inference_alpha = inference_alpha
        self.d_proj = d_proj

    @property
    def arch(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "backbone": self.backbone_a.spec.model_dump(),
            "d_proj": self.d_proj,
            "shared_backbone": self.shared_backbone,
            "normalized": self.classifier.normalized,
            "logit_scale": self.classifier.logit_scale,
            "inference_alpha": self.inference_alpha,
        }

    @classmethod
    def from_arch(cls, arch: dict[str, Any]) -> "BBNModel":
        return cls(
            BackboneSpec(**arch["backbone"]),
            d_proj=arch["d_proj"],
            shared_backbone=arch["shared_backbone"],
            normalized=arch["normalized"],
            logit_scale=arch["logit_scale"],
            inference_alpha=arch["inference_alpha"],
        )

    def forward(self, x_a: torch.Tensor, x_b: torch.Tensor | None = None, alpha: float | None = None) -> torch.Tensor:
        x_b = x_a if x_b is None else x_b
        alpha = self.inference_alpha if alpha is None else alpha
        z = mix_features(self.backbone_a(x_a), self.backbone_b(x_b), self.proj_a.weight.T, self.proj_b.weight.T, alpha)
        return self.classifier(z)


class ClassifierModel(nn.Module):
    """Single backbone + linear classifier, used by the baselines."""

    kind = "classifier"

    def __init__(self, backbone_spec: BackboneSpec, normalized: bool = False, logit_scale: float = 10.0):
        super().__init__()
        self.backbone = Backbone(backbone_spec)
        self.classifier = ClassifierHead(backbone_spec.d_feat, normalized=normalized, logit_scale=logit_scale)
        self.bias = nn.Parameter(torch.zeros(2))

    @property
    def arch(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "backbone": self.backbone.spec.model_dump(),
            "normalized": self.classifier.normalized,
            "logit_scale": self.classifier.logit_scale,
        }

    @classmethod
    def from_arch(cls, arch: dict[str, Any]) -> "ClassifierModel":
        return cls(BackboneSpec(**arch["backbone"]), normalized=arch["normalized"], logit_scale=arch["logit_scale"])

    def forward(self, X: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.backbone(X)) + self.bias


MODEL_KINDS: dict[str, type[nn.Module]] = {
    RewardModel.kind: RewardModel,
    BBNModel.kind: BBNModel,
    ClassifierModel.kind: ClassifierModel,
}


def build_model(arch: dict[str, Any]) -> nn.Module:
    try:
        return MODEL_KINDS[arch["kind"]].from_arch(arch)
    except KeyError as e:
        raise DataIntegrityError(f"unknown model kind in descriptor: {arch.get('kind')}") from e


@dataclass
class ModelBundle:
    """A trained model with the metadata that travels with its checkpoint."""

    model: nn.Module
    stage: str
    config_hash: str = ""
    metrics: dict[str, Any] = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def arch(self) -> dict[str, Any]:
        return self.model.arch


@torch.no_grad()
def predict_proba(model: nn.Module, X, batch_size: int = 8192) -> np.ndarray:
    """Positive-class softmax probability for every window in ``X``."""
    model.eval()
    dtype = next(model.parameters()).dtype
    X = np.asarray(X)
    out = np.empty(len(X), dtype=np.float64)
    for start in range(0, len(X), batch_size):
        batch = torch.as_tensor(X[start : start + batch_size], dtype=dtype)
        out[start : start + batch_size] = F.softmax(model(batch), dim=-1)[:, 1].double().numpy()
    return out
