"""Environment, dataset and model primitives for the criticality cascade."""

from .dataset import LabeledDataset, build_dataset, imbalance_ratio
from .errors import CriticalityError
from .hazard_env import EnvConfig, Episode, HazardEnv, true_criticality
from .models import BBNModel, ModelBundle, RewardModel

__all__ = [
    "BBNModel",
    "CriticalityError",
    "EnvConfig",
    "Episode",
    "HazardEnv",
    "LabeledDataset",
    "ModelBundle",
    "RewardModel",
    "build_dataset",
    "imbalance_ratio",
    "true_criticality",
]
