"""Pydantic report models and the writers that stamp provenance on them."""

from pathlib import Path
from typing import Any

import pandas as pd
import yaml
from pydantic import BaseModel

HASH_PREFIX = "# config_hash: "


class Stage1Report(BaseModel):
    """Stage-1 filter outcome."""

    epsilon: float
    target_recall: float
    val_retained_positive_rate: float
    val_removed_negative_rate: float
    val_pair_loss_init: float
    val_pair_loss_final: float
    train_retained_positive_rate: float
    train_removed_negative_rate: float
    original_imbalance_ratio: float
    survivor_imbalance_ratio: float | None
    n_survivors: int
    n_survivor_positive: int
    n_survivor_negative: int
    notes: list[str] = []


class Stage2Report(BaseModel):
    """Stage-2 BBN outcome."""

    epochs: int
    final_alpha: float
    final_loss: float
    val_auc: float | None
    n_train: int
    n_train_positive: int
    inference_alpha: float


class Stage3Report(BaseModel):
    """Stage-3 dense DQN outcome."""

    steps: int
    n_replay: int
    n_critical_episodes: int
    replay_positive: int
    replay_negative: int
    dataset_imbalance_ratio: float
    replay_imbalance_ratio: float | None
    final_loss: float | None
    grad_norm_pos: float
    grad_norm_neg: float
    decomposition_error: float
    trainable_parameters: list[str]


def write_yaml(data: BaseModel | dict[str, Any], path: str | Path, config_hash: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = data.model_dump(mode="json") if isinstance(data, BaseModel) else dict(data)
    payload["config_hash"] = config_hash
    with open(path, "w") as f:
        yaml.safe_dump(payload, f, sort_keys=True)
    return path


def read_yaml(path: str | Path) -> dict[str, Any]:
    with open(path) as f:
        return yaml.safe_load(f)


def write_csv(frame: pd.DataFrame, path: str | Path, config_hash: str) -> Path:
    """CSV preceded by a ``# config_hash:`` comment line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(f"{HASH_PREFIX}{config_hash}\n")
        frame.to_csv(f, index=False, float_format="%.12g", lineterminator="\n")
    return path


def read_csv(path: str | Path) -> tuple[pd.DataFrame, str | None]:
    path = Path(path)
    with open(path) as f:
        first = f.readline()
    config_hash = first[len(HASH_PREFIX) :].strip() if first.startswith(HASH_PREFIX) else None
    return pd.read_csv(path, skiprows=0 if config_hash is None else 1), config_hash
