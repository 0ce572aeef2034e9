"""Labeled, history-windowed samples built from episodes."""

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

import numpy as np
import pandas as pd
import yaml

from .errors import (
    ChecksumError,
    DataIntegrityError,
    FormatVersionError,
    UndefinedMetricError,
    UsageError,
)
from .hazard_env import Episode

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
SAMPLES_FILE = "samples.csv"
MANIFEST_FILE = "manifest.yaml"
# Nine significant digits round-trip any float32.
FLOAT_FORMAT = "%.9g"


@dataclass
class Sample:
    """One windowed state with its label."""

    X: np.ndarray
    y: int
    episode_id: str
    step_index: int
    is_critical_episode: bool


@dataclass
class LabeledDataset:
    """Column-oriented sample store ordered by (episode_id, step_index)."""

    X: np.ndarray
    y: np.ndarray
    episode_ids: np.ndarray
    steps: np.ndarray
    critical: np.ndarray
    manifest: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int8)
        if not np.isin(self.y, (0, 1)).all():
            raise DataIntegrityError("labels must be 0 or 1")
        self.P = np.flatnonzero(self.y == 1)
        self.N = np.flatnonzero(self.y == 0)

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i: int) -> Sample:
        return Sample(
            X=self.X[i],
            y=int(self.y[i]),
            episode_id=str(self.episode_ids[i]),
            step_index=int(self.steps[i]),
            is_critical_episode=bool(self.critical[i]),
        )

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    @property
    def window_len(self) -> int:
        return self.X.shape[1]

    @property
    def state_dim(self) -> int:
        return self.X.shape[2]

    @property
    def horizon(self) -> int:
        return int(self.manifest["horizon"])

    def subset(self, indices: np.ndarray) -> "LabeledDataset":
        """Rows at ``indices`` (kept in dataset order)."""
        idx = np.sort(np.asarray(indices, dtype=np.int64))
        return LabeledDataset(
            X=self.X[idx],
            y=self.y[idx],
            episode_ids=self.episode_ids[idx],
            steps=self.steps[idx],
            critical=self.critical[idx],
            manifest=dict(self.manifest),
        )

    def counts(self) -> dict[str, Any]:
        return {
            "n_samples": len(self),
            "n_positive": int(len(self.P)),
            "n_negative": int(len(self.N)),
            "imbalance_ratio": imbalance_ratio(self) if len(self.P) else None,
        }


@dataclass
class EpisodeTransitions:
    """(s, a, r, s') tuples of one critical episode, s and s' windowed."""

    episode_id: str
    states: np.ndarray
    actions: np.ndarray
    X: np.ndarray
    X_next: np.ndarray
    rewards: np.ndarray
    terminal: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)


@dataclass
class CriticalEpisodeIndex:
    """Critical episodes keyed by id, in dataset order."""

    episodes: dict[str, EpisodeTransitions] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.episodes)

    def __contains__(self, episode_id: str) -> bool:
        return episode_id in self.episodes

    @property
    def episode_ids(self) -> set[str]:
        return set(self.episodes)


def window_indices(n_steps: int, window_len: int) -> np.ndarray:
    """State indices of each step's window; early steps repeat state 0."""
    offsets = np.arange(window_len) - (window_len - 1)
    return np.clip(np.arange(n_steps)[:, None] + offsets[None, :], 0, None)


def episode_windows(states: np.ndarray, window_len: int, n_steps: int | None = None) -> np.ndarray:
    """Windows ending at states 0..n_steps-1 (defaults to every non-final state)."""
    n = len(states) - 1 if n_steps is None else n_steps
    return states[window_indices(n, window_len)]


def episode_labels(episode: Episode, horizon: int) -> np.ndarray:
    """y_k = 1 iff the event happens within ``horizon`` steps after step k."""
    k = np.arange(episode.length)
    if not episode.critical:
        return np.zeros(episode.length, dtype=np.int8)
    return ((episode.length - k) <= horizon).astype(np.int8)


def build_dataset(
    episodes: list[Episode],
    window_len: int,
    horizon: int,
    manifest: dict[str, Any] | None = None,
) -> LabeledDataset:
    """One sample per (episode, step), sorted by (episode_id, step)."""
    if not episodes:
        raise UsageError("build_dataset needs at least one episode")
    if window_len < 1 or horizon < 1:
        raise UsageError("window_len and horizon must be >= 1")

    ordered = sorted(episodes, key=lambda e: e.episode_id)
    state_dim = ordered[0].states.shape[1]
    blocks_x, blocks_y, ids, steps, critical = [], [], [], [], []
    for ep in ordered:
        if ep.length == 0:
            continue
        blocks_x.append(episode_windows(ep.states, window_len).astype(np.float32))
        blocks_y.append(episode_labels(ep, horizon))
        ids.append(np.full(ep.length, ep.episode_id, dtype=object))
        steps.append(np.arange(ep.length, dtype=np.int64))
        critical.append(np.full(ep.length, ep.critical))
    if not blocks_x:
        raise UsageError(f"none of the {len(episodes)} episodes has a step to label")

    info = dict(manifest or {})
    info.update({"window_len": window_len, "horizon": horizon, "state_dim": state_dim, "n_episodes": len(episodes)})
    ds = LabeledDataset(
        X=np.concatenate(blocks_x),
        y=np.concatenate(blocks_y),
        episode_ids=np.concatenate(ids),
        steps=np.concatenate(steps),
        critical=np.concatenate(critical),
        manifest=info,
    )
    logger.info("Built dataset: %d samples, |P|=%d, |N|=%d", len(ds), len(ds.P), len(ds.N))
    return ds


def imbalance_ratio(ds: LabeledDataset) -> float:
    """|N| / |P|."""
    if len(ds.P) == 0:
        raise UndefinedMetricError("imbalance ratio is undefined without positives")
    return len(ds.N) / len(ds.P)


def _episode_slices(ds: LabeledDataset) -> dict[str, slice]:
    ids, first, counts = np.unique(ds.episode_ids.astype(str), return_index=True, return_counts=True)
    return {eid: slice(int(f), int(f + c)) for eid, f, c in zip(ids, first, counts)}


def critical_episode_index(ds: LabeledDataset, episodes: list[Episode]) -> CriticalEpisodeIndex:
    """Index critical episodes as transitions with r = 1 only on entering A."""
    slices = _episode_slices(ds)
    horizon, window_len = ds.horizon, ds.window_len
    if len(slices) != sum(1 for ep in episodes if ep.length > 0):
        raise DataIntegrityError(f"dataset holds {len(slices)} episodes, {len(episodes)} supplied")
    index = CriticalEpisodeIndex()
    for ep in sorted(episodes, key=lambda e: e.episode_id):
        if ep.length == 0:
            continue
        rows = slices.get(ep.episode_id)
        if rows is None or rows.stop - rows.start != ep.length:
            raise DataIntegrityError(f"episode {ep.episode_id} does not match the dataset")
        labels = ds.y[rows]
        if not np.array_equal(labels, episode_labels(ep, horizon)):
            raise DataIntegrityError(f"labels of episode {ep.episode_id} disagree with the dataset")
        if not ep.critical:
            continue
        windows = episode_windows(ep.states, window_len, ep.length + 1).astype(np.float32)
        if not np.array_equal(windows[:-1], ds.X[rows]):
            raise DataIntegrityError(f"windows of episode {ep.episode_id} disagree with the dataset")
        if labels[-1] != 1:
            raise DataIntegrityError(f"critical episode {ep.episode_id} lacks a positive terminal sample")
        rewards = np.zeros(ep.length, dtype=np.float32)
        rewards[-1] = 1.0
        terminal = np.zeros(ep.length, dtype=bool)
        terminal[-1] = True
        index.episodes[ep.episode_id] = EpisodeTransitions(
            episode_id=ep.episode_id,
            states=ep.states,
            actions=ep.actions,
            X=windows[:-1],
            X_next=windows[1:],
            rewards=rewards,
            terminal=terminal,
            labels=labels.copy(),
        )
    logger.info("Critical episode index: %d episodes", len(index))
    return index


def split_by_episode(ds: LabeledDataset, val_fraction: float, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Episode-level split stratified on the critical flag."""
    rng = np.random.default_rng(seed)
    slices = _episode_slices(ds)
    ids = sorted(slices)
    crit = [e for e in ids if ds.critical[slices[e].start]]
    calm = [e for e in ids if not ds.critical[slices[e].start]]
    val_ids: list[str] = []
    for group in (crit, calm):
        if not group:
            continue
        n_val = int(round(val_fraction * len(group)))
        if len(group) >= 2:
            n_val = min(max(n_val, 1), len(group) - 1)
        val_ids.extend(rng.permutation(group)[:n_val].tolist())
    in_val = np.isin(ds.episode_ids.astype(str), np.array(val_ids, dtype=str))
    return ds.subset(np.flatnonzero(~in_val)), ds.subset(np.flatnonzero(in_val))


@dataclass
class Standardizer:
    """Per-dimension affine standardization fit on a train split."""

    mean: list[float]
    scale: list[float]

    @classmethod
    def fit(cls, ds: LabeledDataset) -> "Standardizer":
        flat = ds.X.reshape(-1, ds.state_dim).astype(np.float64)
        std = flat.std(axis=0)
        return cls(mean=flat.mean(axis=0).tolist(), scale=np.where(std > 0, std, 1.0).tolist())

    def transform(self, X: np.ndarray) -> np.ndarray:
        return ((X - np.asarray(self.mean)) / np.asarray(self.scale)).astype(X.dtype)


def _columns(window_len: int, state_dim: int) -> list[str]:
    return [f"x_{r}_{c}" for r in range(window_len) for c in range(state_dim)]


def file_checksum(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def save(ds: LabeledDataset, path: str | Path) -> Path:
    """Write ``samples.csv`` + ``manifest.yaml`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n, w, d = ds.X.shape
    frame = pd.DataFrame(ds.X.reshape(n, w * d), columns=_columns(w, d))
    frame.insert(0, "step", ds.steps)
    frame.insert(0, "episode_id", ds.episode_ids.astype(str))
    frame["y"] = ds.y
    frame["critical_episode"] = ds.critical.astype(bool)
    samples_path = path / SAMPLES_FILE
    frame.to_csv(samples_path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")

    manifest = dict(ds.manifest)
    manifest.update(ds.counts())
    manifest.update({"format_version": FORMAT_VERSION, "x_shape": [w, d], "checksum": file_checksum(samples_path)})
    with open(path / MANIFEST_FILE, "w") as f:
        yaml.safe_dump(manifest, f, sort_keys=True)
    return path


def read_manifest(path: str | Path) -> dict[str, Any]:
    manifest_path = Path(path) / MANIFEST_FILE
    with open(manifest_path) as f:
        return yaml.safe_load(f)


def load(path: str | Path) -> LabeledDataset:
    """Read a dataset directory; refuse on version or checksum mismatch."""
    path = Path(path)
    manifest = read_manifest(path)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatVersionError(f"dataset format {manifest.get('format_version')} != {FORMAT_VERSION}")
    samples_path = path / SAMPLES_FILE
    if file_checksum(samples_path) != manifest.get("checksum"):
        raise ChecksumError(f"checksum mismatch for {samples_path}")

    w, d = manifest["x_shape"]
    frame = pd.read_csv(samples_path, dtype={"episode_id": str}, float_precision="round_trip")
    X = frame[_columns(w, d)].to_numpy(dtype=np.float64).astype(np.float32).reshape(-1, w, d)
    for key in ("checksum", "format_version", "x_shape", "n_samples", "n_positive", "n_negative", "imbalance_ratio"):
        manifest.pop(key, None)
    return LabeledDataset(
        X=X,
        y=frame["y"].to_numpy(dtype=np.int8),
        episode_ids=frame["episode_id"].to_numpy(dtype=object),
        steps=frame["step"].to_numpy(dtype=np.int64),
        critical=frame["critical_episode"].to_numpy(dtype=bool),
        manifest=manifest,
    )
