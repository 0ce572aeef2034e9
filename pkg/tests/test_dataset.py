"""Tests for dataset construction, persistence and the critical-episode index."""

import numpy as np
import pytest
import yaml

from core import dataset as dataset_io
from core.dataset import (
    Standardizer,
    build_dataset,
    critical_episode_index,
    episode_labels,
    episode_windows,
    imbalance_ratio,
    split_by_episode,
)
from core.errors import ChecksumError, DataIntegrityError, FormatVersionError, UndefinedMetricError, UsageError
from core.hazard_env import Episode, generate_episodes


def _episode(length: int, critical: bool, episode_id: str = "e0") -> Episode:
    states = np.stack([np.linspace(0.0, 0.5, length + 1), np.zeros(length + 1)], axis=1)
    if critical:
        states[-1, 0] = 1.2
    return Episode(episode_id=episode_id, states=states, actions=-0.2 * states[:-1], critical=critical)


def test_labels_mark_last_horizon_steps():
    ep = _episode(10, critical=True)
    np.testing.assert_array_equal(episode_labels(ep, 3), [0, 0, 0, 0, 0, 0, 0, 1, 1, 1])
    assert episode_labels(_episode(10, critical=False), 3).sum() == 0


def test_short_critical_episode_is_all_positive():
    ep = _episode(2, critical=True)
    np.testing.assert_array_equal(episode_labels(ep, 6), [1, 1])


def test_windows_repeat_first_state():
    states = np.arange(5, dtype=float)[:, None]
    windows = episode_windows(states, 3)
    assert windows.shape == (4, 3, 1)
    np.testing.assert_array_equal(windows[0, :, 0], [0, 0, 0])
    np.testing.assert_array_equal(windows[1, :, 0], [0, 0, 1])
    np.testing.assert_array_equal(windows[3, :, 0], [1, 2, 3])


def test_build_dataset_counts_and_order():
    episodes = [_episode(8, False, "b"), _episode(5, True, "a")]
    ds = build_dataset(episodes, window_len=4, horizon=2)
    assert len(ds) == 13
    assert ds.X.shape == (13, 4, 2)
    assert list(ds.episode_ids[:5]) == ["a"] * 5
    assert len(ds.P) == 2
    assert imbalance_ratio(ds) == pytest.approx(11 / 2)
    assert ds.counts()["n_negative"] == 11


def test_build_dataset_rejects_bad_arguments():
    with pytest.raises(UsageError):
        build_dataset([], window_len=2, horizon=2)
    with pytest.raises(UsageError):
        build_dataset([_episode(3, False)], window_len=0, horizon=2)


def test_build_dataset_rejects_episodes_without_steps():
    with pytest.raises(UsageError):
        build_dataset([_episode(0, False, "a"), _episode(0, False, "b")], window_len=2, horizon=2)


def test_labels_and_windows_match_raw_episodes(busy_env):
    """Relabel random samples straight from the episodes."""
    episodes = {ep.episode_id: ep for ep in generate_episodes(busy_env, 120, seed=6)}
    window_len, horizon = 4, busy_env.horizon_h
    ds = build_dataset(list(episodes.values()), window_len=window_len, horizon=horizon)
    assert len(ds.P) > 0
    rng = np.random.default_rng(0)
    picks = np.concatenate([rng.choice(ds.P, size=min(50, len(ds.P)), replace=False), rng.integers(len(ds), size=250)])
    for i in picks:
        sample = ds[int(i)]
        ep = episodes[sample.episode_id]
        k = sample.step_index
        event_step = ep.length if ep.critical else None
        expected = int(event_step is not None and event_step - k <= horizon)
        assert sample.y == expected
        assert sample.is_critical_episode == ep.critical
        rows = [ep.states[max(j, 0)] for j in range(k - window_len + 1, k + 1)]
        np.testing.assert_array_equal(sample.X, np.array(rows, dtype=np.float32))
    assert len(ds.P) + len(ds.N) == len(ds)
    assert np.intersect1d(ds.P, ds.N).size == 0


def test_imbalance_ratio_needs_positives():
    ds = build_dataset([_episode(4, False)], window_len=2, horizon=2)
    with pytest.raises(UndefinedMetricError):
        imbalance_ratio(ds)


def test_save_load_round_trip(tmp_path, busy_env):
    episodes = generate_episodes(busy_env, 30, seed=2)
    ds = build_dataset(episodes, window_len=5, horizon=6, manifest={"seed": 2})
    dataset_io.save(ds, tmp_path / "ds")
    loaded = dataset_io.load(tmp_path / "ds")
    np.testing.assert_array_equal(loaded.X, ds.X)
    np.testing.assert_array_equal(loaded.y, ds.y)
    np.testing.assert_array_equal(loaded.steps, ds.steps)
    assert list(loaded.episode_ids) == list(ds.episode_ids)
    assert loaded.manifest["seed"] == 2
    assert loaded.horizon == 6


def test_save_is_byte_reproducible(tmp_path, busy_env):
    ds = build_dataset(generate_episodes(busy_env, 20, seed=9), window_len=3, horizon=4)
    dataset_io.save(ds, tmp_path / "one")
    dataset_io.save(ds, tmp_path / "two")
    for name in (dataset_io.SAMPLES_FILE, dataset_io.MANIFEST_FILE):
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()


def test_load_detects_tampering(tmp_path):
    ds = build_dataset([_episode(6, True)], window_len=2, horizon=2)
    path = dataset_io.save(ds, tmp_path / "ds")
    samples = path / dataset_io.SAMPLES_FILE
    samples.write_text(samples.read_text().replace(",1,True", ",0,True", 1))
    with pytest.raises(ChecksumError):
        dataset_io.load(path)


def test_load_refuses_unknown_format(tmp_path):
    path = dataset_io.save(build_dataset([_episode(3, False)], window_len=2, horizon=2), tmp_path / "ds")
    manifest = yaml.safe_load((path / dataset_io.MANIFEST_FILE).read_text())
    manifest["format_version"] = 99
    (path / dataset_io.MANIFEST_FILE).write_text(yaml.safe_dump(manifest))
    with pytest.raises(FormatVersionError):
        dataset_io.load(path)


def test_critical_episode_index_rewards(busy_env):
    episodes = generate_episodes(busy_env, 60, seed=1)
    ds = build_dataset(episodes, window_len=4, horizon=6)
    index = critical_episode_index(ds, episodes)
    critical = [ep for ep in episodes if ep.critical]
    assert len(index) == len(critical) > 0
    for ep in critical:
        entry = index.episodes[ep.episode_id]
        assert len(entry) == ep.length
        assert entry.rewards.sum() == 1.0 and entry.rewards[-1] == 1.0
        assert entry.terminal[-1] and not entry.terminal[:-1].any()
        np.testing.assert_array_equal(entry.X[1:], entry.X_next[:-1])
        np.testing.assert_array_equal(entry.X_next[-1, -1], ep.states[-1].astype(np.float32))


def test_critical_episode_index_detects_mismatch(busy_env):
    episodes = generate_episodes(busy_env, 20, seed=1)
    ds = build_dataset(episodes, window_len=4, horizon=6)
    with pytest.raises(DataIntegrityError):
        critical_episode_index(ds, episodes[:-1])
    other = generate_episodes(busy_env, 20, seed=2)
    with pytest.raises(DataIntegrityError):
        critical_episode_index(ds, other)


def test_split_by_episode_keeps_episodes_whole(busy_env):
    episodes = generate_episodes(busy_env, 80, seed=4)
    ds = build_dataset(episodes, window_len=3, horizon=6)
    train, val = split_by_episode(ds, 0.25, seed=0)
    assert len(train) + len(val) == len(ds)
    assert not set(train.episode_ids) & set(val.episode_ids)
    assert len(train.P) > 0 and len(val.P) > 0


def test_standardizer_centers_train_split(busy_env):
    ds = build_dataset(generate_episodes(busy_env, 20, seed=0), window_len=2, horizon=6)
    scaler = Standardizer.fit(ds)
    flat = scaler.transform(ds.X.astype(np.float64)).reshape(-1, ds.state_dim)
    np.testing.assert_allclose(flat.mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(flat.std(axis=0), 1.0, atol=1e-6)
