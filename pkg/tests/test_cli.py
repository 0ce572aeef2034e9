"""Tests for the critcascade command line."""

import pandas as pd
import pytest
import yaml
from click.testing import CliRunner

from core import dataset as dataset_io
from core.reports import read_csv, read_yaml
from critcascade_cli.main import app

SMALL_BACKBONE = {"hidden": [16], "d_feat": 8}

TINY_CONFIG = {
    "seed": 7,
    "env": {"noise_support": [-0.03, 0.0, 0.03], "init_spread": 0.2, "rarity_scale": 2.5, "episode_len_max": 60},
    "dataset": {"window_len": 3, "n_train_episodes": 150, "n_test_episodes": 80, "calibrate_rarity": False},
    "stage1": {"backbone": SMALL_BACKBONE, "steps": 150, "batch_size": 64, "lr": 1e-2, "log_every": 50},
    "stage2": {"backbone": SMALL_BACKBONE, "d_proj": 8, "epochs": 2, "steps_per_epoch": 40, "batch_size": 32, "lr": 1e-2},
    "stage3": {"steps": 20, "batch_size": 16, "log_every": 10, "target_sync_period": 5},
    "baselines": {"backbone": SMALL_BACKBONE, "steps": 60, "classifier_steps": 20, "batch_size": 64},
    "evaluation": {"calibration_max_states": 40, "plots": False},
}


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY_CONFIG))
    return path


def _run(runner, *args):
    return runner.invoke(app, list(args), catch_exceptions=False)


def test_generate_is_byte_reproducible(runner, config_file, tmp_path):
    for name in ("one", "two"):
        result = _run(runner, "generate", "--config", str(config_file), "--out", str(tmp_path / name))
        assert result.exit_code == 0, result.output
        assert "train: |P|=" in result.output
    for split in ("train", "test"):
        for name in (dataset_io.SAMPLES_FILE, dataset_io.MANIFEST_FILE):
            first = (tmp_path / "one" / "data" / split / name).read_bytes()
            assert first == (tmp_path / "two" / "data" / split / name).read_bytes()


def test_generate_refuses_to_overwrite(runner, config_file, tmp_path):
    out = str(tmp_path / "run")
    assert _run(runner, "generate", "--config", str(config_file), "--out", out).exit_code == 0
    assert _run(runner, "generate", "--config", str(config_file), "--out", out).exit_code == 2
    assert _run(runner, "generate", "--config", str(config_file), "--out", out, "--force").exit_code == 0


def test_seed_changes_the_data(runner, config_file, tmp_path):
    _run(runner, "generate", "--config", str(config_file), "--out", str(tmp_path / "a"))
    _run(runner, "generate", "--config", str(config_file), "--out", str(tmp_path / "b"), "--seed", "8")
    first = (tmp_path / "a" / "data" / "train" / dataset_io.SAMPLES_FILE).read_bytes()
    assert first != (tmp_path / "b" / "data" / "train" / dataset_io.SAMPLES_FILE).read_bytes()


def test_stage3_before_stage2_is_missing_prerequisite(runner, config_file, tmp_path):
    out = str(tmp_path / "run")
    _run(runner, "generate", "--config", str(config_file), "--out", out)
    result = _run(runner, "stage3", "--config", str(config_file), "--out", out)
    assert result.exit_code == 3
    assert "bbn_model.ckpt" in result.output


def test_stage_refuses_other_config(runner, config_file, tmp_path):
    out = str(tmp_path / "run")
    _run(runner, "generate", "--config", str(config_file), "--out", out)
    assert _run(runner, "stage1", "--config", str(config_file), "--out", out, "--seed", "99").exit_code == 2


def test_invalid_config_exits_with_usage_code(runner, tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"env": {"noise_probs": [0.9, 0.9, 0.9]}}))
    result = _run(runner, "generate", "--config", str(bad), "--out", str(tmp_path / "run"))
    assert result.exit_code == 2


def test_config_show_and_init(runner, config_file, tmp_path):
    result = _run(runner, "config", "show", "stage2.gamma", "--config", str(config_file))
    assert result.exit_code == 0 and result.output.strip() == "2.0"
    result = _run(runner, "config", "show", "dataset.test_seed", "--config", str(config_file))
    assert result.output.strip() == str(7 + 1_000_003)
    assert _run(runner, "config", "show", "stage9.nothing").exit_code == 2

    target = tmp_path / "default.yaml"
    assert _run(runner, "config", "init", str(target)).exit_code == 0
    assert yaml.safe_load(target.read_text())["stage3"]["gamma"] == 0.99
    assert _run(runner, "config", "init", str(target)).exit_code == 2


def test_config_show_reports_invalid_file(runner, tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"env": {"noise_probs": [0.9, 0.9, 0.9]}}))
    result = _run(runner, "config", "show", "--config", str(bad))
    assert result.exit_code == 2
    assert "noise_probs" in result.output
    assert _run(runner, "config", "show", "--config", str(tmp_path / "absent.yaml")).exit_code == 2


@pytest.mark.slow
def test_full_pipeline(runner, config_file, tmp_path):
    out = tmp_path / "run"
    for command in ("generate", "stage1", "stage2", "stage3", "evaluate"):
        result = _run(runner, command, "--config", str(config_file), "--out", str(out))
        assert result.exit_code == 0, f"{command}: {result.output}"

    stage1 = read_yaml(out / "stage1" / "report.yaml")
    assert stage1["n_survivors"] > 0 and stage1["survivor_imbalance_ratio"] <= stage1["original_imbalance_ratio"]
    stage3 = read_yaml(out / "stage3" / "report.yaml")
    assert stage3["replay_negative"] / stage3["replay_positive"] < stage3["dataset_imbalance_ratio"]
    assert stage3["decomposition_error"] <= 1e-8

    table, config_hash = read_csv(out / "evaluation" / "comparison.csv")
    assert config_hash == read_yaml(out / "evaluation" / "summary.yaml")["config_hash"]
    assert set(table["name"]) == {"stage2_cascade", "stage3_cascade", "bbn", "cbs", "decoupling", "no_filter"}
    ok = table[table["status"] == "ok"]
    assert pd.api.types.is_numeric_dtype(ok["auc"]) and ok["auc"].between(0, 1).all()
    assert ok["calibration_error"].notna().all()

    result = _run(runner, "report", "--config", str(config_file), "--out", str(out))
    assert result.exit_code == 0 and "stage2_cascade" in result.output
    assert (out / "effective_config.yaml").exists()
    assert "stage1 step" in (out / "logs" / "pipeline.log").read_text()
