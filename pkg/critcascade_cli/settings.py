"""Process settings and pipeline config loading for the CLI."""

from pathlib import Path
from typing import Any

import yaml
from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from core.config import PipelineConfig
from core.errors import ConfigurationError


class RuntimeSettings(BaseSettings):
    """Knobs read from ``CRITCASCADE_*`` environment variables."""

    model_config = SettingsConfigDict(env_prefix="CRITCASCADE_")

    log_level: str = "INFO"
    torch_threads: int | None = None
    config_path: Path | None = None
    output_dir: Path | None = None


settings = RuntimeSettings()


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> PipelineConfig:
    """YAML file (or nothing) + overrides, validated into a PipelineConfig."""
    data: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            with open(path) as f:
                data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigurationError(f"cannot parse {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path} must hold a mapping at the top level")
    data.update(overrides or {})
    try:
        config = PipelineConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"invalid configuration:\n{e}") from e
    config.env.check()
    return config


def config_as_dict(config: PipelineConfig) -> dict[str, Any]:
    return config.resolved().model_dump(mode="json")


def dump_config(config: PipelineConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(config_as_dict(config), f, sort_keys=True)
    return path


def get_value(data: dict[str, Any], key: str, default: Any = None) -> Any:
    """Lookup by dotted key, e.g. ``stage2.gamma``."""
    value: Any = data
    for k in key.split("."):
        if isinstance(value, dict) and k in value:
            value = value[k]
        else:
            return default
    return value
