"""Configuration commands."""

from pathlib import Path

import click
import yaml

from core.config import PipelineConfig
from core.errors import CriticalityError

from .settings import config_as_dict, dump_config, get_value, load_config, settings

MISSING = object()


@click.group(name="config")
def config_group():
    """Inspect and create pipeline configuration files."""
    pass


@config_group.command()
@click.argument("key", required=False)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="Pipeline config file")
@click.option("--seed", type=int, default=None, help="Override the global seed")
def show(key: str | None, config_path: str | None, seed: int | None):
    """Show the effective configuration, or one dotted KEY of it."""
    overrides = {} if seed is None else {"seed": seed}
    try:
        config = load_config(config_path or settings.config_path, overrides)
    except CriticalityError as e:
        click.echo(f"Error: {e}", err=True)
        raise SystemExit(e.exit_code)
    data = config_as_dict(config)
    if key is None:
        click.echo(yaml.safe_dump(data, sort_keys=True).rstrip())
        click.echo(f"# config_hash: {config.config_hash()}")
        return
    value = get_value(data, key, MISSING)
    if value is MISSING:
        click.echo(f"Unknown key: {key}", err=True)
        raise SystemExit(2)
    click.echo(yaml.safe_dump(value, sort_keys=True).rstrip() if isinstance(value, (dict, list)) else value)


@config_group.command()
@click.argument("path", type=click.Path(dir_okay=False))
@click.option("--force", is_flag=True, help="Overwrite an existing file")
def init(path: str, force: bool):
    """Write a fully defaulted configuration to PATH."""
    if Path(path).exists() and not force:
        click.echo(f"Error: {path} already exists (use --force)", err=True)
        raise SystemExit(2)
    dump_config(PipelineConfig(), path)
    click.echo(f"Configuration written to {path}")
