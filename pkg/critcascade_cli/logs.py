"""Logging setup and log viewing commands."""

import logging
from pathlib import Path

import click

from .settings import load_config, settings

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

_installed: list[logging.Handler] = []


def setup_logging(log_file: Path | None = None, level: str | None = None) -> None:
    """Stream handler plus an optional file handler on the root logger."""
    root = logging.getLogger()
    for handler in _installed:
        root.removeHandler(handler)
        handler.close()
    _installed.clear()

    formatter = logging.Formatter(LOG_FORMAT)
    handlers: list[logging.Handler] = [logging.StreamHandler()]
    if log_file is not None:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file))
    for handler in handlers:
        handler.setFormatter(formatter)
        root.addHandler(handler)
        _installed.append(handler)
    root.setLevel((level or settings.log_level).upper())


@click.group(name="logs")
def logs_group():
    """View pipeline logs."""
    pass


@logs_group.command(name="show")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="Pipeline config file")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Run directory")
@click.option("--lines", "-n", default=50, help="Number of lines")
def show_logs(config_path: str | None, out_dir: str | None, lines: int):
    """Show the tail of a run's pipeline log."""
    if out_dir is None:
        out_dir = settings.output_dir or load_config(config_path or settings.config_path).output_dir
    log_file = Path(out_dir) / "logs" / "pipeline.log"
    if not log_file.exists():
        click.echo(f"No logs found at {log_file}")
        return
    for line in log_file.read_text().splitlines()[-lines:]:
        click.echo(line)
