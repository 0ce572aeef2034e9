"""Main CLI application for the criticality cascade pipeline."""

import functools
import sys
from pathlib import Path

import click
import torch

from core.errors import CriticalityError
from core.reports import read_yaml
from evaluation.report import load_comparison
from stages import RunContext, StageResult, stages

from .config import config_group
from .logs import logs_group, setup_logging
from .settings import dump_config, load_config, settings


def pipeline_options(f):
    """--config/--out/--seed/--force shared by every pipeline command."""

    @click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="Pipeline config file (YAML)")
    @click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Output directory")
    @click.option("--seed", type=int, default=None, help="Override the global seed")
    @click.option("--force", is_flag=True, help="Overwrite outputs and accept provenance mismatches")
    @functools.wraps(f)
    def wrapper(config_path, out_dir, seed, force, **kwargs):
        try:
            ctx = build_context(config_path, out_dir, seed, force)
            return f(ctx, **kwargs)
        except CriticalityError as e:
            click.echo(f"Error: {e}", err=True)
            sys.exit(e.exit_code)

    return wrapper


def build_context(config_path: str | None, out_dir: str | None, seed: int | None, force: bool) -> RunContext:
    overrides = {} if seed is None else {"seed": seed}
    config = load_config(config_path or settings.config_path, overrides)
    out = Path(out_dir or settings.output_dir or config.output_dir)
    config = config.model_copy(update={"output_dir": str(out)})
    ctx = RunContext(config=config, out_dir=out, force=force)
    setup_logging(ctx.layout.log_file)
    if settings.torch_threads:
        torch.set_num_threads(settings.torch_threads)
    return ctx


def run_stage(ctx: RunContext, name: str) -> StageResult:
    result = stages.get(name)(ctx)
    dump_config(ctx.config, ctx.layout.effective_config)
    return result


@click.group()
def app():
    """critcascade - rare-event criticality prediction with a three-stage cascade."""
    pass


@app.command()
@pipeline_options
def generate(ctx: RunContext):
    """Simulate episodes and write the train/test datasets."""
    result = run_stage(ctx, "generate")
    for split, counts in result.report.items():
        ir = counts["imbalance_ratio"]
        click.echo(
            f"{split}: |P|={counts['n_positive']} |N|={counts['n_negative']} "
            f"IR={'undefined' if ir is None else f'{ir:.1f}'} critical episodes={counts['n_critical_episodes']}"
        )
    click.echo(f"Datasets written to {ctx.layout.root / 'data'} (config {ctx.config_hash[:12]})")


@app.command()
@pipeline_options
def stage1(ctx: RunContext):
    """Train the reward model and filter easy negatives."""
    report = run_stage(ctx, "stage1").report
    click.echo(f"epsilon: {report['epsilon']:.6g}")
    click.echo(f"val retained positives: {report['val_retained_positive_rate']:.4f}")
    click.echo(f"val removed negatives: {report['val_removed_negative_rate']:.4f}")
    click.echo(f"survivors: {report['n_survivors']} (IR {report['original_imbalance_ratio']:.1f} -> {report['survivor_imbalance_ratio']:.1f})")


@app.command()
@pipeline_options
def stage2(ctx: RunContext):
    """Train the enhanced BBN on the stage-1 survivors."""
    report = run_stage(ctx, "stage2").report
    click.echo(f"final loss: {report['final_loss']:.5f}  final alpha: {report['final_alpha']:.3f}")
    click.echo(f"val AUC: {report['val_auc']}")


@app.command()
@pipeline_options
def stage3(ctx: RunContext):
    """Fine-tune the classifier head with dense DQN."""
    report = run_stage(ctx, "stage3").report
    click.echo(f"replay: {report['n_replay']} transitions, N_p={report['replay_positive']} N_n'={report['replay_negative']}")
    click.echo(f"dataset IR: {report['dataset_imbalance_ratio']:.1f}  replay IR: {report['replay_imbalance_ratio']}")
    click.echo(f"gradient norms: pos={report['grad_norm_pos']:.4g} neg={report['grad_norm_neg']:.4g}")


def _echo_table(ctx: RunContext) -> None:
    table = load_comparison(ctx)
    columns = ["name", "status", "auc", "average_precision", "pos_rate", "neg_rate", "pos_rate_f1", "neg_rate_f1", "calibration_error"]
    click.echo(table[columns].to_string(index=False))


@app.command()
@pipeline_options
def evaluate(ctx: RunContext):
    """Compare cascades and baselines on the test split."""
    run_stage(ctx, "evaluate")
    _echo_table(ctx)
    click.echo(f"Report written to {ctx.layout.evaluation}")


@app.command()
@pipeline_options
def report(ctx: RunContext):
    """Print the comparison table of a finished evaluation."""
    _echo_table(ctx)
    summary = ctx.layout.evaluation / "summary.yaml"
    if summary.exists():
        stage1 = read_yaml(summary).get("stage1", {})
        for key, value in sorted(stage1.items()):
            click.echo(f"stage1 {key}: {value}")


app.add_command(config_group, name="config")
app.add_command(logs_group, name="logs")


def main():
    """Entry point for the CLI."""
    app()


if __name__ == "__main__":
    main()
