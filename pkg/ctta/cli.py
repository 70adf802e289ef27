import logging
from pathlib import Path
from typing import Optional

import click

from . import settings
from .ablation import run_ablation, run_sweep
from .emit_report import emit_report, emit_table
from .errors import AdaptationError, ConfigError, ContractError, DimensionError, DomainError, PretrainingError
from .model_config import AdaptationConfig, BaselineKind, ModelConfig, PretrainConfig, load_config_file
from .model_scenario import BaseTask, ScenarioConfig, load_scenario, standard_scenario
from .pretrain_source import pretrain_source
from .run_generalization import run_generalization
from .run_scenario import run_scenario

logger = logging.getLogger(__name__)

HANDLED = (AdaptationError, ConfigError, ContractError, DimensionError, DomainError, PretrainingError,
           ValueError, FloatingPointError, OSError)

scenario_option = click.option("--scenario", "scenario_path", type=click.Path(dir_okay=False),
                               help="Scenario TOML/JSON; defaults to the standard five-domain sequence.")
config_option = click.option("--config", "config_path", type=click.Path(dir_okay=False),
                             help="AdaptationConfig TOML/JSON.")
checkpoint_option = click.option("--checkpoint", required=True, type=click.Path(dir_okay=False))
output_option = click.option("--output-dir", type=click.Path(file_okay=False), default=None,
                             help="Defaults to $CTTA_OUTPUT_DIR.")
seed_option = click.option("--seed", type=int, default=None)


def _fail(message: str) -> None:
    raise click.ClickException(message)


def _output_dir(value: Optional[str]) -> Path:
    return Path(value or settings.OUTPUT_DIR)


def _scenario(path: Optional[str]) -> ScenarioConfig:
    return load_scenario(path) if path else standard_scenario()


def _adaptation(path: Optional[str]) -> AdaptationConfig:
    return load_config_file(path, AdaptationConfig) if path else AdaptationConfig()


def _seeds(spec: str) -> list[int]:
    try:
        return [int(s) for s in spec.split(",") if s.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {spec!r}")


@click.group()
@click.option("--log-level", default=None, help="Overrides $CTTA_LOG_LEVEL.")
def cli(log_level: Optional[str]) -> None:
    """Continual test-time adaptation experiments."""
    settings.configure_logging(log_level)


@cli.command()
@click.option("--model-config", type=click.Path(dir_okay=False), help="ModelConfig TOML/JSON.")
@click.option("--pretrain-config", type=click.Path(dir_okay=False), help="PretrainConfig TOML/JSON.")
@click.option("--task-config", type=click.Path(dir_okay=False), help="BaseTask TOML/JSON.")
@seed_option
@output_option
def pretrain(model_config, pretrain_config, task_config, seed, output_dir):
    """Fit the source model and write checkpoint.json."""
    try:
        task = load_config_file(task_config, BaseTask) if task_config else BaseTask()
        model_cfg = load_config_file(model_config, ModelConfig) if model_config else ModelConfig()
        cfg = load_config_file(pretrain_config, PretrainConfig) if pretrain_config else PretrainConfig()
        result = pretrain_source(task, model_cfg, cfg, seed or 0, _output_dir(output_dir) / "checkpoint.json")
    except HANDLED as e:
        _fail(str(e))
    click.echo(f"{result.checkpoint_path}: {result.diagnostic}")
    if not result.passed:
        _fail(result.diagnostic)


def _run_command(runner, operation: str, checkpoint, scenario_path, config_path, seed, output_dir, baseline, fmt):
    try:
        report = runner(checkpoint, _scenario(scenario_path), _adaptation(config_path), baseline, seed)
        path = emit_report(report, fmt, _output_dir(output_dir) / f"{operation}-{report.baseline.value}-{report.seed}.{fmt}")
    except HANDLED as e:
        _fail(str(e))
    summary = f"{path}: mean error {report.mean_error:.4f}"
    if report.generalization_mean is not None:
        summary += f", held-out error {report.generalization_mean:.4f}"
    click.echo(summary)


def _run_options(func):
    for option in reversed([
        checkpoint_option, scenario_option, config_option, seed_option, output_option,
        click.option("--baseline", type=click.Choice([b.value for b in BaselineKind]), default=BaselineKind.FULL.value),
        click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="json"),
    ]):
        func = option(func)
    return func


@cli.command()
@_run_options
def run(checkpoint, scenario_path, config_path, seed, output_dir, baseline, fmt):
    """Adapt online over a scenario and write the report."""
    _run_command(run_scenario, "run", checkpoint, scenario_path, config_path, seed, output_dir, baseline, fmt)


@cli.command()
@_run_options
def generalize(checkpoint, scenario_path, config_path, seed, output_dir, baseline, fmt):
    """Adapt over the seen domains, then evaluate the held-out ones frozen."""
    _run_command(run_generalization, "generalize", checkpoint, scenario_path, config_path, seed, output_dir,
                 baseline, fmt)


@cli.command()
@checkpoint_option
@scenario_option
@config_option
@output_option
@click.option("--seeds", default="0,1,2,3,4", show_default=True)
@click.option("--workers", type=click.IntRange(min=1), default=1, show_default=True)
def ablate(checkpoint, scenario_path, config_path, output_dir, seeds, workers):
    """Run every component-ablation row over several seeds."""
    try:
        table = run_ablation(checkpoint, _scenario(scenario_path), _adaptation(config_path), _seeds(seeds),
                             workers=workers)
        path = emit_table(table, _output_dir(output_dir) / "ablation.json")
    except HANDLED as e:
        _fail(str(e))
    click.echo(str(path))
    for row in table.rows:
        click.echo(f"{row.baseline.value:<20} {row.mean_error:.4f}")


@cli.command()
@checkpoint_option
@scenario_option
@config_option
@output_option
@click.option("--parameter", type=click.Choice(["threshold", "queue_capacity"]), required=True)
@click.option("--values", default="", help="Comma-separated; defaults to the built-in grid.")
@click.option("--seeds", default="0,1,2", show_default=True)
@click.option("--workers", type=click.IntRange(min=1), default=1, show_default=True)
def sweep(checkpoint, scenario_path, config_path, output_dir, parameter, values, seeds, workers):
    """Sweep the change threshold or the queue capacity."""
    try:
        grid = [float(v) for v in values.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated numbers, got {values!r}")
    try:
        table = run_sweep(checkpoint, _scenario(scenario_path), _adaptation(config_path), parameter, grid,
                          _seeds(seeds), workers=workers)
        path = emit_table(table, _output_dir(output_dir) / f"sweep-{parameter}.json")
    except HANDLED as e:
        _fail(str(e))
    click.echo(f"{path}: spread {table.spread:.4f}")


def main() -> None:
    cli()


if __name__ == "__main__":
    main()
