#!/usr/bin/env python3
"""Command-line front end for Monte Carlo stochastic-depth experiments.

Run from the repository root as ``python -m scripts.cli <command>``.
"""

import json
import sys
from typing import Any, Callable, Dict, Optional, Tuple, Type

import click
from pydantic import BaseModel

from mcsd.core.config import settings
from mcsd.core.exceptions import McsdError, TrainingDivergedError
from mcsd.core.logging import setup_logging, setup_progress_logging
from mcsd.models import (
    DataRunConfig,
    EvalRunConfig,
    GradCheckRunConfig,
    OodRunConfig,
    TrainRunConfig,
    VerifyRunConfig,
)
from mcsd.pipeline import (
    load_run_config,
    run_eval,
    run_gen_data,
    run_grad_check,
    run_ood,
    run_train,
    run_verify,
)
from mcsd.utils.instrumentation import dump_metrics

EXIT_INPUT = 2
EXIT_NUMERICAL = 3

REGIMES = click.Choice(["DET", "MCDO", "MCSD"], case_sensitive=False)


def _upper(ctx, param, value: Optional[str]) -> Optional[str]:
    return value.upper() if value else value


def _alphas(ctx, param, value: Optional[str]) -> Optional[Tuple[float, ...]]:
    if value is None:
        return None
    try:
        return tuple(float(a) for a in value.split(",") if a.strip())
    except ValueError:
        raise click.BadParameter("expected comma-separated numbers, e.g. 0.1,0.5,0.9")


def common_options(fn: Callable) -> Callable:
    """--config and --out, shared by every command."""
    fn = click.option('--out', type=click.Path(file_okay=False), default='artifacts',
                      show_default=True, help='Output directory')(fn)
    fn = click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
                      help='JSON run configuration')(fn)
    return fn


def mc_options(fn: Callable) -> Callable:
    """Flags of the commands that run the Monte Carlo predictor."""
    fn = click.option('--seed', type=int, default=None, help='Base seed of the MC pass streams')(fn)
    fn = click.option('--passes', '-T', type=int, default=None,
                      help=f'Stochastic forward passes (default {settings.DEFAULT_PASSES})')(fn)
    fn = click.option('--regime', type=REGIMES, default=None, callback=_upper,
                      help='Inference regime (default: the training regime)')(fn)
    fn = click.option('--checkpoint', type=click.Path(dir_okay=False), default=None,
                      help='Checkpoint written by the train command')(fn)
    return fn


def execute(model: Type[BaseModel], config_path: Optional[str], overrides: Dict[str, Any],
            body: Callable[[Any], Dict[str, Any]]) -> Dict[str, Any]:
    """Validate the run configuration, run ``body`` and map failures to exit codes."""
    try:
        cfg = load_run_config(model, config_path, overrides)
        result = body(cfg)
    except TrainingDivergedError as e:
        click.echo(f"❌ Numerical failure: {e}", err=True)
        sys.exit(EXIT_NUMERICAL)
    except (McsdError, ValueError, OSError) as e:
        click.echo(f"❌ {e}", err=True)
        sys.exit(EXIT_INPUT)
    click.echo(json.dumps(result, sort_keys=True))
    return result


@click.group()
@click.option('--log-level', default=None, help='Diagnostic log level (stderr)')
@click.option('--metrics-file', type=click.Path(dir_okay=False), default=None,
              help='Write Prometheus counters here when the command finishes')
@click.pass_context
def cli(ctx: click.Context, log_level: Optional[str], metrics_file: Optional[str]):
    """Monte Carlo stochastic-depth uncertainty toolkit."""
    setup_logging(log_level.upper() if log_level else None)
    if metrics_file:
        ctx.call_on_close(lambda: dump_metrics(metrics_file))


@cli.command()
@common_options
@click.option('--seed', type=int, default=None, help='Training seed')
@click.option('--regime', type=REGIMES, default=None, callback=_upper, help='Training regime')
@click.option('--progress', is_flag=True, help='Stream per-epoch JSON events to stdout')
def train(config_path: Optional[str], out: str, seed: Optional[int], regime: Optional[str],
          progress: bool):
    """Train a residual network and write its checkpoint and report."""
    if progress:
        setup_progress_logging()
    execute(TrainRunConfig, config_path, {"train.seed": seed, "train.regime": regime},
            lambda cfg: run_train(cfg, out, progress=progress))
    click.echo("✅ Training finished", err=True)


@cli.command(name='eval')
@common_options
@mc_options
@click.option('--data', 'data_csv', type=click.Path(dir_okay=False), default=None,
              help='Evaluation CSV (default: test split of the training data)')
@click.option('--bins', type=int, default=None,
              help=f'Reliability bins (default {settings.DEFAULT_BINS})')
def evaluate(config_path: Optional[str], out: str, checkpoint: Optional[str], regime: Optional[str],
             passes: Optional[int], seed: Optional[int], data_csv: Optional[str], bins: Optional[int]):
    """Calibration metrics and reliability bins of the MC predictive distribution."""
    overrides = {"checkpoint": checkpoint, "regime": regime, "passes": passes, "seed": seed,
                 "bins": bins}
    if data_csv:
        overrides["data"] = {"kind": "csv", "path": data_csv}
    execute(EvalRunConfig, config_path, overrides, lambda cfg: run_eval(cfg, out))
    click.echo("✅ Evaluation written", err=True)


@cli.command()
@common_options
@mc_options
@click.option('--in-dist', 'in_csv', type=click.Path(dir_okay=False), default=None,
              help='In-distribution CSV (default: test split of the training data)')
@click.option('--ood', 'ood_csv', type=click.Path(dir_okay=False), default=None,
              help='Out-of-distribution CSV (default: shifted in-distribution data)')
def ood(config_path: Optional[str], out: str, checkpoint: Optional[str], regime: Optional[str],
        passes: Optional[int], seed: Optional[int], in_csv: Optional[str], ood_csv: Optional[str]):
    """Predictive-entropy CDFs of in-distribution and shifted data."""
    overrides = {"checkpoint": checkpoint, "regime": regime, "passes": passes, "seed": seed}
    if in_csv:
        overrides["in_dist"] = {"kind": "csv", "path": in_csv}
    if ood_csv:
        overrides["ood"] = {"kind": "csv", "path": ood_csv}
    execute(OodRunConfig, config_path, overrides, lambda cfg: run_ood(cfg, out))
    click.echo("✅ Entropy CDFs written", err=True)


@cli.command()
@common_options
@mc_options
@click.option('--pairs', 'pairs_csv', type=click.Path(dir_okay=False), default=None,
              help='CSV of (accomplice, impostor) pairs')
@click.option('--synthetic', is_flag=True,
              help='Generate mirror-prototype pairs from the seed')
@click.option('--alphas', default=None, callback=_alphas, help='Comma-separated blending factors')
@click.option('--far', type=float, default=None,
              help=f'False acceptance rate target (default {settings.DEFAULT_FAR})')
@click.option('--threshold', type=float, default=None, help='Fixed threshold instead of FAR calibration')
def verify(config_path: Optional[str], out: str, checkpoint: Optional[str], regime: Optional[str],
           passes: Optional[int], seed: Optional[int], pairs_csv: Optional[str],
           synthetic: Optional[bool], alphas: Optional[Tuple[float, ...]], far: Optional[float],
           threshold: Optional[float]):
    """FAR-calibrated threshold and morphing-attack blend sweep."""
    overrides = {"checkpoint": checkpoint, "regime": regime, "passes": passes, "seed": seed,
                 "pairs_csv": pairs_csv, "synthetic": True if synthetic else None, "alphas": alphas,
                 "far_target": far, "threshold": threshold}
    execute(VerifyRunConfig, config_path, overrides, lambda cfg: run_verify(cfg, out))
    click.echo("✅ Verification sweep written", err=True)


@cli.command(name='gen-data')
@common_options
@click.option('--kind', type=click.Choice(["moons", "blobs", "mirror"]), default=None,
              help='Generator')
@click.option('--n', type=int, default=None, help='Number of samples')
@click.option('--noise', type=float, default=None, help='Two-moons noise level')
@click.option('--seed', type=int, default=None, help='Generator seed')
@click.option('--n-pairs', type=int, default=None, help='Verification pairs (mirror only)')
def gen_data(config_path: Optional[str], out: str, kind: Optional[str], n: Optional[int],
             noise: Optional[float], seed: Optional[int], n_pairs: Optional[int]):
    """Write a toy dataset as CSV with a metadata sidecar."""
    overrides = {"data.kind": kind, "data.n": n, "data.noise": noise, "data.seed": seed,
                 "n_pairs": n_pairs}
    execute(DataRunConfig, config_path, overrides, lambda cfg: run_gen_data(cfg, out))
    click.echo("✅ Dataset written", err=True)


@cli.command(name='grad-check')
@common_options
@click.option('--seed', type=int, default=None, help='Network and batch seed')
@click.option('--sample-gates', is_flag=True, help='Freeze a sampled gate mask')
def grad_check(config_path: Optional[str], out: str, seed: Optional[int],
               sample_gates: Optional[bool]):
    """Finite-difference check of the training objective's gradient."""
    result = execute(GradCheckRunConfig, config_path, {"seed": seed, "sample_gates": True if sample_gates else None},
                     lambda cfg: run_grad_check(cfg, out))
    if not result["passed"]:
        click.echo(f"❌ Gradient check failed: {result['max_relative_error']:.3e}", err=True)
        sys.exit(EXIT_NUMERICAL)
    click.echo("✅ Gradient check passed", err=True)


if __name__ == '__main__':
    cli()
