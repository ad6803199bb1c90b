"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import dataclasses
import sys

import click

from .config import ConfigError, load_config
from .harness import run_study, summarize


@click.group()
def cli():
    """Curriculum policy-search experiments: run, summarize, validate."""


def _load(config_path, seeds):
    config = load_config(config_path)
    if seeds:
        config = dataclasses.replace(config, seeds=list(seeds))
    return config


@cli.command("run")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seeds", type=int, multiple=True,
              help="Override the config's seed list.")
@click.option("--out-dir", type=click.Path(file_okay=False), default="out",
              show_default=True)
@click.option("--jobs", type=int, default=1, show_default=True,
              help="Seeds to run in parallel.")
@click.option("--debug-trajectories", is_flag=True,
              help="Dump per-iteration rollout trajectories as CSVs.")
def run_cmd(config_path, seeds, out_dir, jobs, debug_trajectories):
    """Run a study and write per-seed CSVs, summary and manifest."""
    config = _load(config_path, seeds)
    summary = run_study(config, out_dir, jobs=jobs,
                        debug_trajectories=debug_trajectories)
    final_reward = summary.eval_reward_quantiles[1, -1]
    final_success = summary.success_rate_quantiles[1, -1]
    click.echo(f"study complete: {len(config.seeds) - len(summary.failed_seeds)}"
               f"/{len(config.seeds)} seeds, final median eval reward "
               f"{final_reward:.4f}, final median success {final_success:.3f}")
    if summary.failed_seeds:
        click.echo(f"failed seeds: {list(summary.failed_seeds)}", err=True)


@cli.command("summarize")
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
def summarize_cmd(run_dir):
    """Print final quantiles for the run CSVs in RUN_DIR."""
    import glob
    import os

    files = sorted(glob.glob(os.path.join(run_dir, "run_seed*.csv")))
    if not files:
        raise ConfigError(f"no run_seed*.csv files in {run_dir}")
    summary = summarize(files)
    q = summary.eval_reward_quantiles
    s = summary.success_rate_quantiles
    click.echo(f"runs: {len(files)}, iterations: {summary.iterations[-1]}")
    click.echo(f"final eval reward q10/q50/q90: "
               f"{q[0, -1]:.4f} / {q[1, -1]:.4f} / {q[2, -1]:.4f}")
    click.echo(f"final success rate q10/q50/q90: "
               f"{s[0, -1]:.3f} / {s[1, -1]:.3f} / {s[2, -1]:.3f}")


@cli.command("validate")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
def validate_cmd(config_path):
    """Check a config file and print the fully resolved settings."""
    config = load_config(config_path)
    for key, value in sorted(config.to_dict().items()):
        click.echo(f"{key}: {value}")


def main():
    try:
        cli.main(standalone_mode=False)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(1)
    except click.ClickException as exc:
        exc.show()
        sys.exit(1)
    except click.Abort:
        sys.exit(1)
    except Exception as exc:  # runtime failure
        click.echo(f"runtime failure: {exc}", err=True)
        sys.exit(2)
    sys.exit(0)


if __name__ == "__main__":
    main()
