"""Seeded multi-run experiment execution, quantile aggregation and export.

A study runs one configuration across its seeds (optionally in parallel),
writes one CSV per seed plus a quantile summary and a machine-readable
manifest.  All output is plain text and byte-stable for a given
(config, seeds) pair.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import __version__
from .config import ExperimentConfig, config_from_dict
from .loop import IterationRecord, initial_state, make_env, run

__all__ = [
    "RUN_COLUMNS",
    "SUMMARY_COLUMNS",
    "StudySummary",
    "run_study",
    "summarize",
    "write_run_csv",
    "read_run_csv",
]

logger = logging.getLogger(__name__)

RUN_COLUMNS = ("k", "mean_reward", "eval_reward", "success_rate", "alpha",
               "kl_to_target", "trust_region_kl")
SUMMARY_COLUMNS = ("k", "eval_reward_q10", "eval_reward_q50",
                   "eval_reward_q90", "success_rate_q10", "success_rate_q50",
                   "success_rate_q90")
QUANTILES = (0.1, 0.5, 0.9)


@dataclass(frozen=True)
class StudySummary:
    iterations: np.ndarray
    eval_reward_quantiles: np.ndarray  # (3, K) rows q10, q50, q90
    success_rate_quantiles: np.ndarray  # (3, K)
    alpha_traces: dict[int, np.ndarray]
    final_samplers: dict[int, tuple[np.ndarray, np.ndarray]]
    failed_seeds: tuple[int, ...] = ()


def _fmt(x) -> str:
    # repr keeps round-trip precision and byte-stable output.
    return repr(float(x))


def write_run_csv(path, records: list[IterationRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RUN_COLUMNS)
        for r in records:
            writer.writerow([
                r.iteration, _fmt(r.mean_reward), _fmt(r.eval_reward),
                _fmt(r.success_rate), _fmt(r.alpha), _fmt(r.kl_to_target),
                _fmt(r.trust_region_kl),
            ])


def read_run_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != RUN_COLUMNS:
            raise ValueError(f"unexpected run CSV header in {path}: {header}")
        rows = [[float(v) for v in row] for row in reader]
    data = np.array(rows)
    return {name: data[:, i] for i, name in enumerate(RUN_COLUMNS)}


def _run_seed_payload(config: ExperimentConfig, seed: int):
    env = make_env(config)
    from .gauss import rng_from_seed
    from .loop import creps_step, sprl_step

    root = np.random.SeedSequence(seed)
    eval_ss, loop_ss = root.spawn(2)
    state = initial_state(config, env, rng_from_seed(eval_ss))
    step = sprl_step if config.algorithm == "sprl" else creps_step
    records = []
    for child in loop_ss.spawn(config.iterations):
        state, record = step(state, env, config, rng_from_seed(child))
        records.append(record)
    return records, (state.sampler.mean.copy(), state.sampler.cov.copy())


def _seed_worker(args):
    config_dict, seed = args
    config = config_from_dict(config_dict)
    return seed, _run_seed_payload(config, seed)


def run_study(config: ExperimentConfig, out_dir, jobs: int = 1,
              debug_trajectories: bool = False) -> StudySummary:
    """Execute all seeds of a study and write run CSVs, a quantile summary
    CSV and a JSON manifest into `out_dir`."""
    os.makedirs(out_dir, exist_ok=True)
    results: dict[int, tuple] = {}
    failed: list[int] = []
    work = [(config.to_dict(), seed) for seed in config.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {seed: pool.submit(_seed_worker, (cfg, seed))
                       for cfg, seed in work}
            for seed, future in futures.items():
                try:
                    results[seed] = future.result()[1]
                except Exception:
                    logger.warning("seed %d failed; excluded from quantiles",
                                   seed, exc_info=True)
                    failed.append(seed)
    else:
        for _, seed in work:
            try:
                results[seed] = _run_seed_payload(config, seed)
            except Exception:
                logger.warning("seed %d failed; excluded from quantiles",
                               seed, exc_info=True)
                failed.append(seed)

    run_files = {}
    for seed in config.seeds:
        if seed not in results:
            continue
        records, _ = results[seed]
        name = f"run_seed{seed}.csv"
        write_run_csv(os.path.join(out_dir, name), records)
        run_files[seed] = name
        if debug_trajectories:
            _dump_trajectories(config, seed, out_dir)

    summary = summarize(
        [os.path.join(out_dir, run_files[s]) for s in sorted(run_files)])
    summary = StudySummary(
        iterations=summary.iterations,
        eval_reward_quantiles=summary.eval_reward_quantiles,
        success_rate_quantiles=summary.success_rate_quantiles,
        alpha_traces=summary.alpha_traces,
        final_samplers={s: results[s][1] for s in sorted(run_files)},
        failed_seeds=tuple(failed),
    )
    _write_summary_csv(os.path.join(out_dir, "summary.csv"), summary)
    manifest = {
        "version": __version__,
        "config": config.to_dict(),
        "seeds": list(config.seeds),
        "failed_seeds": failed,
        "runs": {str(s): run_files[s] for s in sorted(run_files)},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def _write_summary_csv(path, summary: StudySummary) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        for i, k in enumerate(summary.iterations):
            writer.writerow(
                [int(k)]
                + [_fmt(summary.eval_reward_quantiles[j, i] ) for j in range(3)]
                + [_fmt(summary.success_rate_quantiles[j, i]) for j in range(3)]
            )


def summarize(run_files) -> StudySummary:
    """Linear-interpolated 10/50/90% quantiles per iteration across runs."""
    run_files = list(run_files)
    if not run_files:
        raise ValueError("need at least one run file")
    runs = [read_run_csv(path) for path in run_files]
    lengths = {r["k"].size for r in runs}
    if len(lengths) != 1:
        raise ValueError(f"inconsistent iteration counts: {sorted(lengths)}")
    iterations = runs[0]["k"].astype(int)
    rewards = np.stack([r["eval_reward"] for r in runs])
    successes = np.stack([r["success_rate"] for r in runs])
    alphas = {i: r["alpha"] for i, r in enumerate(runs)}
    return StudySummary(
        iterations=iterations,
        eval_reward_quantiles=np.quantile(rewards, QUANTILES, axis=0),
        success_rate_quantiles=np.quantile(successes, QUANTILES, axis=0),
        alpha_traces=alphas,
        final_samplers={},
    )


def _dump_trajectories(config: ExperimentConfig, seed: int, out_dir) -> None:
    """Debug surface: re-simulate one traced rollout per recorded iteration
    with the mean context/policy of a fresh run and dump t,x,y,u CSVs."""
    from .envs import GateEnv
    from .gauss import rng_from_seed
    from .loop import creps_step, sprl_step

    env = make_env(config)
    if not isinstance(env, GateEnv):
        return
    traj_dir = os.path.join(out_dir, "trajectories", f"seed{seed}")
    os.makedirs(traj_dir, exist_ok=True)
    root = np.random.SeedSequence(seed)
    eval_ss, loop_ss = root.spawn(2)
    state = initial_state(config, env, rng_from_seed(eval_ss))
    step = sprl_step if config.algorithm == "sprl" else creps_step
    for k, child in enumerate(loop_ss.spawn(config.iterations), start=1):
        state, _ = step(state, env, config, rng_from_seed(child))
        context = state.sampler.mean
        theta = state.policy.mean_at(context)
        result = env.rollout(theta, context, rng=None,
                             record_trajectory=True)
        path = os.path.join(traj_dir, f"iter{k:04d}.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("t", "x", "y", "u_x", "u_y"))
            for row in result.trajectory:
                writer.writerow([_fmt(v) for v in row])
