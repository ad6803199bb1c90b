"""Outer iteration loops: rollout collection, buffering, dual optimization,
weight computation and the joint refit of policy and sampling distribution.

Two step functions share the same skeleton.  The curriculum variant draws
contexts from a learned sampling distribution and refits it jointly with the
policy; the baseline variant draws contexts from the fixed target and refits
the policy alone.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .config import ExperimentConfig
from .duals import (
    DualVariables,
    SampleBatch,
    alpha_schedule,
    compute_weights,
    optimize_creps,
    optimize_sprl,
)
from .envs import GateEnv, QuadraticEnv
from .gauss import (
    FeatureMap,
    Gaussian,
    LinearGaussianConditional,
    kl_divergence,
    rbf_grid,
    rng_from_seed,
)
from .wml import FitError, ReferencePair, WeightedDataset, fit, fit_policy_only

__all__ = [
    "LearnerState",
    "IterationRecord",
    "make_env",
    "initial_state",
    "sprl_step",
    "creps_step",
    "run",
]

_IS_LOG_CLIP = 10.0
_VARIANCE_FLOOR = 1e-6


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    mean_reward: float
    eval_reward: float
    success_rate: float
    alpha: float
    kl_to_target: float
    trust_region_kl: float
    context_kl: float = 0.0
    flagged: bool = False


@dataclass
class LearnerState:
    policy: LinearGaussianConditional
    sampler: Gaussian
    buffer: list[SampleBatch]
    iteration: int
    duals: DualVariables | None
    target: Gaussian
    value_features: FeatureMap
    eval_contexts: np.ndarray


def make_env(config: ExperimentConfig):
    if config.environment == "quadratic":
        return QuadraticEnv(context_lows=tuple(config.context_lows),
                            context_highs=tuple(config.context_highs))
    return GateEnv(kappa=config.kappa, nu=config.nu, tau=config.tau,
                   context_lows=tuple(config.context_lows),
                   context_highs=tuple(config.context_highs))


def _target_distribution(config: ExperimentConfig) -> Gaussian:
    return Gaussian(np.array(config.target_mean),
                    np.diag(config.target_cov_diag))


def _initial_sampler(config: ExperimentConfig) -> Gaussian:
    lows = np.array(config.context_lows)
    highs = np.array(config.context_highs)
    mean = (np.array(config.init_context_mean)
            if config.init_context_mean is not None
            else 0.5 * (lows + highs))
    std = (np.array(config.init_context_std)
           if config.init_context_std is not None
           else 0.25 * (highs - lows))
    return Gaussian(mean, np.diag(std * std))


def initial_state(config: ExperimentConfig, env,
                  eval_rng: np.random.Generator) -> LearnerState:
    target = _target_distribution(config)
    features = FeatureMap(kind="linear-with-bias", input_dim=env.context_dim)
    policy = LinearGaussianConditional(
        gain=np.zeros((env.param_dim, features.output_dim)),
        cov=np.eye(env.param_dim) * config.init_policy_std ** 2,
        features=features,
    )
    sampler = (target if config.algorithm == "creps"
               else _initial_sampler(config))
    value_features = rbf_grid(config.context_lows, config.context_highs,
                              config.value_grid)
    eval_contexts = target.sample(eval_rng, config.n_eval)
    return LearnerState(policy=policy, sampler=sampler, buffer=[],
                        iteration=0, duals=None, target=target,
                        value_features=value_features,
                        eval_contexts=eval_contexts)


def _project_to_box(g: Gaussian, lows, highs, variance_floor) -> Gaussian:
    """Clip the mean into the box and shrink the covariance so the 2-sigma
    ellipse fits; per-dimension variances are floored afterwards.

    `variance_floor` is a scalar or one value per context dimension.
    """
    lows = np.asarray(lows, dtype=float)
    highs = np.asarray(highs, dtype=float)
    mean = np.clip(g.mean, lows, highs)
    std = np.sqrt(np.diag(g.cov))
    half = np.minimum(mean - lows, highs - mean)
    scale = np.minimum(1.0, half / np.maximum(2.0 * std, 1e-300))
    cov = g.cov * np.outer(scale, scale)
    floor = np.maximum(np.broadcast_to(
        np.asarray(variance_floor, dtype=float), mean.shape), _VARIANCE_FLOOR)
    bump = np.maximum(floor - np.diag(cov), 0.0)
    cov = cov + np.diag(bump)
    return Gaussian(mean, cov)


def _pool_buffer(buffer: list[SampleBatch], sampler: Gaussian):
    """Concatenate buffered batches and importance-correct context samples
    from older samplers to the current one."""
    contexts = np.concatenate([b.contexts for b in buffer])
    params = np.concatenate([b.params for b in buffer])
    rewards = np.concatenate([b.rewards for b in buffer])
    source_ld = np.concatenate([b.source_log_density for b in buffer])
    log_ratio = sampler.log_pdf(contexts) - source_ld
    is_weights = np.exp(np.clip(log_ratio, -_IS_LOG_CLIP, _IS_LOG_CLIP))
    pooled = SampleBatch(contexts, params, rewards,
                         iteration=buffer[-1].iteration,
                         source_log_density=source_ld)
    return pooled, is_weights


def _apply_is(weights: np.ndarray, is_weights: np.ndarray) -> np.ndarray:
    w = weights * is_weights
    total = np.sum(w)
    if not np.isfinite(total) or total <= 0:
        return np.ones_like(w)
    return w / np.mean(w)


def _evaluate(env, policy: LinearGaussianConditional,
              eval_contexts: np.ndarray):
    thetas = policy.mean_at(eval_contexts)
    rewards, _, successes, _ = env.run_episodes(thetas, eval_contexts, None)
    return float(np.mean(rewards)), float(np.mean(successes))


def _collect(state: LearnerState, env, config: ExperimentConfig,
             sampler: Gaussian, rng: np.random.Generator):
    m = config.samples_per_iteration
    contexts = sampler.sample(rng, m)
    thetas = state.policy.sample_at(contexts, rng)
    rewards, _, _, _ = env.run_episodes(thetas, contexts, rng)
    return SampleBatch(contexts, thetas, rewards,
                       iteration=state.iteration + 1,
                       source_log_density=sampler.log_pdf(contexts))


def sprl_step(state: LearnerState, env, config: ExperimentConfig,
              rng: np.random.Generator):
    """One curriculum iteration; returns (new state, record)."""
    k = state.iteration + 1
    batch = _collect(state, env, config, state.sampler, rng)
    buffer = (state.buffer + [batch])[-config.buffer_size:]
    pooled, is_weights = _pool_buffer(buffer, state.sampler)

    kl_to_target = kl_divergence(state.sampler, state.target)
    alpha = alpha_schedule(k, config.k_alpha, config.zeta, batch.rewards,
                           kl_to_target)

    warm = None
    if state.duals is not None:
        warm = DualVariables(state.duals.eta_p, state.duals.eta_mu,
                             np.zeros(state.value_features.output_dim))
    duals = optimize_sprl(pooled, state.target, state.sampler, alpha,
                          config.epsilon, state.value_features, init=warm)
    w_pi, w_mu = compute_weights(
        duals, alpha, pooled, state.target, state.sampler,
        state.value_features,
        corrected_policy_weights=config.corrected_policy_weights)
    w_pi = _apply_is(w_pi, is_weights)
    w_mu = _apply_is(w_mu, is_weights)

    data = WeightedDataset(pooled.contexts, pooled.params, wx=w_mu, wy=w_pi)
    ref = ReferencePair(state.sampler, state.policy)
    flagged = False
    try:
        result = fit(data, ref, config.epsilon)
        flagged = result.fallback
        policy = result.policy
        sampler = _project_to_box(result.context, *env.box,
                                  config.context_variance_floor)
        trust_kl, context_kl = result.combined_kl, result.context_kl
    except FitError:
        flagged = True
        policy, sampler = state.policy, state.sampler
        trust_kl, context_kl = 0.0, 0.0

    eval_reward, success_rate = _evaluate(env, policy, state.eval_contexts)
    record = IterationRecord(
        iteration=k,
        mean_reward=float(np.mean(batch.rewards)),
        eval_reward=eval_reward,
        success_rate=success_rate,
        alpha=alpha,
        kl_to_target=kl_divergence(sampler, state.target),
        trust_region_kl=trust_kl,
        context_kl=context_kl,
        flagged=flagged,
    )
    new_state = replace_state(state, policy=policy, sampler=sampler,
                              buffer=buffer, iteration=k, duals=duals)
    return new_state, record


def creps_step(state: LearnerState, env, config: ExperimentConfig,
               rng: np.random.Generator):
    """One baseline iteration: contexts from the fixed target, policy-only
    refit; returns (new state, record)."""
    k = state.iteration + 1
    batch = _collect(state, env, config, state.target, rng)
    buffer = (state.buffer + [batch])[-config.buffer_size:]
    pooled, _ = _pool_buffer(buffer, state.target)

    init_eta = state.duals.eta_p if state.duals is not None else 1.0
    eta, v_weights = optimize_creps(pooled, config.epsilon,
                                    state.value_features, init_eta=init_eta)
    duals = DualVariables(eta, 1.0, v_weights)
    phi_v = state.value_features(pooled.contexts)
    adv = pooled.rewards - phi_v @ v_weights
    w_pi = np.exp(adv / eta - np.max(adv / eta))
    w_pi = w_pi / np.mean(w_pi)

    data = WeightedDataset(pooled.contexts, pooled.params,
                           wx=np.ones(pooled.size), wy=w_pi)
    ref = ReferencePair(state.target, state.policy)
    flagged = False
    try:
        result = fit_policy_only(data, ref, config.epsilon)
        flagged = result.fallback
        policy = result.policy
        trust_kl = result.combined_kl
    except FitError:
        flagged = True
        policy = state.policy
        trust_kl = 0.0

    eval_reward, success_rate = _evaluate(env, policy, state.eval_contexts)
    record = IterationRecord(
        iteration=k,
        mean_reward=float(np.mean(batch.rewards)),
        eval_reward=eval_reward,
        success_rate=success_rate,
        alpha=0.0,
        kl_to_target=0.0,
        trust_region_kl=trust_kl,
        context_kl=0.0,
        flagged=flagged,
    )
    new_state = replace_state(state, policy=policy, buffer=buffer,
                              iteration=k, duals=duals)
    return new_state, record


def replace_state(state: LearnerState, **changes) -> LearnerState:
    new = LearnerState(**{**state.__dict__, **changes})
    return new


def run(config: ExperimentConfig, env, seed: int,
        trajectory_sink=None) -> list[IterationRecord]:
    """Execute one full learning run; deterministic given the seed.

    Evaluation contexts are drawn once from the target at the start and
    reused every iteration.  A flagged iteration keeps the previous
    distributions; the run never aborts on one.
    """
    root = np.random.SeedSequence(seed)
    eval_ss, loop_ss = root.spawn(2)
    state = initial_state(config, env, rng_from_seed(eval_ss))
    step = sprl_step if config.algorithm == "sprl" else creps_step
    records: list[IterationRecord] = []
    iter_seeds = loop_ss.spawn(config.iterations)
    for k in range(config.iterations):
        rng = rng_from_seed(iter_seeds[k])
        state, record = step(state, env, config, rng)
        records.append(record)
        if trajectory_sink is not None:
            trajectory_sink(k + 1, state, env)
    return records
