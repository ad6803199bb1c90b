"""Dual objectives, sample weights and the curriculum trade-off schedule.

Two temperatures drive the update: eta_p for the joint trust region and
eta_mu for the context trust region; a linear value function V(c) on a
feature map accounts for the marginalization constraint.  Both dual
objectives are sample-average approximations evaluated with shifted
log-sum-exp so they stay finite for advantage magnitudes far beyond
double-precision exponent range.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from .gauss import FeatureMap, Gaussian, featurize

__all__ = [
    "ETA_FLOOR",
    "ETA_CAP",
    "ALPHA_CAP",
    "KL_FLOOR",
    "DualVariables",
    "SampleBatch",
    "DualOptimizationError",
    "advantage",
    "beta_values",
    "sprl_dual",
    "creps_dual",
    "optimize_dual",
    "optimize_sprl",
    "optimize_creps",
    "compute_weights",
    "alpha_schedule",
]

ETA_FLOOR = 1e-6
ETA_CAP = 1e8
ALPHA_CAP = 1e6
KL_FLOOR = 1e-6


class DualOptimizationError(RuntimeError):
    pass


@dataclass(frozen=True)
class DualVariables:
    """Temperatures and value-function weights of the dual problem."""

    eta_p: float
    eta_mu: float
    v_weights: np.ndarray

    def __post_init__(self):
        v = np.atleast_1d(np.asarray(self.v_weights, dtype=float))
        if self.eta_p < ETA_FLOOR or self.eta_mu < ETA_FLOOR:
            raise ValueError("temperatures must be >= ETA_FLOOR")
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite value weights")
        v.flags.writeable = False
        object.__setattr__(self, "v_weights", v)


@dataclass(frozen=True)
class SampleBatch:
    """Per-iteration rollout tuples plus the source sampler's log-density."""

    contexts: np.ndarray
    params: np.ndarray
    rewards: np.ndarray
    iteration: int = 0
    source_log_density: np.ndarray | None = None

    def __post_init__(self):
        contexts = np.atleast_2d(np.asarray(self.contexts, dtype=float))
        params = np.atleast_2d(np.asarray(self.params, dtype=float))
        rewards = np.asarray(self.rewards, dtype=float)
        m = contexts.shape[0]
        if params.shape[0] != m or rewards.shape != (m,):
            raise ValueError("inconsistent batch sizes")
        if not np.all(np.isfinite(rewards)):
            raise ValueError("non-finite rewards")
        object.__setattr__(self, "contexts", contexts)
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "rewards", rewards)
        if self.source_log_density is not None:
            sld = np.asarray(self.source_log_density, dtype=float)
            if sld.shape != (m,):
                raise ValueError("source_log_density size mismatch")
            object.__setattr__(self, "source_log_density", sld)

    @property
    def size(self) -> int:
        return self.contexts.shape[0]


def advantage(batch: SampleBatch, duals: DualVariables,
              value_features: FeatureMap) -> np.ndarray:
    """Reward minus the value function at each sampled context."""
    phi = featurize(batch.contexts, value_features)
    if phi.shape[1] != duals.v_weights.size:
        raise ValueError("value feature dimension mismatch")
    return batch.rewards - phi @ duals.v_weights


def beta_values(batch: SampleBatch, duals: DualVariables, alpha: float,
                target: Gaussian, sampler: Gaussian,
                value_features: FeatureMap) -> np.ndarray:
    """Per-sample alpha * log(target/sampler) + V(c), all in log space."""
    phi = featurize(batch.contexts, value_features)
    log_ratio = target.log_pdf(batch.contexts) - sampler.log_pdf(batch.contexts)
    return alpha * log_ratio + phi @ duals.v_weights


def _lse_term(values: np.ndarray, temperature: float):
    """log mean exp(values/t) with its softmax weights and weighted mean."""
    z = values / temperature
    lse = logsumexp(z)
    log_mean = lse - np.log(values.size)
    w = np.exp(z - lse)
    return log_mean, w, w @ values


def _sprl_value_grad(x: np.ndarray, rewards: np.ndarray, phi: np.ndarray,
                     log_ratio: np.ndarray, alpha: float, epsilon: float):
    eta_p, eta_mu, v = x[0], x[1], x[2:]
    values = phi @ v
    adv = rewards - values
    beta = alpha * log_ratio + values

    t_mu = alpha + eta_mu
    l1, w1, mean_adv = _lse_term(adv, eta_p)
    l2, w2, mean_beta = _lse_term(beta, t_mu)

    value = (eta_p + eta_mu) * epsilon + eta_p * l1 + t_mu * l2
    if not np.isfinite(value):
        raise DualOptimizationError(
            f"non-finite dual value: max advantage exponent "
            f"{np.max(adv) / eta_p:g}, max beta exponent {np.max(beta) / t_mu:g}"
        )
    grad_eta_p = epsilon + l1 - mean_adv / eta_p
    grad_eta_mu = epsilon + l2 - mean_beta / t_mu
    grad_v = phi.T @ (w2 - w1)
    return value, np.concatenate([[grad_eta_p, grad_eta_mu], grad_v])


def _creps_value_grad(x: np.ndarray, rewards: np.ndarray, phi: np.ndarray,
                      epsilon: float):
    eta, v = x[0], x[1:]
    values = phi @ v
    adv = rewards - values
    l1, w1, mean_adv = _lse_term(adv, eta)
    value = eta * epsilon + eta * l1 + np.mean(values)
    if not np.isfinite(value):
        raise DualOptimizationError(
            f"non-finite dual value: max advantage exponent {np.max(adv) / eta:g}"
        )
    grad_eta = epsilon + l1 - mean_adv / eta
    grad_v = phi.T @ (np.full(values.size, 1.0 / values.size) - w1)
    return value, np.concatenate([[grad_eta], grad_v])


def sprl_dual(duals: DualVariables, alpha: float, batch: SampleBatch,
              target: Gaussian, sampler: Gaussian, epsilon: float,
              value_features: FeatureMap):
    """Value and analytic gradient (eta_p, eta_mu, v) of the curriculum dual."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if batch.size < 2:
        raise ValueError("need at least 2 samples")
    phi = featurize(batch.contexts, value_features)
    if phi.shape[1] != duals.v_weights.size:
        raise ValueError("value feature dimension mismatch")
    log_ratio = (target.log_pdf(batch.contexts)
                 - sampler.log_pdf(batch.contexts))
    x = np.concatenate([[duals.eta_p, duals.eta_mu], duals.v_weights])
    return _sprl_value_grad(x, batch.rewards, phi, log_ratio, alpha, epsilon)


def creps_dual(eta: float, v_weights: np.ndarray, batch: SampleBatch,
               epsilon: float, value_features: FeatureMap):
    """Value and analytic gradient (eta, v) of the single-temperature dual.

    Includes the additive mean-V term contributed by the marginalization
    constraint under the fixed context distribution; without it the value
    function is only identified up to a constant.
    """
    phi = featurize(batch.contexts, value_features)
    v = np.atleast_1d(np.asarray(v_weights, dtype=float))
    x = np.concatenate([[eta], v])
    return _creps_value_grad(x, batch.rewards, phi, epsilon)


def optimize_dual(objective, x0: np.ndarray, bounds) -> np.ndarray:
    """Minimize a (value, gradient) objective with box bounds.

    Bounded quasi-Newton; deterministic given inputs.  Raises on a
    non-finite objective at the returned point.
    """
    x0 = np.asarray(x0, dtype=float)
    result = minimize(objective, x0, jac=True, method="L-BFGS-B",
                      bounds=bounds,
                      options={"maxiter": 500, "ftol": 1e-12, "gtol": 1e-5})
    if not np.isfinite(result.fun):
        raise DualOptimizationError(
            f"dual optimizer diverged at x={result.x!r}"
        )
    return result.x


def optimize_sprl(batch: SampleBatch, target: Gaussian, sampler: Gaussian,
                  alpha: float, epsilon: float, value_features: FeatureMap,
                  init: DualVariables | None = None) -> DualVariables:
    dim_v = value_features.output_dim
    if init is None:
        init = DualVariables(1.0, 1.0, np.zeros(dim_v))
    phi = featurize(batch.contexts, value_features)
    log_ratio = (target.log_pdf(batch.contexts)
                 - sampler.log_pdf(batch.contexts))

    def objective(x):
        return _sprl_value_grad(x, batch.rewards, phi, log_ratio, alpha,
                                epsilon)

    bounds = [(ETA_FLOOR, ETA_CAP)] * 2 + [(None, None)] * dim_v
    x0 = np.concatenate([[init.eta_p, init.eta_mu], init.v_weights])
    x = optimize_dual(objective, x0, bounds)
    return DualVariables(max(x[0], ETA_FLOOR), max(x[1], ETA_FLOOR), x[2:])


def optimize_creps(batch: SampleBatch, epsilon: float,
                   value_features: FeatureMap,
                   init_eta: float = 1.0) -> tuple[float, np.ndarray]:
    dim_v = value_features.output_dim
    phi = featurize(batch.contexts, value_features)

    def objective(x):
        return _creps_value_grad(x, batch.rewards, phi, epsilon)

    bounds = [(ETA_FLOOR, ETA_CAP)] + [(None, None)] * dim_v
    x0 = np.concatenate([[init_eta], np.zeros(dim_v)])
    x = optimize_dual(objective, x0, bounds)
    return max(x[0], ETA_FLOOR), x[1:]


def _normalized_exp(exponent: np.ndarray) -> np.ndarray:
    w = np.exp(exponent - np.max(exponent))
    return w / np.mean(w)


def compute_weights(duals: DualVariables, alpha: float, batch: SampleBatch,
                    target: Gaussian, sampler: Gaussian,
                    value_features: FeatureMap,
                    corrected_policy_weights: bool = False):
    """Policy and context sample weights, max-shifted and mean-normalized.

    The downstream fit is invariant to weight scale, so normalizing to mean
    one is purely numerical hygiene.  `corrected_policy_weights` enables the
    experimental variant that subtracts the context exponent from the policy
    exponent; the default reuses the plain advantage weights, which proved
    far better behaved in practice.
    """
    adv = advantage(batch, duals, value_features)
    beta = beta_values(batch, duals, alpha, target, sampler, value_features)
    ctx_exponent = beta / (alpha + duals.eta_mu)
    pol_exponent = adv / duals.eta_p
    if corrected_policy_weights:
        pol_exponent = pol_exponent - ctx_exponent
    return _normalized_exp(pol_exponent), _normalized_exp(ctx_exponent)


def alpha_schedule(k: int, k_alpha: int, zeta: float, rewards: np.ndarray,
                   kl_to_target: float) -> float:
    """Curriculum trade-off weight for iteration k.

    Zero for the first `k_alpha` iterations, then a fixed fraction `zeta` of
    the average reward divided by the divergence to the target; capped once
    the sampler has effectively arrived at the target.
    """
    if kl_to_target < 0:
        raise ValueError("kl_to_target must be >= 0")
    if k <= k_alpha:
        return 0.0
    if kl_to_target < KL_FLOOR:
        return ALPHA_CAP
    rewards = np.asarray(rewards, dtype=float)
    return min(zeta * np.sum(rewards) / (rewards.size * kl_to_target),
               ALPHA_CAP)
