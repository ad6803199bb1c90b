"""KL-regularized weighted maximum-likelihood fit of a context Gaussian and a
linear-Gaussian policy.

The fit maximizes the weighted log-likelihood of a joint distribution
p(x, y) = N(y | A phi(x), S_y) N(x | m_x, S_x) subject to a trust region
on the divergence from a reference pair,

    (1/N) sum_i KL(q_y(.|x_i) || p_y(.|x_i)) + KL(q_x || p_x) <= eps.

The stationarity conditions give all four parameters in closed form for a
fixed multiplier eta; eta itself is found by bracketed bisection on the
one-dimensional constraint gap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gauss import (
    FeatureMap,
    Gaussian,
    LinearGaussianConditional,
    SingularCovarianceError,
    featurize,
    kl_divergence,
    mean_conditional_kl,
)

__all__ = [
    "WeightedDataset",
    "ReferencePair",
    "FitResult",
    "FitError",
    "closed_form_params",
    "constraint_gap",
    "fit",
    "fit_policy_only",
    "effective_sample_size",
]

ETA_MAX = 1e12
_BISECT_REL_TOL = 1e-6
_BISECT_MAX_ITER = 200


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class WeightedDataset:
    """Weighted samples (x_i, y_i) with separate context and policy weights."""

    xs: np.ndarray
    ys: np.ndarray
    wx: np.ndarray
    wy: np.ndarray

    def __post_init__(self):
        xs = np.atleast_2d(np.asarray(self.xs, dtype=float))
        ys = np.atleast_2d(np.asarray(self.ys, dtype=float))
        wx = np.asarray(self.wx, dtype=float)
        wy = np.asarray(self.wy, dtype=float)
        n = xs.shape[0]
        if ys.shape[0] != n or wx.shape != (n,) or wy.shape != (n,):
            raise ValueError("inconsistent sample counts")
        for name, w in (("wx", wx), ("wy", wy)):
            if not np.all(np.isfinite(w)) or np.any(w < 0) or not np.any(w > 0):
                raise ValueError(f"{name} must be finite, >= 0, not all zero")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)
        object.__setattr__(self, "wx", wx)
        object.__setattr__(self, "wy", wy)

    @property
    def n(self) -> int:
        return self.xs.shape[0]


@dataclass(frozen=True)
class ReferencePair:
    """Previous-iteration distributions the trust region is measured against."""

    context: Gaussian
    policy: LinearGaussianConditional


@dataclass(frozen=True)
class FitResult:
    context: Gaussian
    policy: LinearGaussianConditional
    eta: float
    combined_kl: float
    context_kl: float
    policy_kl: float
    fallback: bool = False


def effective_sample_size(w: np.ndarray) -> float:
    s = np.sum(w)
    return s * s / np.sum(w * w)


def _sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def closed_form_params(eta: float, data: WeightedDataset, ref: ReferencePair):
    """Stationary (A, S_y, m_x, S_x) for a fixed multiplier eta.

    Returns the four arrays; raises FitError on a rank-deficient Gram matrix.
    """
    if eta < 0:
        raise ValueError("eta must be >= 0")
    n = data.n
    phi = featurize(data.xs, ref.policy.features)
    a_ref = ref.policy.gain

    wy = data.wy
    gram = (phi * (wy + eta / n)[:, None]).T @ phi
    gram = gram + 1e-10 * (np.trace(gram) / gram.shape[0] + 1e-300) * np.eye(
        gram.shape[0]
    )
    rhs = (wy[:, None] * data.ys + (eta / n) * (phi @ a_ref.T)).T @ phi
    try:
        gain = np.linalg.solve(gram, rhs.T).T
    except np.linalg.LinAlgError as exc:
        raise FitError(
            f"singular Gram matrix (rank {np.linalg.matrix_rank(gram)} of "
            f"{gram.shape[0]})"
        ) from exc

    dy = data.ys - phi @ gain.T
    da = gain - a_ref
    phi_outer = phi.T @ phi
    cov_y = (
        (dy * wy[:, None]).T @ dy
        + eta * ref.policy.cov
        + (eta / n) * da @ phi_outer @ da.T
    ) / (np.sum(wy) + eta)

    wx = data.wx
    mean_x = (wx @ data.xs + eta * ref.context.mean) / (np.sum(wx) + eta)
    dx = data.xs - mean_x
    dm = (mean_x - ref.context.mean)[:, None]
    cov_x = (
        (dx * wx[:, None]).T @ dx
        + eta * (ref.context.cov + dm @ dm.T)
    ) / (np.sum(wx) + eta)

    return gain, _sym(cov_y), mean_x, _sym(cov_x)


def _build(eta, data, ref):
    gain, cov_y, mean_x, cov_x = closed_form_params(eta, data, ref)
    context = Gaussian(mean_x, cov_x)
    policy = LinearGaussianConditional(gain, cov_y, ref.policy.features)
    ckl = kl_divergence(ref.context, context)
    pkl = mean_conditional_kl(ref.policy, policy, data.xs)
    return context, policy, ckl, pkl


def constraint_gap(eta: float, data: WeightedDataset, ref: ReferencePair,
                   epsilon: float) -> float:
    """eps minus the achieved combined divergence at the eta-fit."""
    _, _, ckl, pkl = _build(eta, data, ref)
    return epsilon - (ckl + pkl)


def _bisect_fit(data, ref, epsilon, gap_fn, build_fn, gap_zero):
    """Bracket + bisect on log(eta); returns the upper-bracket fit.

    The upper endpoint always satisfies the constraint (gap >= 0), so the
    returned divergence lands in [eps - tol, eps].
    """
    lo, gap_lo = 1e-8, gap_zero
    hi = 1.0
    gap_hi = gap_fn(hi)
    while gap_hi < 0.0:
        lo, gap_lo = hi, gap_hi
        hi *= 10.0
        if hi > ETA_MAX:
            raise FitError(
                f"no bracket for eta in [0, {ETA_MAX:g}]: "
                f"gap(0)={gap_zero:g}, gap({ETA_MAX:g})={gap_hi:g}"
            )
        gap_hi = gap_fn(hi)
    for _ in range(_BISECT_MAX_ITER):
        if hi / max(lo, 1e-300) < 1.0 + _BISECT_REL_TOL:
            break
        mid = np.sqrt(lo * hi)
        if gap_fn(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    return build_fn(hi)


def fit(data: WeightedDataset, ref: ReferencePair, epsilon: float) -> FitResult:
    """Trust-region weighted ML fit of the joint context/policy pair."""
    d_x = data.xs.shape[1]
    d_y = data.ys.shape[1]
    if (effective_sample_size(data.wx) < d_x + 2
            or effective_sample_size(data.wy) < d_y + 2):
        # Degenerate weights: pin to the reference rather than fit noise.
        return FitResult(ref.context, ref.policy, np.inf, 0.0, 0.0, 0.0,
                         fallback=True)

    def build(eta):
        context, policy, ckl, pkl = _build(eta, data, ref)
        return FitResult(context, policy, eta, ckl + pkl, ckl, pkl)

    context, policy, ckl, pkl = _build(0.0, data, ref)
    if ckl + pkl <= epsilon:
        return FitResult(context, policy, 0.0, ckl + pkl, ckl, pkl)
    return _bisect_fit(
        data, ref, epsilon,
        gap_fn=lambda eta: constraint_gap(eta, data, ref, epsilon),
        build_fn=build,
        gap_zero=epsilon - (ckl + pkl),
    )


def fit_policy_only(data: WeightedDataset, ref: ReferencePair,
                    epsilon: float) -> FitResult:
    """Policy-only variant: the context distribution stays at the reference
    and the trust region is the mean conditional divergence alone."""
    d_y = data.ys.shape[1]
    if effective_sample_size(data.wy) < d_y + 2:
        return FitResult(ref.context, ref.policy, np.inf, 0.0, 0.0, 0.0,
                         fallback=True)

    def build_parts(eta):
        gain, cov_y, _, _ = closed_form_params(eta, data, ref)
        policy = LinearGaussianConditional(gain, cov_y, ref.policy.features)
        pkl = mean_conditional_kl(ref.policy, policy, data.xs)
        return policy, pkl

    def build(eta):
        policy, pkl = build_parts(eta)
        return FitResult(ref.context, policy, eta, pkl, 0.0, pkl)

    policy, pkl = build_parts(0.0)
    if pkl <= epsilon:
        return FitResult(ref.context, policy, 0.0, pkl, 0.0, pkl)
    return _bisect_fit(
        data, ref, epsilon,
        gap_fn=lambda eta: epsilon - build_parts(eta)[1],
        build_fn=build,
        gap_zero=epsilon - pkl,
    )
