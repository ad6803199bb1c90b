"""Multivariate Gaussian primitives, feature maps and analytic KL divergences.

Everything downstream (weighted fits, dual objectives, the curriculum loop)
is built on the types in this module.  All types are immutable after
construction and safe to share across threads; sampling takes an owned
generator per caller.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

__all__ = [
    "SingularCovarianceError",
    "Gaussian",
    "FeatureMap",
    "LinearGaussianConditional",
    "log_pdf",
    "kl_divergence",
    "sample",
    "featurize",
    "rbf_grid",
    "rng_from_seed",
]

# Relative jitter added to covariances before factorization so that
# near-singular matrices produced by late-stage weighted fits still factor.
_JITTER_SCALE = 1e-10


class SingularCovarianceError(ValueError):
    """Covariance could not be factorized even after jitter."""


def _jittered(cov: np.ndarray) -> np.ndarray:
    d = cov.shape[0]
    return cov + _JITTER_SCALE * (np.trace(cov) / d) * np.eye(d)


def _cholesky(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(_jittered(cov))
    except np.linalg.LinAlgError as exc:
        raise SingularCovarianceError(
            f"covariance not positive-definite after jitter: trace={np.trace(cov):g}"
        ) from exc


def rng_from_seed(seed) -> np.random.Generator:
    """Counter-based generator; `seed` may be an int or a SeedSequence."""
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class Gaussian:
    """Full-covariance multivariate normal."""

    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise ValueError(
                f"shape mismatch: mean {mean.shape}, cov {cov.shape}"
            )
        if not np.all(np.isfinite(mean)) or not np.all(np.isfinite(cov)):
            raise ValueError("non-finite mean or covariance")
        scale = max(np.abs(cov).max(), 1.0)
        if np.abs(cov - cov.T).max() > 1e-10 * scale:
            raise ValueError("covariance not symmetric")
        cov = 0.5 * (cov + cov.T)
        mean.flags.writeable = False
        cov.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "chol", _cholesky(cov))

    @property
    def dim(self) -> int:
        return self.mean.size

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        """Log-density at `x`; accepts a single point or an (n, d) batch."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = np.atleast_2d(x)
        if pts.shape[1] != self.dim:
            raise ValueError(f"dimension mismatch: {pts.shape[1]} != {self.dim}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("non-finite input")
        diff = pts - self.mean
        # Solve L z = diff^T; the quadratic form is ||z||^2.
        zs = solve_triangular(self.chol, diff.T, lower=True)
        quad = np.sum(zs * zs, axis=0)
        log_det = 2.0 * np.sum(np.log(np.diag(self.chol)))
        out = -0.5 * (self.dim * np.log(2.0 * np.pi) + log_det + quad)
        return out[0] if single else out

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if n < 1:
            raise ValueError("n must be >= 1")
        z = rng.standard_normal((n, self.dim))
        return self.mean + z @ self.chol.T


def log_pdf(x: np.ndarray, g: Gaussian) -> np.ndarray:
    return g.log_pdf(x)


def sample(g: Gaussian, rng: np.random.Generator, n: int) -> np.ndarray:
    return g.sample(rng, n)


def kl_divergence(p: Gaussian, q: Gaussian) -> float:
    """KL(p || q) in nats, closed form."""
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} != {q.dim}")
    d = p.dim
    cq = cho_factor(_jittered(q.cov), lower=True)
    trace = np.trace(cho_solve(cq, p.cov))
    diff = q.mean - p.mean
    quad = diff @ cho_solve(cq, diff)
    log_det_q = 2.0 * np.sum(np.log(np.diag(cq[0])))
    log_det_p = 2.0 * np.sum(np.log(np.diag(p.chol)))
    return max(0.5 * (trace + quad - d + log_det_q - log_det_p), 0.0)


@dataclass(frozen=True)
class FeatureMap:
    """Context feature function: linear-with-bias or a radial-basis grid."""

    kind: str
    centers: np.ndarray | None = None
    bandwidth: np.ndarray | None = None
    input_dim: int | None = None

    def __post_init__(self):
        if self.kind not in ("linear-with-bias", "radial-basis"):
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.kind == "radial-basis":
            centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
            bandwidth = np.atleast_1d(np.asarray(self.bandwidth, dtype=float))
            if np.any(bandwidth <= 0):
                raise ValueError("bandwidth must be positive")
            if bandwidth.size == 1:
                bandwidth = np.full(centers.shape[1], bandwidth[0])
            if bandwidth.size != centers.shape[1]:
                raise ValueError("bandwidth/center dimension mismatch")
            centers.flags.writeable = False
            bandwidth.flags.writeable = False
            object.__setattr__(self, "centers", centers)
            object.__setattr__(self, "bandwidth", bandwidth)
            object.__setattr__(self, "input_dim", centers.shape[1])
        else:
            if self.input_dim is None or self.input_dim < 1:
                raise ValueError("linear-with-bias needs input_dim >= 1")

    @property
    def output_dim(self) -> int:
        if self.kind == "linear-with-bias":
            return self.input_dim + 1
        return self.centers.shape[0]

    def __call__(self, c: np.ndarray) -> np.ndarray:
        return featurize(c, self)


def featurize(c: np.ndarray, f: FeatureMap) -> np.ndarray:
    """Apply a feature map; accepts a single context or an (n, d) batch."""
    c = np.asarray(c, dtype=float)
    single = c.ndim == 1
    pts = np.atleast_2d(c)
    if pts.shape[1] != f.input_dim:
        raise ValueError(f"dimension mismatch: {pts.shape[1]} != {f.input_dim}")
    if f.kind == "linear-with-bias":
        out = np.concatenate([np.ones((pts.shape[0], 1)), pts], axis=1)
    else:
        scaled = (pts[:, None, :] - f.centers[None, :, :]) / f.bandwidth
        out = np.exp(-0.5 * np.sum(scaled * scaled, axis=2))
    return out[0] if single else out


def rbf_grid(lows, highs, counts) -> FeatureMap:
    """Uniform grid of radial-basis centers over a box.

    Per-dimension bandwidth equals the grid spacing (full box width when a
    dimension has a single center).
    """
    lows = np.atleast_1d(np.asarray(lows, dtype=float))
    highs = np.atleast_1d(np.asarray(highs, dtype=float))
    counts = np.atleast_1d(np.asarray(counts, dtype=int))
    axes, bandwidth = [], []
    for lo, hi, n in zip(lows, highs, counts):
        if n < 1:
            raise ValueError("grid counts must be >= 1")
        pts = np.linspace(lo, hi, n) if n > 1 else np.array([0.5 * (lo + hi)])
        axes.append(pts)
        bandwidth.append((hi - lo) / (n - 1) if n > 1 else (hi - lo))
    centers = np.array(list(itertools.product(*axes)))
    return FeatureMap(kind="radial-basis", centers=centers,
                      bandwidth=np.array(bandwidth))


@dataclass(frozen=True)
class LinearGaussianConditional:
    """Conditional Gaussian with feature-linear mean: N(y | A phi(x), cov)."""

    gain: np.ndarray
    cov: np.ndarray
    features: FeatureMap
    chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        gain = np.atleast_2d(np.asarray(self.gain, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if gain.shape[1] != self.features.output_dim:
            raise ValueError(
                f"gain columns {gain.shape[1]} != feature dim "
                f"{self.features.output_dim}"
            )
        if cov.shape != (gain.shape[0], gain.shape[0]):
            raise ValueError("cov shape does not match output dimension")
        cov = 0.5 * (cov + cov.T)
        gain.flags.writeable = False
        cov.flags.writeable = False
        object.__setattr__(self, "gain", gain)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "chol", _cholesky(cov))

    @property
    def output_dim(self) -> int:
        return self.gain.shape[0]

    def mean_at(self, c: np.ndarray) -> np.ndarray:
        phi = featurize(c, self.features)
        return phi @ self.gain.T

    def sample_at(self, c: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        mean = self.mean_at(c)
        z = rng.standard_normal(np.atleast_2d(mean).shape)
        out = np.atleast_2d(mean) + z @ self.chol.T
        return out[0] if np.asarray(c).ndim == 1 else out

    def log_pdf_at(self, c: np.ndarray, y: np.ndarray) -> np.ndarray:
        mean = np.atleast_2d(self.mean_at(c))
        diff = np.atleast_2d(y) - mean
        zs = solve_triangular(self.chol, diff.T, lower=True)
        quad = np.sum(zs * zs, axis=0)
        log_det = 2.0 * np.sum(np.log(np.diag(self.chol)))
        out = -0.5 * (self.output_dim * np.log(2.0 * np.pi) + log_det + quad)
        return out[0] if np.asarray(y).ndim == 1 else out


def mean_conditional_kl(q: LinearGaussianConditional,
                        p: LinearGaussianConditional,
                        xs: np.ndarray) -> float:
    """Average over xs of KL(q(.|x) || p(.|x)); both share a feature map."""
    o = q.output_dim
    cp = cho_factor(_jittered(p.cov), lower=True)
    trace = np.trace(cho_solve(cp, q.cov))
    log_det_p = 2.0 * np.sum(np.log(np.diag(cp[0])))
    log_det_q = 2.0 * np.sum(np.log(np.diag(q.chol)))
    phi = featurize(xs, q.features)
    diff = phi @ (q.gain - p.gain).T
    quad = np.mean(np.sum(diff * cho_solve(cp, diff.T).T, axis=1))
    return max(0.5 * (trace + quad - o + log_det_p - log_det_q), 0.0)
