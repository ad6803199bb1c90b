"""Experiment configuration: YAML loading, per-environment defaults,
validation and round-tripping."""

from __future__ import annotations

from dataclasses import dataclass, asdict, field

import yaml

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "config_from_dict",
    "ALGORITHMS",
    "ENVIRONMENTS",
]

ALGORITHMS = ("sprl", "creps")
ENVIRONMENTS = ("gate-precision", "gate-global", "quadratic")


class ConfigError(ValueError):
    pass


# Environment-specific defaults; the gate rows use the reference
# hyperparameters of the two gate settings.
_ENV_DEFAULTS = {
    "gate-global": dict(
        epsilon=0.25, zeta=0.002, k_alpha=140, buffer_size=10,
        samples_per_iteration=100, iterations=250,
        kappa=10.0, nu=1e-4, tau=0.05,
        target_mean=[0.0, 4.0], target_cov_diag=[4.0, 1.0],
        context_lows=[-4.0, 0.1], context_highs=[4.0, 8.0],
        value_grid=[5, 5], init_policy_std=2.0,
    ),
    "gate-precision": dict(
        epsilon=0.4, zeta=0.02, k_alpha=140, buffer_size=10,
        samples_per_iteration=100, iterations=200,
        kappa=10.0, nu=1e-4, tau=0.05,
        target_mean=[2.5, 0.25], target_cov_diag=[0.01, 0.04],
        context_lows=[2.0, 0.1], context_highs=[3.0, 6.0],
        value_grid=[7, 9], init_policy_std=2.0,
        init_context_mean=[2.5, 3.5], init_context_std=[0.25, 1.2],
        context_variance_floor=[0.25, 0.5],
    ),
    "quadratic": dict(
        epsilon=0.5, zeta=0.05, k_alpha=5, buffer_size=5,
        samples_per_iteration=50, iterations=30,
        kappa=1.0, nu=0.0, tau=0.05,
        target_mean=[0.0, 0.0], target_cov_diag=[0.25, 0.25],
        context_lows=[-1.0, -1.0], context_highs=[1.0, 1.0],
        value_grid=[4, 4], init_policy_std=1.0,
    ),
}

_COMMON_DEFAULTS = dict(
    seeds=list(range(10)),
    n_eval=200,
    context_variance_floor=0.0,
    init_context_mean=None,
    init_context_std=None,
    corrected_policy_weights=False,
)


@dataclass(frozen=True)
class ExperimentConfig:
    algorithm: str
    environment: str
    epsilon: float
    zeta: float
    k_alpha: int
    buffer_size: int
    samples_per_iteration: int
    iterations: int
    seeds: list[int]
    kappa: float
    nu: float
    tau: float
    target_mean: list[float]
    target_cov_diag: list[float]
    context_lows: list[float]
    context_highs: list[float]
    value_grid: list[int]
    init_policy_std: float
    n_eval: int = 200
    context_variance_floor: float | list[float] = 0.0
    init_context_mean: list[float] | None = None
    init_context_std: list[float] | None = None
    corrected_policy_weights: bool = False

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}")
        if self.environment not in ENVIRONMENTS:
            raise ConfigError(f"environment must be one of {ENVIRONMENTS}")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")
        if self.zeta < 0:
            raise ConfigError("zeta must be >= 0")
        if self.k_alpha < 0:
            raise ConfigError("k_alpha must be >= 0")
        if self.buffer_size < 1:
            raise ConfigError("buffer_size must be >= 1")
        if self.samples_per_iteration < 4:
            raise ConfigError("samples_per_iteration must be >= 4")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be nonempty and distinct")
        if self.n_eval < 1:
            raise ConfigError("n_eval must be >= 1")
        d = len(self.context_lows)
        for name in ("context_highs", "target_mean", "target_cov_diag",
                     "value_grid"):
            if len(getattr(self, name)) != d:
                raise ConfigError(f"{name} must have {d} entries")
        if any(hi <= lo for lo, hi in zip(self.context_lows,
                                          self.context_highs)):
            raise ConfigError("context_highs must exceed context_lows")
        if any(v <= 0 for v in self.target_cov_diag):
            raise ConfigError("target_cov_diag entries must be > 0")
        if any(n < 1 for n in self.value_grid):
            raise ConfigError("value_grid counts must be >= 1")
        if self.init_policy_std <= 0:
            raise ConfigError("init_policy_std must be > 0")
        floor = self.context_variance_floor
        floors = floor if isinstance(floor, (list, tuple)) else [floor]
        if isinstance(floor, (list, tuple)) and len(floor) != d:
            raise ConfigError(
                f"context_variance_floor must be a scalar or have {d} entries")
        if any(v < 0 for v in floors):
            raise ConfigError("context_variance_floor must be >= 0")
        for name in ("init_context_mean", "init_context_std"):
            val = getattr(self, name)
            if val is not None and len(val) != d:
                raise ConfigError(f"{name} must have {d} entries")

    def to_dict(self) -> dict:
        return asdict(self)


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build a config from a plain mapping, filling environment defaults and
    rejecting unknown keys."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    raw = dict(raw)
    environment = raw.get("environment")
    if environment not in ENVIRONMENTS:
        raise ConfigError(
            f"environment must be one of {ENVIRONMENTS}, got {environment!r}")
    if raw.get("algorithm") not in ALGORITHMS:
        raise ConfigError(
            f"algorithm must be one of {ALGORITHMS}, got "
            f"{raw.get('algorithm')!r}")
    values = dict(_COMMON_DEFAULTS)
    values.update(_ENV_DEFAULTS[environment])
    known = set(values) | {"algorithm", "environment"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    values.update(raw)
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    """Load a YAML experiment file; grammar documented in the README."""
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"parse error{where}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    if raw is None:
        raise ConfigError("empty config file")
    return config_from_dict(raw)
