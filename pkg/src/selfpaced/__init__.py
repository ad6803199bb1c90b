"""Self-paced contextual policy search with a KL-regularized curriculum,
plus the single-distribution baseline."""

__version__ = "0.1.0"

from .config import ExperimentConfig, load_config
from .envs import GateEnv, QuadraticEnv
from .gauss import FeatureMap, Gaussian, LinearGaussianConditional
from .harness import run_study, summarize
from .loop import make_env, run

__all__ = [
    "__version__",
    "ExperimentConfig",
    "load_config",
    "GateEnv",
    "QuadraticEnv",
    "FeatureMap",
    "Gaussian",
    "LinearGaussianConditional",
    "run_study",
    "summarize",
    "make_env",
    "run",
]
