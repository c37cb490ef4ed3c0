"""Curriculum-driven differentiable architecture search on small image sets."""
from .config import RunConfig, load_config
from .errors import ConfigError, FormatError, NumericError
from .pipeline import run_ablation_suite, run_search

__all__ = ["RunConfig", "load_config", "ConfigError", "FormatError", "NumericError",
           "run_search", "run_ablation_suite"]
__version__ = "0.1.0"
