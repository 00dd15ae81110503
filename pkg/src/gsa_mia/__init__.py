"""Gradient-feature membership inference against small diffusion models."""

from .config import ExperimentConfig, load_config, parse_config
from .metrics import EvalReport
from .pipeline import run_experiment, sweep

__all__ = ["ExperimentConfig", "EvalReport", "load_config", "parse_config", "run_experiment", "sweep"]
__version__ = "0.1.0"
