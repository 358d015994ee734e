"""Configuration, experiment drivers and the command line interface."""

from .config import ConfigError, ExperimentConfig, OutlierFamily, load_config
from .experiments import run_eval_experiment, run_train_experiment, sensitivity_sweep
from .manifest import RunManifest

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "OutlierFamily",
    "RunManifest",
    "load_config",
    "run_eval_experiment",
    "run_train_experiment",
    "sensitivity_sweep",
]
