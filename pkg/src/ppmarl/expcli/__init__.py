"""Experiment driver: configs, runs, reports and the command line."""

from .config import PRESETS, ExperimentConfig, default_config, parse_config, parse_config_text
from .metrics import mae, moving_average, rmse

__all__ = [
    "PRESETS",
    "ExperimentConfig",
    "default_config",
    "parse_config",
    "parse_config_text",
    "mae",
    "moving_average",
    "rmse",
]
