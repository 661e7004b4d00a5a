"""Experiment orchestration: config, seeding, trials, sweeps, verification, plots."""

from .config import ConfigError, ExperimentConfig, build, from_dict, load_config
from .runner import CSV_COLUMNS, TrialRecord, run_trial, run_trials
from .seeding import derived_seed, splitmix64
from .sweep import run_sweep
from .verify import verify

__all__ = [
    "CSV_COLUMNS",
    "ConfigError",
    "ExperimentConfig",
    "TrialRecord",
    "build",
    "derived_seed",
    "from_dict",
    "load_config",
    "run_sweep",
    "run_trial",
    "run_trials",
    "splitmix64",
    "verify",
]
