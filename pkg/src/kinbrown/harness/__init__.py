"""Experiment configuration, runner and command-line interface."""
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .runner import Check, RunResult, render_csv, run_experiment
