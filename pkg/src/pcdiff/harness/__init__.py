"""Run configuration, training loop, oracles and the command-line interface."""
from .config import ConfigError, RunConfig, RunManifest
from .train import NumericalFailure, train

__all__ = ["ConfigError", "NumericalFailure", "RunConfig", "RunManifest", "train"]
