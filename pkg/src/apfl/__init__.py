"""Asynchronous personalized federated learning: protocol library and discrete-event simulator."""

from .config import ExperimentConfig, parse_config, preset
from .sim import RunTrace, prepare, run

__all__ = ["ExperimentConfig", "RunTrace", "parse_config", "prepare", "preset", "run"]
__version__ = "0.1.0"
