"""Federated averaging with per-client element-wise affine layers (iFedAvg)."""

from .federation import ExperimentConfig, run_experiment
from .nn import PersonalParams, SharedParams

__all__ = ["ExperimentConfig", "PersonalParams", "SharedParams", "run_experiment"]
__version__ = "0.1.0"
