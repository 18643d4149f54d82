"""Federated fine-tuning of a frozen transformer through zero-initialized expanded blocks."""
from .config import ExperimentConfig, toy
from .errors import ConfigurationError, DegenerateProfileError, FedBEError, InputError, TrainingError
from .expansion import ExpandedModel, ExpansionPlan, expand, select_expansion_layers
from .federation import MetricsSeries, prepare, run_experiment
from .nn_core import BaseModel, ModelSpec, init_model

__version__ = "0.1.0"

__all__ = [
    "BaseModel", "ConfigurationError", "DegenerateProfileError", "ExpandedModel", "ExpansionPlan",
    "ExperimentConfig", "FedBEError", "InputError", "MetricsSeries", "ModelSpec", "TrainingError",
    "expand", "init_model", "prepare", "run_experiment", "select_expansion_layers", "toy",
]
