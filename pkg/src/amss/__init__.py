"""Adaptive subnetwork masking for balanced multi-modal training."""

from .config import RunConfig, load_config, loads_config
from .data import DataSpec, Dataset, generate, load_dataset, save_dataset
from .estimator import AMSSClassifier
from .harness import grid_sweep, run_experiment, tau_sweep
from .masking import MaskMode, MaskPlan, Scope
from .model import LabeledBatch, ModelSpec, MultiModalModel, build_model
from .significance import SignificanceState
from .training import Strategy, Trainer

__version__ = "0.1.0"

__all__ = [
    "AMSSClassifier", "DataSpec", "Dataset", "LabeledBatch", "MaskMode", "MaskPlan", "ModelSpec",
    "MultiModalModel", "RunConfig", "Scope", "SignificanceState", "Strategy", "Trainer",
    "build_model", "generate", "grid_sweep", "load_config", "load_dataset", "loads_config",
    "run_experiment", "save_dataset", "tau_sweep",
]
