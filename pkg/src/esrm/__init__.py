"""Online continual learning with entropy-selection replay and real-synthetic matching."""

from .buffer import MemoryBuffer
from .config import ExperimentConfig, parse_config
from .data import ContaminationSpec, LabeledDataset, Provenance, Sample, contaminate, load_dataset
from .losses import LossWeights
from .model import LearnerModel
from .trainer import TrainConfig, run_experiment

__version__ = "0.1.0"

__all__ = [
    "MemoryBuffer",
    "ExperimentConfig",
    "parse_config",
    "ContaminationSpec",
    "LabeledDataset",
    "Provenance",
    "Sample",
    "contaminate",
    "load_dataset",
    "LossWeights",
    "LearnerModel",
    "TrainConfig",
    "run_experiment",
]
