"""Coarse-to-fine unsupervised domain adaptation for traversability segmentation, with a
divergence toolkit and a segmentation-driven visual planner."""
from .data import STANDARD_SHIFT, Dataset, ShiftSpec, generate_dataset
from .diffcore import ConfigError, DimensionError, Tensor, UsageError
from .losses import ValidationError
from .models import CaliModel, build_model, load_model
from .trainer import TrainConfig, train

__all__ = ["STANDARD_SHIFT", "Dataset", "ShiftSpec", "generate_dataset", "ConfigError", "DimensionError",
           "Tensor", "UsageError", "ValidationError", "CaliModel", "build_model", "load_model",
           "TrainConfig", "train"]
__version__ = "0.1.0"
