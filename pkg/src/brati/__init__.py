"""Bidirectional recurrent-attention imputation of multivariate time series."""

from .model import BratiConfig, BratiOutput, BratiParams, brati_forward, impute, parameter_count
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "BratiConfig",
    "BratiOutput",
    "BratiParams",
    "TrainConfig",
    "brati_forward",
    "impute",
    "load_checkpoint",
    "parameter_count",
    "save_checkpoint",
    "train",
]
