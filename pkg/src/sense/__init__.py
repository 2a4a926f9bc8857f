"""Stereo-aware open-vocabulary segmentation on a frozen dual-encoder backbone."""

from sense.backbone import Backbone, BackboneConfig, build_backbone
from sense.errors import (
    ConfigError,
    CoverageError,
    FormatError,
    InputError,
    InvariantError,
    MissingFileError,
    SenseError,
    TrainingDivergedError,
)
from sense.model import ModelConfig, SenseModel, predict_binary

__version__ = "0.1.0"

__all__ = [
    "Backbone",
    "BackboneConfig",
    "build_backbone",
    "ModelConfig",
    "SenseModel",
    "predict_binary",
    "SenseError",
    "ConfigError",
    "InputError",
    "FormatError",
    "MissingFileError",
    "InvariantError",
    "CoverageError",
    "TrainingDivergedError",
]
