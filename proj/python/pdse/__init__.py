"""Lesion detection on synthetic CT phantoms."""

from ._core import (
    CheckpointError,
    ConfigError,
    DataError,
    Model,
    ShapeError,
    TrainingError,
    average_precision,
    cli,
    conv2d,
    deformable_conv2d,
    focal_loss,
    generate_phantoms,
    gradient_suite,
    hu_normalize,
    load_slice,
    nms,
    train,
)

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DataError",
    "Model",
    "ShapeError",
    "TrainingError",
    "average_precision",
    "cli",
    "conv2d",
    "deformable_conv2d",
    "focal_loss",
    "generate_phantoms",
    "gradient_suite",
    "hu_normalize",
    "load_slice",
    "nms",
    "train",
]
