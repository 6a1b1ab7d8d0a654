"""Foveated latent-space image steganography toolkit."""

from .domain import (
    CENTER_GAZE,
    DataError,
    GazePoint,
    ModelMetadata,
    ModelMismatchError,
    PayloadError,
    StegoError,
    TrainingDivergedError,
    ValidationError,
    bits_from_bytes,
    bytes_from_bits,
    denormalize,
    load_png,
    normalize,
    save_png,
)
from .foveation import FoveationConfig, foveated_statistics, metameric_loss

__all__ = [
    "CENTER_GAZE",
    "DataError",
    "FoveationConfig",
    "GazePoint",
    "ModelMetadata",
    "ModelMismatchError",
    "PayloadError",
    "StegoError",
    "TrainingDivergedError",
    "ValidationError",
    "bits_from_bytes",
    "bytes_from_bits",
    "denormalize",
    "foveated_statistics",
    "load_png",
    "metameric_loss",
    "normalize",
    "save_png",
]
