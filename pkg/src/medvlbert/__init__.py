"""Terminology-grounded radiology report generation with a numpy autodiff engine."""

from .errors import (
    ConfigError,
    ContractError,
    CorruptFileError,
    DataIntegrityError,
    DimensionError,
    HashMismatchError,
    MedVLBertError,
    NumericError,
    ShapeMismatchError,
    VersionMismatchError,
)
from .model import MedicalVLBert, ModelConfig
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "CorruptFileError",
    "DataIntegrityError",
    "DimensionError",
    "HashMismatchError",
    "MedVLBertError",
    "MedicalVLBert",
    "ModelConfig",
    "NumericError",
    "ShapeMismatchError",
    "Tensor",
    "VersionMismatchError",
]
