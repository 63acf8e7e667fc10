"""Learned point cloud registration with attention-weighted virtual correspondences."""

from .errors import (CheckpointError, ConfigError, ContractError, DegenerateGeometryError, DimensionError,
                     DomainError, NonFiniteError, ParseError, TrainingDiverged, VcrError)
from .geometry import RigidTransform, apply, compose, invert, registration_error
from .model import ModelConfig, RegistrationNet

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigError", "ContractError", "DegenerateGeometryError", "DimensionError",
    "DomainError", "NonFiniteError", "ParseError", "TrainingDiverged", "VcrError",
    "RigidTransform", "apply", "compose", "invert", "registration_error",
    "ModelConfig", "RegistrationNet",
]
