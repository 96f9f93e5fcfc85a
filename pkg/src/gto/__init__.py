"""Graph-transformer neural operator for mesh-based PDE surrogates, on a numpy autodiff core."""

from .autodiff import Tape, Tensor, parameter, precision
from .errors import (ConfigError, CoverageError, DimensionError, GTOError, NumericError,
                     ParseError, UsageError, ValidationError)
from .meshgraph import DirectedEdgeSet, Mesh
from .model import BCSpec, GTOModel, ModelConfig

__all__ = [
    "BCSpec", "ConfigError", "CoverageError", "DimensionError", "DirectedEdgeSet", "GTOError",
    "GTOModel", "Mesh", "ModelConfig", "NumericError", "ParseError", "Tape", "Tensor",
    "UsageError", "ValidationError", "parameter", "precision",
]
