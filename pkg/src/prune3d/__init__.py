"""Structured pruning of 3D convolutional networks with incremental group regularization."""

from .errors import (
    ConfigurationError,
    ConvergenceError,
    DomainError,
    InfeasiblePlanError,
    NumericError,
    PruneError,
    ShapeError,
    UsageError,
)
from .tensor_core import ConvSpec, conv3d_direct, conv3d_gemm, im2col3d, matmul, svd_components

__version__ = "0.1.0"
