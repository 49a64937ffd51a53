"""Minimal reverse-mode autodiff over numpy arrays."""

from . import ops
from .gradcheck import check_gradients, numerical_grad, rel_error
from .ops import (
    DegenerateBatchError,
    batch_norm2d,
    conv2d,
    conv_transpose2d,
    leaky_relu,
    relu,
    scaled_atan,
    sigmoid,
)
from .optim import Adam, AdamState, adam_step
from .rng import RngState, derive_seed
from .serialize import CheckpointError, load_arrays, save_arrays
from .tensor import (
    GradientError,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    grad_enabled,
    no_grad,
)

__all__ = [
    "Adam", "AdamState", "CheckpointError", "DegenerateBatchError", "GradientError", "NonFiniteError",
    "RngState", "ShapeError", "Tape", "Tensor", "adam_step", "backward", "batch_norm2d",
    "check_gradients", "conv2d", "conv_transpose2d", "derive_seed", "grad_enabled", "leaky_relu",
    "load_arrays", "no_grad", "numerical_grad", "ops", "rel_error", "relu", "save_arrays",
    "scaled_atan", "sigmoid",
]
