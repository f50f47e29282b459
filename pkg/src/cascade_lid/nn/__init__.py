"""Minimal numpy tensor library with reverse-mode autodiff and Adam."""

from . import ops
from .layers import Embedding, LayerNorm, Linear, LSTMCell, Module, parameter
from .optim import AdamState, adam_step
from .tensor import (
    NonFiniteError,
    Tape,
    Tensor,
    as_tensor,
    backward,
    custom_op,
    get_dtype,
    grad,
    no_grad,
    precision,
    set_precision,
)

stop_gradient = ops.stop_gradient

__all__ = [
    "AdamState", "Embedding", "LayerNorm", "Linear", "LSTMCell", "Module", "NonFiniteError",
    "Tape", "Tensor", "adam_step", "as_tensor", "backward", "custom_op", "get_dtype", "grad",
    "no_grad", "ops", "parameter", "precision", "set_precision", "stop_gradient",
]
