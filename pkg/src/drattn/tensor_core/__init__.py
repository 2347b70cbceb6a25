"""Minimal float64 tensor engine with reverse-mode autodiff."""
from . import checkpoint, kernels, ops
from .layers import Conv1x1, Conv3x3, Linear
from .optim import AdamState, adam_step
from .tensor import Parameter, ShapeError, Tape, Tensor, backward

__all__ = [
    "AdamState",
    "Conv1x1",
    "Conv3x3",
    "Linear",
    "Parameter",
    "ShapeError",
    "Tape",
    "Tensor",
    "adam_step",
    "backward",
    "checkpoint",
    "kernels",
    "ops",
]
