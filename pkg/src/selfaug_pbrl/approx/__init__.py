"""Minimal differentiable function approximation: MLPs, Adam, checkpoints."""

from . import kernels
from .adam import AdamState, NonFiniteGradientError, ScalarAdam, adam_step
from .checkpoint import CheckpointError, load_network, save_network
from .mlp import (
    MLP,
    MLPSpec,
    ShapeError,
    backward,
    backward_cached,
    forward,
    forward_cached,
    init_params,
    input_gradient,
)

__all__ = [
    "MLP",
    "MLPSpec",
    "ShapeError",
    "AdamState",
    "ScalarAdam",
    "NonFiniteGradientError",
    "CheckpointError",
    "adam_step",
    "backward",
    "backward_cached",
    "forward",
    "forward_cached",
    "init_params",
    "input_gradient",
    "kernels",
    "load_network",
    "save_network",
]
