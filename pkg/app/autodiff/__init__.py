"""Tensor primitives with reverse-mode differentiation (torch-backed)."""

from app.autodiff.ops import (
    check_finite,
    conv2d,
    flatten,
    linear,
    maxpool2d,
    one_hot,
    relu,
    softmax_cross_entropy,
    squared_norm,
)
from app.autodiff.tape import Tape, backward, gradients, set_deterministic

__all__ = [
    "Tape",
    "backward",
    "check_finite",
    "conv2d",
    "flatten",
    "gradients",
    "linear",
    "maxpool2d",
    "one_hot",
    "relu",
    "set_deterministic",
    "softmax_cross_entropy",
    "squared_norm",
]
