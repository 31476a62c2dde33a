"""A small reverse-mode differentiation engine over a fixed operator set."""

from .gradcheck import GradcheckReport, gradcheck
from .ops import (
    abs_mean,
    add,
    cast,
    concat_channels,
    conv3d,
    forward_diff,
    l1_mean,
    leaky_relu,
    mul,
    scale,
    softmax_channels,
    sub,
    total,
    upsample_nearest2x,
)
from .optim import AdamState, adam_step
from .tensor import Tensor, backward, grad_enabled, no_grad, topological_order

__all__ = [
    "AdamState", "GradcheckReport", "Tensor", "abs_mean", "adam_step", "add", "backward",
    "cast", "concat_channels", "conv3d", "forward_diff", "grad_enabled", "gradcheck",
    "l1_mean", "leaky_relu", "mul", "no_grad", "scale", "softmax_channels", "sub",
    "topological_order", "total", "upsample_nearest2x",
]
