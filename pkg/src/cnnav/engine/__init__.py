"""Tensor engine: dense float tensors, primitives and reverse-mode differentiation."""
from .gradcheck import CoordinateCheck, GradcheckReport, gradcheck, param_group
from .ops import (
    activation,
    add,
    batchnorm2d,
    broadcast_mul,
    channel_slice,
    conv2d,
    conv_transpose2d,
    elementwise,
    gap,
    linear,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax_cross_entropy,
    sum_all,
    tanh,
    upsample_nearest,
)
from .tensor import (
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    backward,
    current_tape,
    float_dtype,
    precision,
    ravel_index,
    shadow_mode,
    unravel_index,
)

__all__ = [
    "CoordinateCheck",
    "GradcheckReport",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "activation",
    "add",
    "backward",
    "batchnorm2d",
    "broadcast_mul",
    "channel_slice",
    "conv2d",
    "conv_transpose2d",
    "current_tape",
    "elementwise",
    "float_dtype",
    "gap",
    "gradcheck",
    "linear",
    "mul",
    "param_group",
    "precision",
    "ravel_index",
    "relu",
    "reshape",
    "scale",
    "shadow_mode",
    "sigmoid",
    "softmax_cross_entropy",
    "sum_all",
    "tanh",
    "unravel_index",
    "upsample_nearest",
]
