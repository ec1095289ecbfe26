from .core import (
    NonFiniteError,
    ShapeError,
    Tensor,
    UnusedInputWarning,
    grad,
    is_grad_enabled,
    no_grad,
    set_grad_enabled,
    strict_mode,
    tensor,
)
from .nn import (
    PRIMITIVES,
    add_channel_bias,
    conv2d,
    exact_conv,
    flatten,
    instance_norm,
    linear,
    log_softmax,
    maxpool2d,
    mul,
    primitive_forward,
    relu,
    sigmoid,
    softmax_xent,
)
from .tape import GradientMap, GradMode, Tape, backward, grad_check

__all__ = [
    "GradMode",
    "GradientMap",
    "NonFiniteError",
    "PRIMITIVES",
    "ShapeError",
    "Tape",
    "Tensor",
    "UnusedInputWarning",
    "add_channel_bias",
    "backward",
    "conv2d",
    "exact_conv",
    "flatten",
    "grad",
    "grad_check",
    "instance_norm",
    "is_grad_enabled",
    "linear",
    "log_softmax",
    "maxpool2d",
    "mul",
    "no_grad",
    "primitive_forward",
    "relu",
    "set_grad_enabled",
    "sigmoid",
    "softmax_xent",
    "strict_mode",
    "tensor",
]
