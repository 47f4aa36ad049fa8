from .tensor import (
    Tensor,
    add,
    avg_pool2d,
    backward,
    concat,
    conv2d,
    div,
    enable_grad,
    exp,
    grad_enabled,
    graph_saved_values,
    leaky_relu,
    matmul,
    mul,
    neg,
    no_grad,
    pow_scalar,
    relu,
    reshape,
    sigmoid,
    silu,
    sqrt,
    square,
    sub,
    tabs,
    tanh,
    tmean,
    tslice,
    tsum,
    upsample_nearest,
)
from .checkpoint import checkpoint

__all__ = [
    "Tensor", "add", "sub", "mul", "div", "neg", "pow_scalar", "square",
    "sqrt", "tabs", "exp", "tanh", "sigmoid", "relu", "leaky_relu", "silu",
    "tsum", "tmean", "reshape", "concat", "tslice", "matmul", "conv2d",
    "avg_pool2d", "upsample_nearest", "backward", "checkpoint",
    "graph_saved_values", "no_grad", "enable_grad", "grad_enabled",
]
