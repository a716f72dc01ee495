"""Tensor math with reverse-mode autodiff, Adam, and a gradient oracle."""

from .gradcheck import grad_check
from .kernels import active_backend
from .optim import Adam, AdamState, adam_step
from .tape import (
    DEFAULT_DTYPE,
    Tensor,
    adain,
    add,
    add_scalar,
    as_tensor,
    avg_pool2x,
    backward,
    check_finite,
    cmul,
    conv2d,
    conv3x3,
    conv3x3_wgrad,
    dense,
    fill,
    flip2,
    frozen,
    grad,
    grad_enabled,
    inject_noise,
    leaky_relu,
    matmul,
    mean_all,
    mul,
    mul_scalar,
    neg,
    no_grad,
    pool_sum2x,
    repeat_batch,
    repeat_chan,
    repeat_cols,
    repeat_hw,
    repeat_rows,
    reshape,
    rsqrt,
    sigmoid,
    softplus,
    square,
    sub,
    sum_all,
    sum_batch,
    sum_chan,
    sum_cols,
    sum_hw,
    sum_rows,
    trace,
    transpose,
    upsample2x,
)

__all__ = [
    "Adam",
    "AdamState",
    "DEFAULT_DTYPE",
    "Tensor",
    "active_backend",
    "adain",
    "adam_step",
    "add",
    "add_scalar",
    "as_tensor",
    "avg_pool2x",
    "backward",
    "check_finite",
    "cmul",
    "conv2d",
    "conv3x3",
    "conv3x3_wgrad",
    "dense",
    "fill",
    "flip2",
    "frozen",
    "grad",
    "grad_check",
    "grad_enabled",
    "inject_noise",
    "leaky_relu",
    "matmul",
    "mean_all",
    "mul",
    "mul_scalar",
    "neg",
    "no_grad",
    "pool_sum2x",
    "repeat_batch",
    "repeat_chan",
    "repeat_cols",
    "repeat_hw",
    "repeat_rows",
    "reshape",
    "rsqrt",
    "sigmoid",
    "softplus",
    "square",
    "sub",
    "sum_all",
    "sum_batch",
    "sum_chan",
    "sum_cols",
    "sum_hw",
    "sum_rows",
    "trace",
    "transpose",
    "upsample2x",
]
