"""Minimal reverse-mode differentiation over numpy arrays."""

from .array import (
    DEFAULT_DTYPE,
    DiffArray,
    absolute,
    add,
    as_array,
    backward,
    concat,
    div,
    exp,
    getitem,
    is_grad_enabled,
    log,
    make_op,
    matmul,
    mean,
    moveaxis,
    mul,
    neg,
    no_grad,
    power,
    reshape,
    roll,
    sqrt,
    square,
    stack,
    sub,
    sum_,
    tanh,
    transpose,
)
from .gradcheck import analytic_gradient, finite_difference_check, numeric_gradient
from .module import Module, glorot
from .nn import (
    activation,
    avg_pool,
    conv,
    conv3,
    deconv,
    deconv3,
    gelu,
    global_avg_pool,
    leaky_relu,
    linear,
    normalize,
    relu,
    resample_nearest,
    sigmoid,
    softmax_last,
)
from .optim import Adam, AdamState, adam_step

__all__ = [name for name in dir() if not name.startswith("_")]
