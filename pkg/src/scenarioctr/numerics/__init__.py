"""Tensor arithmetic with reverse-mode differentiation, Adam, gradient checks."""

from .gradcheck import check_gradients, max_rel_error, numeric_grad
from .optim import Adam, AdamState, adam_step, new_param, xavier_uniform
from .tensor import (
    Gradients,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    clip,
    concat,
    cosine,
    div,
    gather_rows,
    log,
    matmul,
    mul,
    neg,
    relu,
    reshape,
    sigmoid,
    softmax,
    stop_gradient,
    sub,
    tmean,
    transpose,
    tsum,
    where,
)

__all__ = [
    "Adam",
    "AdamState",
    "Gradients",
    "Tape",
    "Tensor",
    "adam_step",
    "add",
    "as_tensor",
    "backward",
    "check_gradients",
    "clip",
    "concat",
    "cosine",
    "div",
    "gather_rows",
    "log",
    "matmul",
    "max_rel_error",
    "mul",
    "neg",
    "new_param",
    "numeric_grad",
    "relu",
    "reshape",
    "sigmoid",
    "softmax",
    "stop_gradient",
    "sub",
    "tmean",
    "transpose",
    "tsum",
    "where",
    "xavier_uniform",
]
