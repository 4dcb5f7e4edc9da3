"""Minimal reverse-mode autodiff over numpy arrays."""

from crossembed.autodiff.optim import Adam, AdamState, adam_step
from crossembed.autodiff.tensor import (
    L2_EPS,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    div,
    embedding_lookup,
    exp,
    gelu,
    hinge,
    getitem,
    layer_norm,
    l2_normalize,
    log,
    masked_fill,
    matmul,
    mean,
    mul,
    neg,
    relu,
    reshape,
    set_debug,
    sigmoid,
    softmax,
    sqrt,
    stack,
    sub,
    sum_,
    tanh,
    transpose,
)

__all__ = [
    "Adam", "AdamState", "adam_step", "L2_EPS", "Tape", "Tensor", "add", "as_tensor",
    "backward", "concat", "div", "embedding_lookup", "exp", "gelu", "hinge", "getitem", "layer_norm",
    "l2_normalize", "log", "masked_fill", "matmul", "mean", "mul", "neg", "relu", "reshape",
    "set_debug", "sigmoid", "softmax", "sqrt", "stack", "sub", "sum_", "tanh", "transpose",
]
