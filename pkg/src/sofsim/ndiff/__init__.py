"""Minimal reverse-mode automatic differentiation for the SoFGAN model."""
from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from .layers import MLP, BatchNorm1d, Linear, LSTMCell, Module, lstm_step, reparameterize
from .optim import AdamState, adam_step
from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    concat,
    constant,
    detach,
    exp,
    getitem,
    l2_norm,
    log,
    lstm_gates,
    matmul,
    mean,
    min,
    mul,
    parameter,
    relu,
    repeat_rows,
    reshape,
    sigmoid,
    square,
    stack,
    sub,
    sum,
    tanh,
    transpose,
)
from .tensor import batchnorm as batchnorm_op

__all__ = [
    "AdamState", "BatchNorm1d", "CheckpointError", "LSTMCell", "Linear", "MLP", "Module",
    "ShapeError", "Tensor", "adam_step", "add", "as_tensor", "batchnorm_op", "concat",
    "constant", "detach", "exp", "getitem", "l2_norm", "log", "lstm_gates", "lstm_step", "matmul", "mean",
    "min", "mul", "parameter", "read_checkpoint", "relu", "repeat_rows", "reparameterize", "reshape",
    "sigmoid", "square", "stack", "sub", "sum", "tanh", "transpose", "write_checkpoint",
]
