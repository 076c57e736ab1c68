"""Minimal numpy tensor engine with reverse-mode autodiff."""

from .gradcheck import GradCheckReport, grad_check, numerical_grad
from .ops import (
    add,
    avg_pool3d,
    batch_norm,
    concat,
    conv3d_grouped,
    div,
    dropout,
    elementwise,
    exp,
    gelu,
    index,
    layer_norm,
    linear,
    log,
    log_softmax,
    matmul,
    mean,
    mean_pool_spatial,
    mul,
    power,
    relu,
    reshape,
    sigmoid,
    softmax,
    sqrt,
    sub,
    tanh,
    transpose,
    trilinear_interpolate,
)
from .ops import sum as tsum
from .tensor import GraphError, Tensor, backward, is_grad_enabled, no_grad

__all__ = [
    "GradCheckReport", "GraphError", "Tensor", "add", "avg_pool3d", "backward",
    "batch_norm", "concat", "conv3d_grouped", "div", "dropout", "elementwise",
    "exp", "gelu", "grad_check", "index", "is_grad_enabled", "layer_norm",
    "linear", "log", "log_softmax", "matmul", "mean", "mean_pool_spatial", "mul",
    "no_grad", "numerical_grad", "power", "relu", "reshape", "sigmoid", "softmax", "sqrt", "sub",
    "tanh", "transpose", "trilinear_interpolate", "tsum",
]
