"""Minimal N-d array autodiff core: the layers the extractor and head need.

Reverse-mode gradients over numpy arrays, with a no-grad context for
inference. Forward ops are verified against nested-loop oracles and central
finite differences in the test suite.
"""

from .tensor import Tensor, no_grad, grad_enabled
from .ops import (
    add,
    avgpool2d,
    batch_norm,
    concat,
    conv2d,
    cross_entropy,
    dense,
    dropout,
    exp,
    global_avg_pool,
    log,
    matmul,
    maxpool2d,
    mean,
    mul,
    relu,
    reshape,
    sigmoid,
    softmax,
    tsum,
)
from .layers import BatchNorm2d, Conv2d, Dense, Dropout, Layer, he_uniform

__all__ = [
    "Tensor", "no_grad", "grad_enabled",
    "add", "avgpool2d", "batch_norm", "concat", "conv2d", "cross_entropy",
    "dense", "dropout", "exp", "global_avg_pool", "log", "matmul",
    "maxpool2d", "mean", "mul", "relu", "reshape", "sigmoid", "softmax",
    "tsum",
    "BatchNorm2d", "Conv2d", "Dense", "Dropout", "Layer", "he_uniform",
]
