"""A small reverse-mode differentiation engine over numpy arrays."""

from . import ops
from .gradcheck import grad_check
from .ops import (
    add,
    concat,
    conv3d,
    getitem,
    global_avg_pool,
    leaky_relu,
    linear,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    softmax,
    sub,
    transpose,
    upsample2,
)
from .optim import MomentumSGD, sgd_momentum_step
from .tensor import Graph, Tensor, backward

__all__ = [
    "Graph",
    "MomentumSGD",
    "Tensor",
    "add",
    "backward",
    "concat",
    "conv3d",
    "getitem",
    "global_avg_pool",
    "grad_check",
    "leaky_relu",
    "linear",
    "matmul",
    "mean",
    "mul",
    "ops",
    "relu",
    "reshape",
    "sgd_momentum_step",
    "softmax",
    "sub",
    "transpose",
    "upsample2",
]
