"""Dense tensors, reverse-mode autodiff, and the loss primitives."""

from . import kernels
from .ops import (
    add,
    causal_softmax,
    cosine_distance,
    cross_entropy,
    embedding,
    kl_divergence,
    log_softmax,
    matmul,
    mean,
    mul,
    reshape,
    rmsnorm,
    rope,
    scale,
    silu_mul,
    softmax,
    sub,
    transpose,
)
from .ops import sum as tsum
from .tensor import ComputeGraph, Tensor, backward, is_grad_enabled, no_grad

__all__ = [
    "ComputeGraph",
    "Tensor",
    "add",
    "backward",
    "causal_softmax",
    "cosine_distance",
    "cross_entropy",
    "embedding",
    "is_grad_enabled",
    "kernels",
    "kl_divergence",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "reshape",
    "rmsnorm",
    "rope",
    "scale",
    "silu_mul",
    "softmax",
    "sub",
    "transpose",
    "tsum",
]
