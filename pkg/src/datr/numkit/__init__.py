"""Minimal dense-tensor substrate with reverse-mode differentiation."""

from . import ops
from .gradcheck import grad_check, numeric_grad
from .nn import LayerNorm, Linear, Module, param_count, parameter
from .ops import (
    avg_pool,
    bilinear_resize,
    clip,
    concat,
    gelu,
    layernorm,
    linear,
    log,
    matmul,
    softmax,
    unfold,
)
from .optim import AdamW, adamw_step
from .rng import Rng, rng_normal, rng_uniform
from .tensor import DimensionError, NonFiniteError, Tensor, no_grad, set_debug

__all__ = [
    "AdamW",
    "DimensionError",
    "LayerNorm",
    "Linear",
    "Module",
    "NonFiniteError",
    "Rng",
    "Tensor",
    "adamw_step",
    "avg_pool",
    "bilinear_resize",
    "clip",
    "concat",
    "gelu",
    "grad_check",
    "layernorm",
    "linear",
    "log",
    "matmul",
    "no_grad",
    "numeric_grad",
    "ops",
    "param_count",
    "parameter",
    "rng_normal",
    "rng_uniform",
    "set_debug",
    "softmax",
    "unfold",
]
