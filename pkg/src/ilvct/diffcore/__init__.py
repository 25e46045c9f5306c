"""Differentiable computation substrate shared by all neural modules."""

from .tensor import (
    DTensor, ShapeError, constant,
    add, sub, mul, div, neg, exp, sqrt, absolute, tanh, gelu, softplus, clip,
    matmul, reshape, permute, concat, take_slice, take, scatter_add,
    dsum, dmean, dmax, softmax, layer_norm, linear, scaled_dot_attention,
)
from .nnops import conv3d, conv_transpose3d, trilinear_resample, bilinear_sample2d
from .optim import Param, uniform_init, zeros_init, adamw_step, cosine_warmup_lr
from .gradcheck import grad_check
from .checkpoint import save_checkpoint, load_checkpoint, CheckpointError

__all__ = [
    "DTensor", "ShapeError", "constant",
    "add", "sub", "mul", "div", "neg", "exp", "sqrt", "absolute", "tanh",
    "gelu", "softplus", "clip",
    "matmul", "reshape", "permute", "concat", "take_slice", "take", "scatter_add",
    "dsum", "dmean", "dmax", "softmax", "layer_norm", "linear",
    "scaled_dot_attention",
    "conv3d", "conv_transpose3d", "trilinear_resample", "bilinear_sample2d",
    "Param", "uniform_init", "zeros_init", "adamw_step", "cosine_warmup_lr",
    "grad_check",
    "save_checkpoint", "load_checkpoint", "CheckpointError",
]
