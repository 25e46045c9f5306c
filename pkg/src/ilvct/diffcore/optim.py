"""Parameters, AdamW with decoupled weight decay, and the warmup/cosine schedule."""

from __future__ import annotations

import math

import numpy as np

from .tensor import DTensor

__all__ = ["Param", "uniform_init", "zeros_init", "adamw_step", "cosine_warmup_lr"]


class Param:
    """A named trainable tensor with AdamW moment slots."""

    __slots__ = ("name", "tensor", "m", "v", "initializer")

    def __init__(self, name, values, initializer="uniform"):
        self.name = name
        self.tensor = DTensor(np.asarray(values, dtype=np.float64), requires_grad=True)
        self.m = np.zeros_like(self.tensor.values)
        self.v = np.zeros_like(self.tensor.values)
        self.initializer = initializer

    @property
    def values(self):
        return self.tensor.values

    @property
    def shape(self):
        return self.tensor.values.shape

    def zero_grad(self):
        self.tensor.grad = None

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape})"


def uniform_init(rng, name, shape, fan_in):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization."""
    bound = 1.0 / math.sqrt(fan_in)
    return Param(name, rng.uniform(-bound, bound, size=shape))


def zeros_init(name, shape):
    return Param(name, np.zeros(shape), initializer="zeros")


def adamw_step(params, lr, beta1=0.9, beta2=0.95, weight_decay=0.0, t=1, eps=1e-8):
    """One AdamW update (decoupled weight decay, bias-corrected moments).

    ``t`` is the 1-based step count shared by all parameters.
    """
    if t < 1:
        raise ValueError(f"adamw_step requires t >= 1, got {t}")
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p in params:
        g = p.tensor.grad
        if g is None:
            g = np.zeros_like(p.values)
        p.m[...] = beta1 * p.m + (1.0 - beta1) * g
        p.v[...] = beta2 * p.v + (1.0 - beta2) * g * g
        mhat = p.m / bc1
        vhat = p.v / bc2
        p.tensor.values -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p.values)


def cosine_warmup_lr(step, warmup=1000, total=10000, base_lr=1e-4):
    """Linear warmup to ``base_lr`` then cosine decay to zero at ``total``."""
    if total <= warmup:
        raise ValueError(f"total ({total}) must exceed warmup ({warmup})")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step <= warmup:
        return base_lr * step / warmup
    frac = (step - warmup) / (total - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))
