"""Finite-difference gradient verification for scalar-valued composites."""

from __future__ import annotations

import numpy as np

from .tensor import DTensor, ShapeError

__all__ = ["grad_check"]


def grad_check(f, inputs, h=1e-4, max_coords=None, rng=None):
    """Compare analytic gradients of ``f(*inputs)`` against central differences.

    ``f`` must return a scalar DTensor. Returns the maximum over all checked
    coordinates of ``|g_an - g_fd| / max(1, |g_an|, |g_fd|)``. When
    ``max_coords`` is given, a random subsample of coordinates per input is
    checked (used for large parameter sets).
    """
    inputs = list(inputs)
    for x in inputs:
        if not isinstance(x, DTensor):
            raise TypeError("grad_check inputs must be DTensors")
        x.requires_grad = True
        x.grad = None
    out = f(*inputs)
    if out.values.size != 1:
        raise ShapeError(f"grad_check requires a scalar output, got {out.shape}")
    out.backward()
    analytic = [x.grad.copy() if x.grad is not None else np.zeros_like(x.values)
                for x in inputs]

    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for x, g_an in zip(inputs, analytic):
        flat = x.values.reshape(-1)
        n = flat.size
        coords = np.arange(n)
        if max_coords is not None and n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(*inputs).values.reshape(()))
            flat[i] = orig - h
            fm = float(f(*inputs).values.reshape(()))
            flat[i] = orig
            g_fd = (fp - fm) / (2.0 * h)
            g = g_an.reshape(-1)[i]
            err = abs(g - g_fd) / max(1.0, abs(g), abs(g_fd))
            if err > worst:
                worst = err
    return worst
