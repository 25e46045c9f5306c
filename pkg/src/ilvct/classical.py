"""Traditional reconstruction baselines: FDK, SART, and ASD-POCS."""

from __future__ import annotations

import math

import numpy as np

from .voldata import Volume
from .xproj import SamplingPlan, ramp_filter

__all__ = ["fdk", "sart", "asd_pocs", "tv_value", "tv_gradient",
           "interleaved_order", "ReconstructionError"]

EPS_DIV = 1e-8
TV_EPS = 1e-6


class ReconstructionError(ValueError):
    pass


def _grid(geom, dims):
    dims = tuple(int(d) for d in dims)
    voxel = 2.0 * geom.bbox_half / max(dims)
    origin = -(np.array(dims) - 1) / 2.0 * voxel
    return dims, voxel, origin


def _voxel_coords(dims, voxel, origin):
    axes = [origin[a] + np.arange(dims[a]) * voxel for a in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    return np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=-1)


def fdk(p, geom, dims):
    """Feldkamp-Davis-Kress reconstruction on a full circular trajectory.

    Cosine pre-weighting, per-row ramp filtering at the isocenter-plane pixel
    pitch, and distance-weighted backprojection scaled by the angular
    increment. Returns ``(volume clamped to [0, 1], raw unclamped field)``.
    """
    if p.n_views < 2:
        raise ReconstructionError(f"FDK needs at least 2 views, got {p.n_views}")
    dims, voxel, origin = _grid(geom, dims)
    scale = geom.dso / geom.dsd          # detector -> isocenter plane
    du = geom.det_pixel * scale
    u1 = (np.arange(geom.det_cols) + 0.5 - geom.det_cols / 2.0) * du
    v1 = (np.arange(geom.det_rows) + 0.5 - geom.det_rows / 2.0) * du
    cosw = geom.dso / np.sqrt(geom.dso ** 2 + u1[None, :] ** 2 + v1[:, None] ** 2)

    pts = _voxel_coords(dims, voxel, origin)
    out = np.zeros(pts.shape[0])
    dbeta = 2.0 * math.pi / p.n_views
    for n in range(p.n_views):
        k = int(p.view_indices[n])
        b = geom.angles[k]
        e_src = np.array([math.cos(b), math.sin(b), 0.0])
        u_hat = np.array([-math.sin(b), math.cos(b), 0.0])
        filt = ramp_filter(p.images[n] * cosw, spacing=du)
        depth = geom.dso - pts @ e_src
        w = (geom.dso / depth) ** 2
        uu = (pts @ u_hat) * geom.dso / depth
        vv = pts[:, 2] * geom.dso / depth
        ci = uu / du + geom.det_cols / 2.0 - 0.5
        ri = vv / du + geom.det_rows / 2.0 - 0.5
        inside = ((ci >= 0) & (ci <= geom.det_cols - 1)
                  & (ri >= 0) & (ri <= geom.det_rows - 1) & (depth > 0))
        ci_c = np.clip(ci, 0, geom.det_cols - 1)
        ri_c = np.clip(ri, 0, geom.det_rows - 1)
        c0 = np.minimum(ci_c.astype(np.intp), geom.det_cols - 2)
        r0 = np.minimum(ri_c.astype(np.intp), geom.det_rows - 2)
        fc = ci_c - c0
        fr = ri_c - r0
        samp = (filt[r0, c0] * (1 - fr) * (1 - fc) + filt[r0, c0 + 1] * (1 - fr) * fc
                + filt[r0 + 1, c0] * fr * (1 - fc) + filt[r0 + 1, c0 + 1] * fr * fc)
        out += w * samp * inside
    out *= dbeta / 2.0
    raw = out.reshape(dims)
    return Volume(np.clip(raw, 0.0, 1.0), voxel, origin), raw


def interleaved_order(k):
    """Deterministic index-interleaved view order: 0, K/2, K/4, 3K/4, ..."""
    n = 1
    while n < k:
        n *= 2
    bits = n.bit_length() - 1
    order = []
    for i in range(n):
        r = int(f"{i:0{bits}b}"[::-1], 2) if bits else 0
        if r < k:
            order.append(r)
    return order


def _plans(geom, p, dims, voxel, origin):
    return [SamplingPlan(dims, voxel, origin, geom, int(k))
            for k in p.view_indices]


def sart(p, geom, dims, iters=20, relax=0.3, x0=None, callback=None):
    """Simultaneous algebraic reconstruction with per-view updates.

    Each sweep cycles the views in interleaved order applying
    ``x <- clamp+(x + relax * A_v^T((b_v - A_v x) / rowsum_v) / colsum_v)``
    with row/column sums from projecting and backprojecting all-ones fields.
    """
    if iters < 1:
        raise ReconstructionError(f"iters must be >= 1, got {iters}")
    if not 0.0 < relax <= 1.0:
        raise ReconstructionError(f"relax must be in (0, 1], got {relax}")
    dims, voxel, origin = _grid(geom, dims)
    plans = _plans(geom, p, dims, voxel, origin)
    rowsums = [pl.apply(np.ones(dims)) for pl in plans]
    colsums = [pl.apply_adjoint(np.ones((geom.det_rows, geom.det_cols)))
               for pl in plans]
    x = np.zeros(dims) if x0 is None else np.array(x0, dtype=np.float64)
    order = interleaved_order(p.n_views)
    for it in range(iters):
        for v in order:
            resid = (p.images[v] - plans[v].apply(x)) / (rowsums[v] + EPS_DIV)
            x += relax * plans[v].apply_adjoint(resid) / (colsums[v] + EPS_DIV)
            np.clip(x, 0.0, None, out=x)
        if callback is not None:
            callback(it, x)
    return Volume(np.clip(x, 0.0, 1.0), voxel, origin)


def tv_value(x, eps=TV_EPS):
    """Isotropic total variation: sum of sqrt(dx^2 + dy^2 + dz^2 + eps^2)."""
    gx = np.diff(x, axis=0, append=x[-1:, :, :])
    gy = np.diff(x, axis=1, append=x[:, -1:, :])
    gz = np.diff(x, axis=2, append=x[:, :, -1:])
    return float(np.sum(np.sqrt(gx ** 2 + gy ** 2 + gz ** 2 + eps ** 2)))


def tv_gradient(x, eps=TV_EPS):
    """Analytic gradient of ``tv_value`` (divergence of the normalized grad)."""
    gx = np.diff(x, axis=0, append=x[-1:, :, :])
    gy = np.diff(x, axis=1, append=x[:, -1:, :])
    gz = np.diff(x, axis=2, append=x[:, :, -1:])
    phi = np.sqrt(gx ** 2 + gy ** 2 + gz ** 2 + eps ** 2)
    tx, ty, tz = gx / phi, gy / phi, gz / phi
    g = np.zeros_like(x)
    g -= tx
    g[1:, :, :] += tx[:-1, :, :]
    g -= ty
    g[:, 1:, :] += ty[:, :-1, :]
    g -= tz
    g[:, :, 1:] += tz[:, :, :-1]
    return g


def asd_pocs(p, geom, dims, iters=20, relax=0.3, tv_steps=10, tv_alpha_init=0.2,
             tv_decay=0.95, callback=None):
    """SART data-fidelity passes alternated with TV steepest-descent steps.

    The TV step length is ``tv_alpha * ||data update||`` with multiplicative
    decay per outer iteration; a backtracking guard halves the step until the
    TV functional does not increase. Nonnegativity is enforced every outer
    iteration.
    """
    if tv_steps < 1:
        raise ReconstructionError(f"tv_steps must be >= 1, got {tv_steps}")
    if iters < 1:
        raise ReconstructionError(f"iters must be >= 1, got {iters}")
    if not 0.0 < relax <= 1.0:
        raise ReconstructionError(f"relax must be in (0, 1], got {relax}")
    dims, voxel, origin = _grid(geom, dims)
    plans = _plans(geom, p, dims, voxel, origin)
    rowsums = [pl.apply(np.ones(dims)) for pl in plans]
    colsums = [pl.apply_adjoint(np.ones((geom.det_rows, geom.det_cols)))
               for pl in plans]
    order = interleaved_order(p.n_views)
    x = np.zeros(dims)
    alpha = tv_alpha_init
    for it in range(iters):
        x_prev = x.copy()
        for v in order:
            resid = (p.images[v] - plans[v].apply(x)) / (rowsums[v] + EPS_DIV)
            x += relax * plans[v].apply_adjoint(resid) / (colsums[v] + EPS_DIV)
            np.clip(x, 0.0, None, out=x)
        step = alpha * np.linalg.norm(x - x_prev)
        for _ in range(tv_steps):
            if step == 0.0:
                break
            g = tv_gradient(x)
            ng = np.linalg.norm(g)
            if ng == 0.0:
                break
            tv_x = tv_value(x)
            s = step
            cand = x - s * g / ng
            tries = 0
            while tv_value(cand) > tv_x and tries < 20:
                s *= 0.5
                cand = x - s * g / ng
                tries += 1
            if tv_value(cand) > tv_x:
                break
            x = cand
        np.clip(x, 0.0, None, out=x)
        alpha *= tv_decay
        if callback is not None:
            callback(it, x)
    return Volume(np.clip(x, 0.0, 1.0), voxel, origin)
