"""Forward line-integral projector, its exact adjoint, and ramp filtering.

The projector samples the volume by trilinear interpolation at a fixed step
``h = voxel_size / 2`` along each detector-pixel ray and scales by ``h``
(Joseph-style). The backprojector transposes exactly the same interpolation
weights, so the pair is an adjoint pair as linear operators up to float
round-off. Out-of-grid samples contribute zero.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .geom import view_rays
from .voldata import ProjectionSet, Volume

__all__ = ["forward_project", "back_project", "ramp_filter", "SamplingPlan"]

_CORNERS = [(dx, dy, dz) for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)]


class SamplingPlan:
    """Precomputed ray-sample positions for one view over one voxel grid.

    Reused by SART-style solvers that sweep the same views repeatedly.
    """

    def __init__(self, dims, voxel_size, origin, geom, view_index, step_scale=0.5):
        self.dims = tuple(dims)
        self.h = voxel_size * step_scale
        origins, dirs = view_rays(geom, view_index)
        shape2d = origins.shape[:2]
        o = origins.reshape(-1, 3)
        d = dirs.reshape(-1, 3)

        lo = np.asarray(origin) - voxel_size / 2.0
        hi = np.asarray(origin) + (np.array(self.dims) - 0.5) * voxel_size
        with np.errstate(divide="ignore"):
            inv = 1.0 / d
        ta = (lo - o) * inv
        tb = (hi - o) * inv
        t0 = np.maximum(np.minimum(ta, tb).max(axis=1), 0.0)
        t1 = np.maximum(ta, tb).min(axis=1)
        n_steps = np.maximum(np.ceil((t1 - t0) / self.h), 0.0).astype(np.intp)
        n_steps[t1 <= t0] = 0
        s_max = int(n_steps.max()) if n_steps.size else 0

        k = np.arange(s_max)
        t = t0[:, None] + (k[None, :] + 0.5) * self.h
        pos = o[:, None, :] + t[..., None] * d[:, None, :]
        gc = (pos - np.asarray(origin)) / voxel_size
        i0 = np.floor(gc).astype(np.int16)
        self.frac = (gc - i0).astype(np.float32)
        self.i0 = i0
        self.step_mask = (k[None, :] < n_steps[:, None])
        self.shape2d = shape2d
        self.n_pixels = o.shape[0]
        self.n_samples = s_max

    def _corner_terms(self):
        nx, ny, nz = self.dims
        fx = self.frac[..., 0].astype(np.float64)
        fy = self.frac[..., 1].astype(np.float64)
        fz = self.frac[..., 2].astype(np.float64)
        ix = self.i0[..., 0].astype(np.intp)
        iy = self.i0[..., 1].astype(np.intp)
        iz = self.i0[..., 2].astype(np.intp)
        for dx, dy, dz in _CORNERS:
            jx, jy, jz = ix + dx, iy + dy, iz + dz
            valid = ((jx >= 0) & (jx < nx) & (jy >= 0) & (jy < ny)
                     & (jz >= 0) & (jz < nz) & self.step_mask)
            w = ((fx if dx else 1.0 - fx)
                 * (fy if dy else 1.0 - fy)
                 * (fz if dz else 1.0 - fz)) * valid
            idx = (np.clip(jx, 0, nx - 1) * ny
                   + np.clip(jy, 0, ny - 1)) * nz + np.clip(jz, 0, nz - 1)
            yield idx, w

    def apply(self, vol_data):
        """Forward map: voxel field -> one detector image."""
        flat = vol_data.reshape(-1)
        acc = np.zeros((self.n_pixels, self.n_samples))
        for idx, w in self._corner_terms():
            acc += w * flat[idx]
        return (acc.sum(axis=1) * self.h).reshape(self.shape2d)

    def apply_adjoint(self, image):
        """Adjoint map: one detector image -> voxel field."""
        nvox = int(np.prod(self.dims))
        out = np.zeros(nvox)
        pix = image.reshape(-1, 1) * self.h
        for idx, w in self._corner_terms():
            vals = w * pix
            out += np.bincount(idx.reshape(-1), weights=vals.reshape(-1),
                               minlength=nvox)
        return out.reshape(self.dims)


def forward_project(v, geom, view_indices, noise_sigma=0.0, rng=None):
    """Project a Volume into line-integral detector images for the given views.

    ``noise_sigma`` optionally adds Gaussian noise (in line-integral units);
    the default is noiseless. Views are projected in parallel when the
    ``ILV_THREADS`` environment variable is greater than 1; the result is
    independent of the worker count.
    """
    view_indices = np.asarray(view_indices, dtype=np.intp)
    images = np.empty((view_indices.size, geom.det_rows, geom.det_cols))

    def project_one(n):
        plan = SamplingPlan(v.dims, v.voxel_size, v.origin, geom,
                            int(view_indices[n]))
        images[n] = plan.apply(v.data)

    workers = max(1, int(os.environ.get("ILV_THREADS", "1")))
    if workers > 1 and view_indices.size > 1:
        with ThreadPoolExecutor(min(workers, view_indices.size)) as pool:
            list(pool.map(project_one, range(view_indices.size)))
    else:
        for n in range(view_indices.size):
            project_one(n)
    if noise_sigma > 0.0:
        if rng is None:
            rng = np.random.default_rng(0)
        images = np.clip(images + rng.normal(0.0, noise_sigma, images.shape), 0.0, None)
    return ProjectionSet(geom, images, view_indices)


def back_project(p, geom, dims, voxel_size=None, origin=None):
    """Exact adjoint of ``forward_project`` accumulated over all views.

    Returns the raw voxel field (not clamped); dims fix the target grid.
    When ``voxel_size`` is omitted the grid spans the geometry bounding box.
    """
    dims = tuple(dims)
    if voxel_size is None:
        voxel_size = 2.0 * geom.bbox_half / max(dims)
    if origin is None:
        origin = -(np.array(dims) - 1) / 2.0 * voxel_size
    out = np.zeros(dims)
    for n in range(p.n_views):
        k = int(p.view_indices[n])
        plan = SamplingPlan(dims, voxel_size, origin, geom, k)
        out += plan.apply_adjoint(p.images[n])
    return out


def ramp_filter(row, apodization="none", spacing=1.0):
    """Ramp-filter a 1D signal in the frequency domain.

    Pads to at least twice the length (next power of two) with edge
    replication to suppress circular wrap-around (a constant row stays
    constant and is killed exactly by the DC zero), multiplies the spectrum
    by |f| (optionally Hann apodized), and returns the leading ``len(row)``
    samples.
    """
    row = np.asarray(row, dtype=np.float64)
    n = row.shape[-1]
    if n < 2:
        raise ValueError(f"ramp_filter needs length >= 2, got {n}")
    if apodization not in ("none", "hann"):
        raise ValueError(f"unknown apodization {apodization!r}")
    npad = 1
    while npad < 2 * n:
        npad *= 2
    pad = npad - n
    right = pad // 2
    left = pad - right
    padded = np.concatenate([
        np.repeat(row[..., :1], left, axis=-1),
        row,
        np.repeat(row[..., -1:], right, axis=-1),
    ], axis=-1)
    freq = np.fft.rfftfreq(npad, d=spacing)
    filt = np.abs(freq)
    if apodization == "hann":
        f_nyq = 0.5 / spacing
        filt = filt * 0.5 * (1.0 + np.cos(np.pi * freq / f_nyq))
    spec = np.fft.rfft(padded, axis=-1)
    out = np.fft.irfft(spec * filt, n=npad, axis=-1)
    return out[..., left:left + n]
