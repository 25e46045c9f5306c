"""Gaussian-primitive volume decoding, X-ray rendering, and voxelization.

The final latent volume is upsampled by a transposed convolution, decoded to
one anisotropic Gaussian primitive per voxel by an MLP head with constrained
activations, and turned into detector images (closed-form line integrals of
the Gaussian density along pixel rays) or CT volumes (density field sampled at
voxel centers). Both renderers are differentiable in every Gaussian
parameter; a Mahalanobis-radius-3 cut keeps the candidate pair lists small and
can be disabled for gradient checks.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import DTensor, Param, uniform_init, zeros_init
from .geom import project_point, view_rays
from .voldata import Volume

__all__ = ["GaussianSet", "GaussianTensors", "GsplatError", "DecoderWeights",
           "build_decoder", "upsample_latent", "decode_gaussians",
           "gaussian_ray_integral", "render_xray", "voxelize",
           "save_gaussians", "load_gaussians"]

MAHALANOBIS_CUT = 3.0
OFFSET_DIVISOR = 64.0

_MAGIC = b"ILVG"


class GsplatError(ValueError):
    pass


@dataclass
class GaussianSet:
    """A fixed collection of anisotropic Gaussian primitives (plain arrays).

    ``mu`` (M, 3) centers in mm, ``scale`` (M, 3) positive principal standard
    deviations in mm, ``quat`` (M, 4) unit quaternions (w, x, y, z), and
    ``density`` (M,) nonnegative amplitudes.
    """

    mu: np.ndarray
    scale: np.ndarray
    quat: np.ndarray
    density: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1, 3)
        m = self.mu.shape[0]
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(m, 3)
        self.quat = np.asarray(self.quat, dtype=np.float64).reshape(m, 4)
        self.density = np.asarray(self.density, dtype=np.float64).reshape(m)
        if np.any(self.scale <= 0):
            raise GsplatError("scales must be strictly positive")
        norms = np.linalg.norm(self.quat, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise GsplatError("quaternions must be unit within 1e-6")
        if np.any(self.density < 0):
            raise GsplatError("densities must be nonnegative")

    def __len__(self):
        return self.mu.shape[0]


@dataclass
class GaussianTensors:
    """Differentiable Gaussian parameters as DTensors (graph outputs)."""

    mu: DTensor
    scale: DTensor
    quat: DTensor
    density: DTensor

    def to_set(self):
        return GaussianSet(self.mu.values, self.scale.values,
                           self.quat.values, self.density.values)


def _as_tensors(gs):
    if isinstance(gs, GaussianTensors):
        return gs, True
    return GaussianTensors(dc.constant(gs.mu), dc.constant(gs.scale),
                           dc.constant(gs.quat), dc.constant(gs.density)), False


# -- serialization --------------------------------------------------------

def save_gaussians(path, gs):
    """Write a GaussianSet in the ILVG binary format.

    Little-endian: magic, u32 primitive count, then 11 f32 per primitive
    (center, scale, quaternion, density).
    """
    recs = np.concatenate([gs.mu, gs.scale, gs.quat,
                           gs.density[:, None]], axis=1).astype("<f4")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(gs)))
        f.write(recs.tobytes())


def load_gaussians(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise GsplatError(f"bad magic {blob[:4]!r}, expected {_MAGIC!r}")
    (count,) = struct.unpack("<I", blob[4:8])
    payload = np.frombuffer(blob[8:], dtype="<f4")
    if payload.size != count * 11:
        raise GsplatError(
            f"payload holds {payload.size} floats, expected {count * 11}")
    recs = payload.astype(np.float64).reshape(count, 11)
    quat = recs[:, 6:10]
    quat = quat / np.linalg.norm(quat, axis=1, keepdims=True)
    return GaussianSet(recs[:, 0:3], recs[:, 3:6], quat, recs[:, 10])


# -- decoder --------------------------------------------------------------

@dataclass
class DecoderWeights:
    """Transposed-conv upsampler plus the per-voxel Gaussian parameter head."""

    up_w: Param
    up_b: Param
    head_w1: Param
    head_b1: Param
    head_w2: Param
    head_b2: Param
    kernel: int
    stride: int

    def parameters(self):
        return [self.up_w, self.up_b, self.head_w1, self.head_b1,
                self.head_w2, self.head_b2]


def build_decoder(c_z, c_g=16, hidden=32, kernel=4, stride=4, rng=None,
                  scale_bias=-1.5, density_bias=-2.0):
    """Construct upsampler and decoder-head parameters.

    ``scale_bias``/``density_bias`` seed the raw scale and density outputs so
    freshly initialized primitives start small and faint, which keeps the
    truncated pair lists short early in training.
    """
    if kernel < 1 or stride < 1:
        raise GsplatError(f"kernel/stride must be >= 1, got {kernel}/{stride}")
    if rng is None:
        rng = np.random.default_rng(0)
    b2 = np.zeros(11)
    b2[3:6] = scale_bias
    b2[10] = density_bias
    return DecoderWeights(
        up_w=uniform_init(rng, "dec.up_w", (c_z, c_g, kernel, kernel, kernel),
                          c_z * kernel ** 3),
        up_b=zeros_init("dec.up_b", (c_g,)),
        head_w1=uniform_init(rng, "dec.head_w1", (c_g, hidden), c_g),
        head_b1=zeros_init("dec.head_b1", (hidden,)),
        head_w2=uniform_init(rng, "dec.head_w2", (hidden, 11), hidden),
        head_b2=Param("dec.head_b2", b2, initializer="const"),
        kernel=kernel,
        stride=stride,
    )


def upsample_latent(v_z, weights, l_z):
    """Transposed-conv upsample of the (l_z^3, c_z) latent token grid.

    Returns a channels-first (c_g, L, L, L) DTensor with L = l_z * stride when
    kernel equals stride.
    """
    c_z = v_z.shape[1]
    grid = dc.permute(dc.reshape(v_z, (l_z, l_z, l_z, c_z)), (3, 0, 1, 2))
    return dc.conv_transpose3d(grid, weights.up_w.tensor,
                               weights.up_b.tensor, stride=weights.stride)


def decode_gaussians(feat, weights, bbox_half):
    """Decode a Gaussian primitive per voxel of the upsampled feature volume.

    Constrained activations guarantee the primitive invariants for arbitrary
    raw head outputs: offsets are tanh-bounded to 1/64 of the bounding-box
    side, scales softplus-clamped to [s_min, s_max] (half a voxel to a quarter
    side), quaternions normalized after a +1 bias on the scalar part, and
    densities softplus-nonnegative.
    """
    c_g, l = feat.shape[0], feat.shape[1]
    tokens = dc.reshape(dc.permute(feat, (1, 2, 3, 0)), (l ** 3, c_g))
    h = dc.gelu(dc.linear(tokens, weights.head_w1.tensor,
                          weights.head_b1.tensor))
    raw = dc.linear(h, weights.head_w2.tensor, weights.head_b2.tensor)

    side = 2.0 * bbox_half
    voxel = side / l
    s_min = 0.5 * voxel
    s_max = side / 4.0
    base = _grid_centers(l, bbox_half)

    o = dc.mul(dc.tanh(dc.take_slice(raw, (slice(None), slice(0, 3)))),
               side / OFFSET_DIVISOR)
    mu = dc.add(o, dc.constant(base))
    s = dc.clip(dc.add(dc.softplus(
        dc.take_slice(raw, (slice(None), slice(3, 6)))), s_min), s_min, s_max)
    q_raw = dc.take_slice(raw, (slice(None), slice(6, 10)))
    q_bias = dc.add(q_raw, np.array([1.0, 0.0, 0.0, 0.0]))
    norm = dc.sqrt(dc.dsum(dc.mul(q_bias, q_bias), axis=1))
    q = dc.div(q_bias, dc.reshape(norm, (l ** 3, 1)))
    d = dc.softplus(dc.reshape(
        dc.take_slice(raw, (slice(None), slice(10, 11))), (l ** 3,)))
    return GaussianTensors(mu, s, q, d)


def _grid_centers(l, bbox_half):
    vs = 2.0 * bbox_half / l
    ax = -bbox_half + (np.arange(l) + 0.5) * vs
    X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
    return np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=-1)


# -- Gaussian math --------------------------------------------------------

def _precision6(gt):
    """Unique inverse-covariance components as an (M, 6) DTensor.

    Column order (Λ00, Λ11, Λ22, Λ01, Λ02, Λ12) with
    Λ = R diag(1/s²) Rᵀ, i.e. Λ_ij = Σ_k R_ik R_jk / s_k².
    """
    if np.any(gt.scale.values <= 0):
        raise GsplatError("scales must be strictly positive")
    m = gt.quat.shape[0]
    q = gt.quat
    w = dc.take_slice(q, (slice(None), slice(0, 1)))
    x = dc.take_slice(q, (slice(None), slice(1, 2)))
    y = dc.take_slice(q, (slice(None), slice(2, 3)))
    z = dc.take_slice(q, (slice(None), slice(3, 4)))
    two = 2.0
    # rotation-matrix rows as (M, 3) tensors
    r0 = dc.concat([
        dc.sub(1.0, dc.mul(two, dc.add(dc.mul(y, y), dc.mul(z, z)))),
        dc.mul(two, dc.sub(dc.mul(x, y), dc.mul(w, z))),
        dc.mul(two, dc.add(dc.mul(x, z), dc.mul(w, y)))], axis=1)
    r1 = dc.concat([
        dc.mul(two, dc.add(dc.mul(x, y), dc.mul(w, z))),
        dc.sub(1.0, dc.mul(two, dc.add(dc.mul(x, x), dc.mul(z, z)))),
        dc.mul(two, dc.sub(dc.mul(y, z), dc.mul(w, x)))], axis=1)
    r2 = dc.concat([
        dc.mul(two, dc.sub(dc.mul(x, z), dc.mul(w, y))),
        dc.mul(two, dc.add(dc.mul(y, z), dc.mul(w, x))),
        dc.sub(1.0, dc.mul(two, dc.add(dc.mul(x, x), dc.mul(y, y))))], axis=1)
    is2 = dc.div(1.0, dc.mul(gt.scale, gt.scale))
    pairs = [(r0, r0), (r1, r1), (r2, r2), (r0, r1), (r0, r2), (r1, r2)]
    cols = [dc.reshape(dc.dsum(dc.mul(dc.mul(a, b), is2), axis=1), (m, 1))
            for a, b in pairs]
    return dc.concat(cols, axis=1)


def _mix_coeffs(u, w):
    """Pairing coefficients of Λ6 columns with u^T Λ w (numpy, (P, 6))."""
    out = np.empty((u.shape[0], 6))
    out[:, 0] = u[:, 0] * w[:, 0]
    out[:, 1] = u[:, 1] * w[:, 1]
    out[:, 2] = u[:, 2] * w[:, 2]
    out[:, 3] = u[:, 0] * w[:, 1] + u[:, 1] * w[:, 0]
    out[:, 4] = u[:, 0] * w[:, 2] + u[:, 2] * w[:, 0]
    out[:, 5] = u[:, 1] * w[:, 2] + u[:, 2] * w[:, 1]
    return out


def _np_matvec(l6, v):
    """Λ v from (P, 6) symmetric components and (P, 3) vectors."""
    out = np.empty((v.shape[0], 3))
    out[:, 0] = l6[:, 0] * v[:, 0] + l6[:, 3] * v[:, 1] + l6[:, 4] * v[:, 2]
    out[:, 1] = l6[:, 3] * v[:, 0] + l6[:, 1] * v[:, 1] + l6[:, 5] * v[:, 2]
    out[:, 2] = l6[:, 4] * v[:, 0] + l6[:, 5] * v[:, 1] + l6[:, 2] * v[:, 2]
    return out


def _scatter_cols(idx, rows, m):
    """Sum (P, k) rows into an (m, k) table by index (deterministic)."""
    out = np.empty((m, rows.shape[1]))
    for k in range(rows.shape[1]):
        out[:, k] = np.bincount(idx, weights=rows[:, k], minlength=m)
    return out


def _integrals(gt, lam6, gidx, origins, dirs):
    """Closed-form line integrals for pair lists (gaussian index, ray).

    A single fused graph node: the per-pair quadratic forms and their
    gradients w.r.t. centers, precision components, and densities are
    evaluated directly in numpy, which keeps the graph small when the pair
    list is large.
    """
    from .diffcore.tensor import _node

    mu, l6, den = gt.mu, lam6, gt.density
    m = den.shape[0]
    mu_g = mu.values[gidx]
    l6_g = l6.values[gidx]
    d_g = den.values[gidx]
    delta = origins - mu_g
    cu = _mix_coeffs(dirs, dirs)
    cm = _mix_coeffs(dirs, delta)
    cd = _mix_coeffs(delta, delta)
    a = np.einsum("pk,pk->p", l6_g, cu)
    b = np.einsum("pk,pk->p", l6_g, cm)
    c = np.einsum("pk,pk->p", l6_g, cd)
    pref = np.sqrt(2.0 * np.pi / a)
    e = np.exp(-0.5 * (c - b * b / a))
    vals = d_g * pref * e

    def bwd(g):
        gi = g * vals
        dln_da = -0.5 / a - 0.5 * b * b / (a * a)
        gl6 = gi[:, None] * (dln_da[:, None] * cu + (b / a)[:, None] * cm
                             - 0.5 * cd)
        lam_d = _np_matvec(l6_g, delta)
        lam_u = _np_matvec(l6_g, dirs)
        gmu = gi[:, None] * (lam_d - (b / a)[:, None] * lam_u)
        gd = g * pref * e
        return (_scatter_cols(gidx, gmu, m),
                _scatter_cols(gidx, gl6, m),
                np.bincount(gidx, weights=gd, minlength=m))

    return _node(vals, (mu, l6, den), bwd)


def _field_values(gt, lam6, gidx, points):
    """Gaussian density field at fixed points for (point, gaussian) pairs.

    Fused like ``_integrals``: value = d · exp(−δᵀΛδ/2) with δ = x − μ.
    """
    from .diffcore.tensor import _node

    mu, l6, den = gt.mu, lam6, gt.density
    m = den.shape[0]
    mu_g = mu.values[gidx]
    l6_g = l6.values[gidx]
    d_g = den.values[gidx]
    delta = points - mu_g
    cd = _mix_coeffs(delta, delta)
    e = np.exp(-0.5 * np.einsum("pk,pk->p", l6_g, cd))
    vals = d_g * e

    def bwd(g):
        gi = g * vals
        gmu = gi[:, None] * _np_matvec(l6_g, delta)
        gl6 = -0.5 * gi[:, None] * cd
        return (_scatter_cols(gidx, gmu, m),
                _scatter_cols(gidx, gl6, m),
                np.bincount(gidx, weights=g * e, minlength=m))

    return _node(vals, (mu, l6, den), bwd)


def gaussian_ray_integral(gs, ray_origin, ray_dir, index=0):
    """Line integral of one Gaussian's density along a unit-direction ray.

    With Λ the inverse covariance, δ the origin-to-center offset, a = uᵀΛu,
    b = uᵀΛδ, c = δᵀΛδ, the integral is d·sqrt(2π/a)·exp(−(c − b²/a)/2).
    """
    ray_dir = np.asarray(ray_dir, dtype=np.float64)
    if abs(np.linalg.norm(ray_dir) - 1.0) > 1e-9:
        raise GsplatError("ray direction must be unit length")
    gt, is_graph = _as_tensors(gs)
    lam6 = _precision6(gt)
    out = _integrals(gt, lam6, np.array([index]),
                     np.asarray(ray_origin, dtype=np.float64).reshape(1, 3),
                     ray_dir.reshape(1, 3))
    return out if is_graph else float(out.values[0])


def _np_qf(lam6, v, w=None):
    """v^T Λ w (w defaults to v) from (P, 6) Λ components, all numpy."""
    if w is None:
        w = v
    l00, l11, l22, l01, l02, l12 = (lam6[:, i] for i in range(6))
    return (l00 * v[:, 0] * w[:, 0] + l11 * v[:, 1] * w[:, 1]
            + l22 * v[:, 2] * w[:, 2]
            + l01 * (v[:, 0] * w[:, 1] + v[:, 1] * w[:, 0])
            + l02 * (v[:, 0] * w[:, 2] + v[:, 2] * w[:, 0])
            + l12 * (v[:, 1] * w[:, 2] + v[:, 2] * w[:, 1]))


def _mahalanobis_sq(lam6_np, mu_np, gidx, origins, dirs):
    delta = origins - mu_np[gidx]
    lg = lam6_np[gidx]
    a = _np_qf(lg, dirs)
    b = _np_qf(lg, dirs, delta)
    c = _np_qf(lg, delta)
    return c - b * b / a


def _render_pairs(gs_mu, gs_smax, geom, view_index):
    """Candidate (pixel, gaussian) pairs from projected-footprint boxes."""
    rows, cols = geom.det_rows, geom.det_cols
    u, v, _ = project_point(geom, view_index, gs_mu)
    src, e_src, _, _ = geom._frame(view_index)
    depth = geom.dso - gs_mu @ e_src
    live = depth > 1e-6
    # magnification at the near edge of the 3-sigma ball (conservative)
    near = np.maximum(depth - MAHALANOBIS_CUT * gs_smax, 1e-6)
    mag = np.where(live, geom.dsd / near, 0.0)
    radius = MAHALANOBIS_CUT * gs_smax * mag / geom.det_pixel
    rad = np.where(live, np.floor(radius), -1).astype(np.intp)

    pix, gid = [], []
    for r in np.unique(rad):
        if r < 0:
            continue
        sel = np.flatnonzero(rad == r)
        cu = np.floor(u[sel]).astype(np.intp)
        cv = np.floor(v[sel]).astype(np.intp)
        off = np.arange(-r, r + 2)
        pc = cu[:, None, None] + off[None, None, :]
        pr = cv[:, None, None] + off[None, :, None]
        # circular footprint cut inside the box, one pixel of slack for
        # perspective distortion away from the detector center
        du = pc - u[sel, None, None]
        dv = pr - v[sel, None, None]
        ok = du * du + dv * dv <= (radius[sel, None, None] + 1.0) ** 2
        ok &= (pr >= 0) & (pr < rows) & (pc >= 0) & (pc < cols)
        pr_g, pc_g = np.broadcast_arrays(pr, pc)
        gsel = np.broadcast_to(sel[:, None, None], ok.shape)
        pix.append(pr_g[ok] * cols + pc_g[ok])
        gid.append(gsel[ok])
    if not pix:
        return np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp)
    return np.concatenate(pix), np.concatenate(gid)


def render_xray(gs, geom, view_index, truncate=True):
    """Render a detector image: per-pixel sums of Gaussian ray integrals.

    Primitives whose minimum ray-to-center Mahalanobis distance exceeds 3 are
    culled per pixel unless ``truncate`` is disabled (gradient-check mode).
    Returns a (rows, cols) DTensor for graph inputs, else a numpy image.
    """
    gt, is_graph = _as_tensors(gs)
    rows, cols = geom.det_rows, geom.det_cols
    npix = rows * cols
    if len(gt.density.shape) == 0 or gt.density.shape[0] == 0:
        out = np.zeros((rows, cols))
        return dc.constant(out) if is_graph else out
    lam6 = _precision6(gt)
    origins, dirs = view_rays(geom, view_index)
    origins = origins.reshape(-1, 3)
    dirs = dirs.reshape(-1, 3)

    n_g = gt.density.shape[0]
    if truncate:
        smax = gt.scale.values.max(axis=1)
        pix, gid = _render_pairs(gt.mu.values, smax, geom, view_index)
        if pix.size:
            # cheap necessary condition: ray-to-center distance <= 3 s_max
            delta = origins[pix] - gt.mu.values[gid]
            proj = np.einsum("pk,pk->p", delta, dirs[pix])
            d2 = np.einsum("pk,pk->p", delta, delta) - proj * proj
            near = d2 <= (MAHALANOBIS_CUT * smax[gid]) ** 2
            pix, gid = pix[near], gid[near]
        if pix.size:
            m2 = _mahalanobis_sq(lam6.values, gt.mu.values, gid,
                                 origins[pix], dirs[pix])
            keep = m2 <= MAHALANOBIS_CUT ** 2
            pix, gid = pix[keep], gid[keep]
    else:
        pix = np.repeat(np.arange(npix, dtype=np.intp), n_g)
        gid = np.tile(np.arange(n_g, dtype=np.intp), npix)
    if pix.size == 0:
        out = np.zeros((rows, cols))
        return dc.constant(out) if is_graph else out

    vals = _integrals(gt, lam6, gid, origins[pix], dirs[pix])
    img = dc.scatter_add(dc.reshape(vals, (pix.size, 1)), pix, npix)
    img = dc.reshape(img, (rows, cols))
    return img if is_graph else img.values


def _voxel_pairs(gs_mu, gs_smax, dims, voxel, origin):
    """Candidate (voxel, gaussian) pairs from axis-aligned 3-sigma boxes."""
    nx, ny, nz = dims
    gi = (gs_mu - origin) / voxel                      # fractional voxel coords
    rad = MAHALANOBIS_CUT * gs_smax / voxel
    r = np.floor(rad).astype(np.intp)
    vox, gid = [], []
    for rv in np.unique(r):
        sel = np.flatnonzero(r == rv)
        c0 = np.floor(gi[sel]).astype(np.intp)
        # indices within 3 sigma of the center lie in [-rv, rv + 1] of floor
        off = np.arange(-rv, rv + 2)
        ox = off[:, None, None]
        oy = off[None, :, None]
        oz = off[None, None, :]
        ix = c0[:, 0, None, None, None] + ox
        iy = c0[:, 1, None, None, None] + oy
        iz = c0[:, 2, None, None, None] + oz
        # exact euclidean cut inside the box: |index - center| <= 3 s_max
        dx = ix - gi[sel, 0, None, None, None]
        dy = iy - gi[sel, 1, None, None, None]
        dz = iz - gi[sel, 2, None, None, None]
        ok = dx * dx + dy * dy + dz * dz <= rad[sel, None, None, None] ** 2
        ok &= ((ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
               & (iz >= 0) & (iz < nz))
        flat = (ix * ny + iy) * nz + iz
        gsel = np.broadcast_to(sel[:, None, None, None], ok.shape)
        vox.append(flat[ok])
        gid.append(gsel[ok])
    if not vox:
        return np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp)
    return np.concatenate(vox), np.concatenate(gid)


def voxelize(gs, dims, bbox_half, truncate=True):
    """Evaluate the summed Gaussian density field at voxel centers.

    The grid spans the cubic bounding box; contributions beyond Mahalanobis
    radius 3 are truncated unless disabled. Returns a dims-shaped DTensor for
    graph inputs, else a Volume.
    """
    dims = tuple(int(d) for d in dims)
    if min(dims) < 2:
        raise GsplatError(f"dims must be >= 2 per axis, got {dims}")
    gt, is_graph = _as_tensors(gs)
    voxel = 2.0 * bbox_half / max(dims)
    origin = -(np.array(dims) - 1) / 2.0 * voxel
    nvox = int(np.prod(dims))
    axes = [origin[a] + np.arange(dims[a]) * voxel for a in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    centers = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=-1)

    n_g = gt.density.shape[0]
    lam6 = _precision6(gt)
    if truncate:
        smax = gt.scale.values.max(axis=1)
        vox, gid = _voxel_pairs(gt.mu.values, smax, dims, voxel, origin)
        if vox.size:
            delta = centers[vox] - gt.mu.values[gid]
            m2 = _np_qf(lam6.values[gid], delta)
            keep = m2 <= MAHALANOBIS_CUT ** 2
            vox, gid = vox[keep], gid[keep]
    else:
        vox = np.repeat(np.arange(nvox, dtype=np.intp), n_g)
        gid = np.tile(np.arange(n_g, dtype=np.intp), nvox)
    if vox.size == 0:
        field = dc.constant(np.zeros(dims))
        return field if is_graph else Volume(field.values, voxel, origin)

    vals = _field_values(gt, lam6, gid, centers[vox])
    field = dc.reshape(dc.scatter_add(dc.reshape(vals, (vox.size, 1)), vox,
                                      nvox), dims)
    return field if is_graph else Volume(np.clip(field.values, 0.0, None),
                                         voxel, origin)
