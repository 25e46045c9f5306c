"""Latent-volume reconstruction network.

Multi-view images are encoded into hybrid per-view feature maps, lifted into
per-view 3D feature volumes by projective back-sampling, and repeatedly
injected into a learnable latent volume through a stack of grouped
cross-attention, reduced self-attention, per-voxel MLP, and mean/max
aggregation layers. Every residual output map is zero-initialized so the whole
stack is the identity at initialization.

Latent and feature volumes are carried token-major as ``(n_tokens, channels)``
DTensors with tokens in x-major grid order; per-view stacks add a leading view
axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import DTensor, Param, uniform_init, zeros_init
from .geom import plucker_embed, project_point, view_rays

__all__ = ["IlvConfig", "IlvWeights", "IlvError", "encode_views",
           "backproject_features", "group_cross_attention",
           "efficient_self_attention", "latent_mlp", "meanmax_aggregate",
           "ilv_forward", "factor3"]


class IlvError(ValueError):
    pass


@dataclass
class IlvConfig:
    """Network shape hyperparameters (desk-scale defaults)."""

    patch: int = 8
    c_low: int = 32
    c_high: int = 32
    enc_layers: int = 2
    l_f: int = 8
    l_z: int = 8
    c_z: int = 32
    n_layers: int = 4
    n_groups: int = 8
    kv_reduce: int = 8

    @property
    def c_f(self):
        return self.c_low + self.c_high

    def __post_init__(self):
        if self.n_layers < 1:
            raise IlvError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.l_f < 2:
            raise IlvError(f"l_f must be >= 2, got {self.l_f}")
        r = round(self.kv_reduce ** (1.0 / 3.0))
        if r ** 3 != self.kv_reduce or self.l_z % r != 0:
            raise IlvError(
                f"kv_reduce must be r^3 with r dividing l_z, got {self.kv_reduce}")


def factor3(n, dims):
    """Split ``n`` into 3 factors (fx, fy, fz), each dividing dims[axis].

    Prefers the most balanced factorization; raises if none exists.
    """
    best = None
    for fx in range(1, n + 1):
        if n % fx or dims[0] % fx:
            continue
        m = n // fx
        for fy in range(1, m + 1):
            if m % fy or dims[1] % fy:
                continue
            fz = m // fy
            if dims[2] % fz:
                continue
            spread = max(fx, fy, fz) - min(fx, fy, fz)
            if best is None or spread < best[0]:
                best = (spread, (fx, fy, fz))
    if best is None:
        raise IlvError(f"cannot split {n} groups across grid dims {dims}")
    return best[1]


# -- weights --------------------------------------------------------------

class ParamSet:
    """Name-addressed parameter collection with init helpers."""

    def __init__(self, rng):
        self.rng = rng
        self.params = {}

    def u(self, name, shape, fan_in):
        p = uniform_init(self.rng, name, shape, fan_in)
        self.params[name] = p
        return p

    def z(self, name, shape):
        p = zeros_init(name, shape)
        self.params[name] = p
        return p

    def const(self, name, values):
        p = Param(name, values, initializer="const")
        self.params[name] = p
        return p


@dataclass
class EncoderWeights:
    patch_low: Param
    patch_high: Param
    blocks: list
    ln_gamma: Param
    ln_beta: Param
    adaln_w: Param
    adaln_b: Param


@dataclass
class LayerWeights:
    """One latent update layer: grouped cross-attn, reduced self-attn, MLP,
    mean/max aggregation. All residual output maps start at zero."""

    gca_ln_g: Param
    gca_ln_b: Param
    gca_q: Param
    gca_k: Param
    gca_v: Param
    gca_out: Param
    esa_ln_g: Param
    esa_ln_b: Param
    esa_q: Param
    esa_red: Param
    esa_k: Param
    esa_v: Param
    esa_out: Param
    mlp_w1: Param
    mlp_b1: Param
    mlp_w2: Param
    agg_mean: Param
    agg_max: Param
    agg_fuse: Param
    agg_fuse_b: Param


@dataclass
class IlvWeights:
    config: IlvConfig
    encoder: EncoderWeights
    layers: list
    v_z0: Param
    params: dict = field(repr=False, default_factory=dict)

    def parameters(self):
        return list(self.params.values())


def _encoder_block(ps, tag, c):
    return {
        "ln1_g": ps.const(f"{tag}.ln1_g", np.ones(c)),
        "ln1_b": ps.z(f"{tag}.ln1_b", (c,)),
        "q": ps.u(f"{tag}.q", (c, c), c),
        "k": ps.u(f"{tag}.k", (c, c), c),
        "v": ps.u(f"{tag}.v", (c, c), c),
        "out": ps.u(f"{tag}.out", (c, c), c),
        "ln2_g": ps.const(f"{tag}.ln2_g", np.ones(c)),
        "ln2_b": ps.z(f"{tag}.ln2_b", (c,)),
        "w1": ps.u(f"{tag}.w1", (c, 4 * c), c),
        "b1": ps.z(f"{tag}.b1", (4 * c,)),
        "w2": ps.u(f"{tag}.w2", (4 * c, c), 4 * c),
    }


def build_weights(cfg, rng=None):
    """Construct all network parameters for a configuration."""
    if rng is None:
        rng = np.random.default_rng(0)
    ps = ParamSet(rng)
    p2 = cfg.patch ** 2
    ch = cfg.c_f

    enc = EncoderWeights(
        patch_low=ps.u("enc.patch_low", (p2, cfg.c_low), p2),
        patch_high=ps.u("enc.patch_high", (p2, cfg.c_high), p2),
        blocks=[_encoder_block(ps, f"enc.block{i}", cfg.c_high)
                for i in range(cfg.enc_layers)],
        ln_gamma=ps.const("enc.ln_g", np.ones(ch)),
        ln_beta=ps.z("enc.ln_b", (ch,)),
        adaln_w=ps.z("enc.adaln_w", (6, 2 * ch)),
        adaln_b=ps.z("enc.adaln_b", (2 * ch,)),
    )

    layers = []
    cz, cf = cfg.c_z, cfg.c_f
    r = round(cfg.kv_reduce ** (1.0 / 3.0))
    for i in range(cfg.n_layers):
        t = f"layer{i}"
        fuse = np.zeros((3 * cz, cz))
        fuse[:cz, :] = np.eye(cz)
        layers.append(LayerWeights(
            gca_ln_g=ps.const(f"{t}.gca_ln_g", np.ones(cz)),
            gca_ln_b=ps.z(f"{t}.gca_ln_b", (cz,)),
            gca_q=ps.u(f"{t}.gca_q", (cz, cz), cz),
            gca_k=ps.u(f"{t}.gca_k", (cf, cz), cf),
            gca_v=ps.u(f"{t}.gca_v", (cf, cz), cf),
            gca_out=ps.z(f"{t}.gca_out", (cz, cz)),
            esa_ln_g=ps.const(f"{t}.esa_ln_g", np.ones(cz)),
            esa_ln_b=ps.z(f"{t}.esa_ln_b", (cz,)),
            esa_q=ps.u(f"{t}.esa_q", (cz, cz), cz),
            esa_red=ps.u(f"{t}.esa_red", (r ** 3 * cz, cz), r ** 3 * cz),
            esa_k=ps.u(f"{t}.esa_k", (cz, cz), cz),
            esa_v=ps.u(f"{t}.esa_v", (cz, cz), cz),
            esa_out=ps.z(f"{t}.esa_out", (cz, cz)),
            mlp_w1=ps.u(f"{t}.mlp_w1", (cz, 4 * cz), cz),
            mlp_b1=ps.z(f"{t}.mlp_b1", (4 * cz,)),
            mlp_w2=ps.z(f"{t}.mlp_w2", (4 * cz, cz)),
            agg_mean=ps.u(f"{t}.agg_mean", (cf, cz), cf),
            agg_max=ps.u(f"{t}.agg_max", (cf, cz), cf),
            agg_fuse=ps.const(f"{t}.agg_fuse", fuse),
            agg_fuse_b=ps.z(f"{t}.agg_fuse_b", (cz,)),
        ))

    v_z0 = ps.u("v_z0", (cfg.l_z ** 3, cfg.c_z), cfg.c_z)
    return IlvWeights(cfg, enc, layers, v_z0, ps.params)


# -- encoder --------------------------------------------------------------

def _patch_tokens(image, patch):
    """(H, W) image -> (Hp*Wp, patch^2) row-major token matrix."""
    h, w = image.shape
    hp, wp = h // patch, w // patch
    x = dc.reshape(image, (hp, patch, wp, patch))
    x = dc.permute(x, (0, 2, 1, 3))
    return dc.reshape(x, (hp * wp, patch * patch))


def _transformer_block(x, blk):
    h = dc.layer_norm(x, blk["ln1_g"].tensor, blk["ln1_b"].tensor)
    att = dc.scaled_dot_attention(
        dc.matmul(h, blk["q"].tensor),
        dc.matmul(h, blk["k"].tensor),
        dc.matmul(h, blk["v"].tensor))
    x = dc.add(x, dc.matmul(att, blk["out"].tensor))
    h = dc.layer_norm(x, blk["ln2_g"].tensor, blk["ln2_b"].tensor)
    h = dc.linear(dc.gelu(dc.linear(h, blk["w1"].tensor, blk["b1"].tensor)),
                  blk["w2"].tensor)
    return dc.add(x, h)


def encode_views(images, pluckers, weights):
    """Encode N views into hybrid per-view feature token grids.

    ``images`` is an (N, H, W) array or DTensor; ``pluckers`` holds the
    (N, H, W, 6) per-pixel ray embeddings. The low path is a patchify-linear
    projection, the high path a small transformer over patch tokens; the
    concatenation is modulated by adaptive layer normalization conditioned on
    the per-token mean-pooled ray embedding. Returns a DTensor of shape
    (N, Hp*Wp, c_low + c_high).
    """
    cfg = weights.config
    images = images if isinstance(images, DTensor) else dc.constant(np.asarray(images, dtype=np.float64))
    pluckers = np.asarray(pluckers, dtype=np.float64)
    if images.values.ndim != 3 or pluckers.shape != images.shape + (6,):
        raise IlvError(
            f"encode_views expects (N, H, W) images with matching (N, H, W, 6) "
            f"rays, got {images.shape} and {pluckers.shape}")
    n, h, w = images.shape
    p = cfg.patch
    if h % p or w % p:
        raise IlvError(f"image dims {h}x{w} not divisible by patch {p}")
    hp, wp = h // p, w // p
    cond = pluckers.reshape(n, hp, p, wp, p, 6).mean(axis=(2, 4))
    cond = cond.reshape(n, hp * wp, 6)

    enc = weights.encoder
    outs = []
    for i in range(n):
        tok = _patch_tokens(dc.take(images, i), p)
        low = dc.matmul(tok, enc.patch_low.tensor)
        high = dc.matmul(tok, enc.patch_high.tensor)
        for blk in enc.blocks:
            high = _transformer_block(high, blk)
        hyb = dc.concat([high, low], axis=1)
        gb = dc.linear(dc.constant(cond[i]), enc.adaln_w.tensor,
                       enc.adaln_b.tensor)
        gamma = dc.take_slice(gb, (slice(None), slice(0, cfg.c_f)))
        beta = dc.take_slice(gb, (slice(None), slice(cfg.c_f, 2 * cfg.c_f)))
        normed = dc.layer_norm(hyb, enc.ln_gamma.tensor, enc.ln_beta.tensor)
        out = dc.add(dc.mul(normed, dc.add(gamma, 1.0)), beta)
        outs.append(dc.reshape(out, (1, hp * wp, cfg.c_f)))
    return dc.concat(outs, axis=0)


# -- feature back-projection ----------------------------------------------

def _voxel_centers(l, bbox_half):
    vs = 2.0 * bbox_half / l
    ax = -bbox_half + (np.arange(l) + 0.5) * vs
    X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
    return np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=-1)


def backproject_features(features, geom, view_indices, l_f, patch):
    """Lift per-view token grids into per-view 3D feature volumes.

    Each of the l_f^3 voxel centers (spanning the geometry bounding box) is
    projected onto every view and the token grid is sampled bilinearly at the
    continuous patch-scaled coordinate. Out-of-frustum voxels are exactly zero
    and flagged false in the returned mask.

    Returns ``(v_f, mask)``: a (N, l_f^3, C) DTensor and (N, l_f^3) bool array.
    """
    if l_f < 2:
        raise IlvError(f"l_f must be >= 2, got {l_f}")
    n, n_tok, c = features.shape
    hp = geom.det_rows // patch
    wp = geom.det_cols // patch
    if hp * wp != n_tok:
        raise IlvError(f"token count {n_tok} does not match {hp}x{wp} grid")
    pts = _voxel_centers(l_f, geom.bbox_half)
    vols = []
    masks = []
    for i in range(n):
        u, v, valid = project_point(geom, int(view_indices[i]), pts)
        coords = np.stack([v / patch, u / patch], axis=-1)
        fmap = dc.reshape(dc.take(features, i), (hp, wp, c))
        samp = dc.bilinear_sample2d(fmap, coords)
        samp = dc.mul(samp, valid[:, None].astype(np.float64))
        vols.append(dc.reshape(samp, (1, l_f ** 3, c)))
        masks.append(valid)
    return dc.concat(vols, axis=0), np.stack(masks, axis=0)


# -- latent update layers -------------------------------------------------

def _block_token_ids(l, factors):
    """Token index arrays per group for an l^3 grid split into blocks."""
    fx, fy, fz = factors
    bx, by, bz = l // fx, l // fy, l // fz
    ids = np.arange(l ** 3).reshape(l, l, l)
    groups = []
    for gx in range(fx):
        for gy in range(fy):
            for gz in range(fz):
                blk = ids[gx * bx:(gx + 1) * bx,
                          gy * by:(gy + 1) * by,
                          gz * bz:(gz + 1) * bz]
                groups.append(blk.ravel())
    return np.stack(groups, axis=0)


def group_cross_attention(v_z, v_f, weights, n_groups, l_z, l_f):
    """Inject X-ray features into the latent volume by grouped cross-attention.

    Latent tokens attend within axis-aligned blocks; keys/values are the
    spatially corresponding block tokens of every view's feature volume,
    projected to the latent width. Residual with a zero-initialized output
    map.
    """
    factors = factor3(n_groups, (l_z, l_z, l_z))
    if any(l_f % f for f in factors):
        raise IlvError(
            f"n_groups {n_groups} (factors {factors}) does not partition "
            f"feature grid {l_f}^3")
    n_views = v_f.shape[0]
    h = dc.layer_norm(v_z, weights.gca_ln_g.tensor, weights.gca_ln_b.tensor)
    q_all = dc.matmul(h, weights.gca_q.tensor)
    kv_src = dc.reshape(v_f, (n_views * l_f ** 3, v_f.shape[2]))
    k_all = dc.matmul(kv_src, weights.gca_k.tensor)
    v_all = dc.matmul(kv_src, weights.gca_v.tensor)

    qid = _block_token_ids(l_z, factors)                 # (G, Tq)
    fid = _block_token_ids(l_f, factors)                 # (G, Tf)
    fid = (fid[:, None, :] + np.arange(n_views)[None, :, None] * l_f ** 3)
    fid = fid.reshape(qid.shape[0], -1)                  # (G, N*Tf)

    q = dc.take(q_all, qid)
    k = dc.take(k_all, fid)
    v = dc.take(v_all, fid)
    att = dc.scaled_dot_attention(q, k, v)               # (G, Tq, C)
    flat = dc.reshape(att, (l_z ** 3, v_z.shape[1]))
    inv = np.argsort(qid.ravel())
    upd = dc.matmul(dc.take(flat, inv), weights.gca_out.tensor)
    return dc.add(v_z, upd)


def efficient_self_attention(v, weights, kv_reduce, l_z):
    """Latent self-attention with an r x r x r strided key/value reduction.

    The key/value sequence is shortened by ``kv_reduce = r^3`` via a linear
    map over each r-block of tokens; queries stay full length. ``kv_reduce=1``
    reduces exactly to standard self-attention. Residual with a zero-init
    output map.
    """
    r = round(kv_reduce ** (1.0 / 3.0))
    if r ** 3 != kv_reduce or l_z % r != 0:
        raise IlvError(f"kv_reduce must be r^3 with r dividing l_z, "
                       f"got {kv_reduce} at l_z={l_z}")
    c = v.shape[1]
    h = dc.layer_norm(v, weights.esa_ln_g.tensor, weights.esa_ln_b.tensor)
    q = dc.matmul(h, weights.esa_q.tensor)
    if r == 1:
        red = h
    else:
        blocks = _block_token_ids(l_z, (l_z // r,) * 3)   # (n_red, r^3)
        red = dc.reshape(dc.take(h, blocks), (blocks.shape[0], r ** 3 * c))
        red = dc.matmul(red, weights.esa_red.tensor)
    k = dc.matmul(red, weights.esa_k.tensor)
    val = dc.matmul(red, weights.esa_v.tensor)
    att = dc.scaled_dot_attention(q, k, val)
    return dc.add(v, dc.matmul(att, weights.esa_out.tensor))


def latent_mlp(v, weights):
    """Per-voxel two-layer MLP (hidden 4x width, gelu) with residual."""
    h = dc.gelu(dc.linear(v, weights.mlp_w1.tensor, weights.mlp_b1.tensor))
    return dc.add(v, dc.matmul(h, weights.mlp_w2.tensor))


def meanmax_aggregate(v_bar, v_f, mask, weights, l_z, l_f):
    """Fuse view-pooled features into the latent (next-stage latent).

    The feature volume is mean- and max-pooled over views (mask-aware: hidden
    voxels are excluded from the mean; a voxel hidden in every view pools to
    zero), passed through per-path 1x1x1 projections, trilinearly resampled to
    the latent grid, concatenated with the latent, and fused by a final 1x1x1
    map initialized to pass the latent through unchanged.
    """
    counts = mask.sum(axis=0).astype(np.float64)          # (l_f^3,)
    safe = np.maximum(counts, 1.0)
    mean = dc.mul(dc.dsum(v_f, axis=0), (1.0 / safe)[:, None])
    neg = (1.0 - mask.astype(np.float64)) * -1e30
    vmax = dc.dmax(dc.add(v_f, neg[:, :, None]), axis=0)
    vmax = dc.mul(vmax, (counts > 0).astype(np.float64)[:, None])

    def path(tokens, proj):
        x = dc.matmul(tokens, proj.tensor)                # (l_f^3, c_z)
        x = dc.permute(dc.reshape(x, (l_f, l_f, l_f, x.shape[1])), (3, 0, 1, 2))
        x = dc.trilinear_resample(x, (l_z, l_z, l_z))
        return dc.reshape(dc.permute(x, (1, 2, 3, 0)), (l_z ** 3, x.shape[0]))

    cat = dc.concat([v_bar, path(mean, weights.agg_mean),
                     path(vmax, weights.agg_max)], axis=1)
    return dc.linear(cat, weights.agg_fuse.tensor, weights.agg_fuse_b.tensor)


def ilv_forward(images, geom, view_indices, weights):
    """Full forward pass: encode, back-project once, run the update stack.

    Returns the final latent volume as an (l_z^3, c_z) DTensor; with all
    residual outputs at their zero initialization this is exactly the
    learnable initial latent.
    """
    cfg = weights.config
    view_indices = np.asarray(view_indices, dtype=np.intp)
    pluckers = np.stack([
        plucker_embed(*view_rays(geom, int(k))) for k in view_indices], axis=0)
    feats = encode_views(images, pluckers, weights)
    v_f, mask = backproject_features(feats, geom, view_indices, cfg.l_f,
                                     cfg.patch)
    v_z = weights.v_z0.tensor
    for lw in weights.layers:
        v_z = group_cross_attention(v_z, v_f, lw, cfg.n_groups, cfg.l_z, cfg.l_f)
        v_z = efficient_self_attention(v_z, lw, cfg.kv_reduce, cfg.l_z)
        v_z = latent_mlp(v_z, lw)
        v_z = meanmax_aggregate(v_z, v_f, mask, lw, cfg.l_z, cfg.l_f)
    return v_z
