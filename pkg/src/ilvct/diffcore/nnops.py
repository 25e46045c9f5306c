"""Structured differentiable ops: 3D convolutions, resampling, bilinear gather.

All volumes are channels-first ``(C, D, H, W)`` without a batch axis; the
training loop operates on single samples.
"""

from __future__ import annotations

import numpy as np

from .tensor import DTensor, ShapeError, _node, _wrap

__all__ = ["conv3d", "conv_transpose3d", "trilinear_resample", "bilinear_sample2d"]


def _patch_index(spatial, k, stride):
    """Flat indices of k³ patch taps for every output position.

    Returns an int array of shape (n_out_positions, k**3) indexing the
    flattened spatial grid ``spatial``.
    """
    d, h, w = spatial
    flat = np.arange(d * h * w).reshape(d, h, w)
    win = np.lib.stride_tricks.sliding_window_view(flat, (k, k, k))
    win = win[::stride, ::stride, ::stride]
    return win.reshape(-1, k ** 3), win.shape[:3]


def conv3d(x, w, b=None, stride=1, padding=0):
    """3D convolution (cross-correlation). x: (Cin, D, H, W); w: (Cout, Cin, k, k, k)."""
    x, w = _wrap(x), _wrap(w)
    if b is not None:
        b = _wrap(b)
    cin, d, h, ww_ = x.shape
    cout, cin_w, k = w.shape[0], w.shape[1], w.shape[2]
    if cin_w != cin:
        raise ShapeError(f"conv3d channel mismatch: input {x.shape} vs kernel {w.shape}")
    if min(d, h, ww_) + 2 * padding < k:
        raise ShapeError(f"conv3d kernel {k} larger than padded input {x.shape}")

    xp = np.pad(x.values, ((0, 0),) + ((padding, padding),) * 3) if padding else x.values
    spad = xp.shape[1:]
    idx, out_spatial = _patch_index(spad, k, stride)
    n_out = idx.shape[0]
    # cols: (n_out, Cin * k^3)
    cols = xp.reshape(cin, -1)[:, idx].transpose(1, 0, 2).reshape(n_out, cin * k ** 3)
    wmat = w.values.reshape(cout, cin * k ** 3)
    out = (cols @ wmat.T).T.reshape((cout,) + out_spatial)
    if b is not None:
        out = out + b.values.reshape(cout, 1, 1, 1)

    def bwd(g):
        gmat = g.reshape(cout, n_out)                       # (Cout, n_out)
        gw = (gmat @ cols).reshape(w.shape)
        gcols = (gmat.T @ wmat).reshape(n_out, cin, k ** 3)  # (n_out, Cin, k^3)
        gxp = np.zeros((cin, spad[0] * spad[1] * spad[2]))
        for c in range(cin):
            np.add.at(gxp[c], idx, gcols[:, c, :])
        gxp = gxp.reshape((cin,) + spad)
        if padding:
            gxp = gxp[:, padding:-padding, padding:-padding, padding:-padding]
        gb = None if b is None else g.sum(axis=(1, 2, 3))
        return (gxp, gw, gb) if b is not None else (gxp, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _node(out, parents, bwd)


def conv_transpose3d(x, w, b=None, stride=1):
    """Transposed 3D convolution. x: (Cin, D, H, W); w: (Cin, Cout, k, k, k).

    Output spatial size is ``(D - 1) * stride + k`` (no padding/cropping).
    """
    x, w = _wrap(x), _wrap(w)
    if b is not None:
        b = _wrap(b)
    cin, d, h, ww_ = x.shape
    if w.shape[0] != cin:
        raise ShapeError(f"conv_transpose3d channel mismatch: {x.shape} vs {w.shape}")
    cout, k = w.shape[1], w.shape[2]
    out_spatial = tuple((n - 1) * stride + k for n in (d, h, ww_))
    idx, grid = _patch_index(out_spatial, k, stride)
    assert grid == (d, h, ww_)
    n_in = d * h * ww_

    wmat = w.values.reshape(cin, cout * k ** 3)
    prod = (x.values.reshape(cin, n_in).T @ wmat).reshape(n_in, cout, k ** 3)
    out = np.zeros((cout, out_spatial[0] * out_spatial[1] * out_spatial[2]))
    for c in range(cout):
        np.add.at(out[c], idx, prod[:, c, :])
    out = out.reshape((cout,) + out_spatial)
    if b is not None:
        out = out + b.values.reshape(cout, 1, 1, 1)

    def bwd(g):
        gcols = g.reshape(cout, -1)[:, idx].transpose(1, 0, 2).reshape(n_in, cout * k ** 3)
        gx = (gcols @ wmat.T).T.reshape(x.shape)
        gw = (x.values.reshape(cin, n_in) @ gcols).reshape(w.shape)
        gb = None if b is None else g.sum(axis=(1, 2, 3))
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _node(out, parents, bwd)


def _axis_coords(n_src, n_dst):
    """Source sample positions (voxel-center aligned) plus gather indices/weights."""
    pos = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
    pos = np.clip(pos, 0.0, n_src - 1.0)
    i0 = np.minimum(np.floor(pos).astype(np.intp), max(n_src - 2, 0))
    f = pos - i0
    if n_src == 1:
        i1 = i0
        f = np.zeros_like(f)
    else:
        i1 = i0 + 1
    return i0, i1, f


def trilinear_resample(x, dims):
    """Resample a (C, D, H, W) field to spatial ``dims`` by trilinear interpolation."""
    x = _wrap(x)
    c = x.shape[0]
    src = x.shape[1:]
    dims = tuple(dims)
    axes = [_axis_coords(s, t) for s, t in zip(src, dims)]
    (d0, d1, fd), (h0, h1, fh), (w0, w1, fw) = axes
    fd = fd[:, None, None]
    fh = fh[None, :, None]
    fw = fw[None, None, :]
    combos = []
    for cd, wd in ((d0, 1 - fd), (d1, fd)):
        for ch_, wh in ((h0, 1 - fh), (h1, fh)):
            for cw, wgt in ((w0, 1 - fw), (w1, fw)):
                combos.append((cd, ch_, cw, wd * wh * wgt))
    out = np.zeros((c,) + dims)
    v = x.values
    for cd, ch_, cw, wgt in combos:
        out += v[:, cd[:, None, None], ch_[None, :, None], cw[None, None, :]] * wgt

    def bwd(g):
        gx = np.zeros_like(v)
        for cd, ch_, cw, wgt in combos:
            np.add.at(
                gx,
                (slice(None), cd[:, None, None], ch_[None, :, None], cw[None, None, :]),
                g * wgt,
            )
        return (gx,)

    return _node(out, (x,), bwd)


def bilinear_sample2d(fmap, coords):
    """Sample a (H, W, C) feature map at continuous (row, col) pixel coords.

    ``coords`` has shape (M, 2) in the pixel-center convention (the center of
    pixel (i, j) lies at coordinate (i + 0.5, j + 0.5)); samples are clamped to
    the border. Differentiable in ``fmap`` only; coords are fixed geometry.
    """
    fmap = _wrap(fmap)
    coords = np.asarray(coords, dtype=np.float64)
    h, w = fmap.shape[:2]
    r = np.clip(coords[:, 0] - 0.5, 0.0, h - 1.0)
    c = np.clip(coords[:, 1] - 0.5, 0.0, w - 1.0)
    r0 = np.minimum(np.floor(r).astype(np.intp), max(h - 2, 0))
    c0 = np.minimum(np.floor(c).astype(np.intp), max(w - 2, 0))
    fr = (r - r0)[:, None]
    fc = (c - c0)[:, None]
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    v = fmap.values
    out = (v[r0, c0] * (1 - fr) * (1 - fc) + v[r0, c1] * (1 - fr) * fc
           + v[r1, c0] * fr * (1 - fc) + v[r1, c1] * fr * fc)

    def bwd(g):
        gf = np.zeros_like(v)
        np.add.at(gf, (r0, c0), g * (1 - fr) * (1 - fc))
        np.add.at(gf, (r0, c1), g * (1 - fr) * fc)
        np.add.at(gf, (r1, c0), g * fr * (1 - fc))
        np.add.at(gf, (r1, c1), g * fr * fc)
        return (gf,)

    return _node(out, (fmap,), bwd)
