"""SSIM and the three-term training objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import DTensor

__all__ = ["ssim_2d", "gaussian_window_1d", "LossWeights", "total_loss", "LossError"]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class LossError(ValueError):
    pass


def gaussian_window_1d(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _band_matrix(n, win):
    """(n - len(win) + 1, n) matrix applying a valid-mode 1D correlation."""
    k = win.size
    rows = n - k + 1
    m = np.zeros((rows, n))
    for i in range(rows):
        m[i, i:i + k] = win
    return m


def _ssim_numpy(a, b):
    win = gaussian_window_1d()
    h, w = a.shape
    wr = _band_matrix(h, win)
    wc = _band_matrix(w, win)

    def filt(x):
        return wr @ x @ wc.T

    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    mu_a = filt(a)
    mu_b = filt(b)
    va = filt(a * a) - mu_a ** 2
    vb = filt(b * b) - mu_b ** 2
    vab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * vab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)
    return float(np.mean(num / den))


def _ssim_graph(a, b):
    win = gaussian_window_1d()
    h, w = a.shape
    wr = dc.constant(_band_matrix(h, win))
    wc_t = dc.constant(_band_matrix(w, win).T)

    def filt(x):
        return dc.matmul(dc.matmul(wr, x), wc_t)

    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    mu_a = filt(a)
    mu_b = filt(b)
    va = filt(dc.mul(a, a)) - dc.mul(mu_a, mu_a)
    vb = filt(dc.mul(b, b)) - dc.mul(mu_b, mu_b)
    vab = filt(dc.mul(a, b)) - dc.mul(mu_a, mu_b)
    num = dc.mul(2.0 * dc.mul(mu_a, mu_b) + c1, 2.0 * vab + c2)
    den = dc.mul(dc.mul(mu_a, mu_a) + dc.mul(mu_b, mu_b) + c1, va + vb + c2)
    return dc.dmean(dc.div(num, den))


def ssim_2d(a, b):
    """Structural similarity of two images in [0, 1] (data range 1).

    Gaussian 11x11 window with sigma 1.5, valid-mode windows, K1 = 0.01,
    K2 = 0.03. Accepts numpy arrays (returns float) or DTensors (returns a
    differentiable scalar DTensor).
    """
    graph = isinstance(a, DTensor) or isinstance(b, DTensor)
    sa = a.shape if not graph else (a.shape if isinstance(a, DTensor) else a.shape)
    sb = b.shape
    if tuple(sa) != tuple(sb):
        raise LossError(f"SSIM shape mismatch: {tuple(sa)} vs {tuple(sb)}")
    if len(sa) != 2 or min(sa) < SSIM_WINDOW:
        raise LossError(f"SSIM needs 2D images at least {SSIM_WINDOW}^2, got {sa}")
    if graph:
        a = a if isinstance(a, DTensor) else dc.constant(a)
        b = b if isinstance(b, DTensor) else dc.constant(b)
        return _ssim_graph(a, b)
    return _ssim_numpy(np.asarray(a, dtype=np.float64),
                       np.asarray(b, dtype=np.float64))


@dataclass
class LossWeights:
    l1: float = 1.0
    ssim: float = 0.2
    vol: float = 1.0
    refined: float = 1.0
    refine_activation_step: int = 500

    def __post_init__(self):
        vals = (self.l1, self.ssim, self.vol, self.refined)
        if any(not np.isfinite(v) or v < 0 for v in vals):
            raise LossError(f"loss weights must be finite and >= 0, got {vals}")


def _mse(a, b):
    d = dc.sub(a, b if isinstance(b, DTensor) else dc.constant(b))
    return dc.dmean(dc.mul(d, d))


def total_loss(images, images_gt, v_coarse, v_refined, v_gt, lw, step):
    """Three-term objective with delayed refinement activation.

    ``images`` is a list of rendered DTensor images with matching ground
    truth arrays. Returns ``(total, breakdown)`` where breakdown maps
    component names to floats; the refinement term enters only once
    ``step >= lw.refine_activation_step``.
    """
    if len(images) != len(images_gt):
        raise LossError(f"{len(images)} rendered vs {len(images_gt)} target images")
    n = len(images)
    l1_acc = None
    ssim_acc = None
    for im, gt in zip(images, images_gt):
        gt_t = gt if isinstance(gt, DTensor) else dc.constant(gt)
        term = dc.dmean(dc.absolute(dc.sub(im, gt_t)))
        sterm = ssim_2d(im, gt_t)
        l1_acc = term if l1_acc is None else dc.add(l1_acc, term)
        ssim_acc = sterm if ssim_acc is None else dc.add(ssim_acc, sterm)
    l1 = dc.mul(l1_acc, 1.0 / n)
    ssim_mean = dc.mul(ssim_acc, 1.0 / n)
    l_img = dc.add(dc.mul(l1, lw.l1), dc.mul(dc.sub(1.0, ssim_mean), lw.ssim))
    l_vol = _mse(v_coarse, v_gt)
    active = step >= lw.refine_activation_step
    total = dc.add(l_img, dc.mul(l_vol, lw.vol))
    if active:
        l_ref = _mse(v_refined, v_gt)
        total = dc.add(total, dc.mul(l_ref, lw.refined))
        l_ref_val = l_ref.item() * lw.refined
    else:
        l_ref_val = 0.0
    breakdown = {
        "l1": l1.item() * lw.l1,
        "ssim": (1.0 - ssim_mean.item()) * lw.ssim,
        "img": l_img.item(),
        "vol": l_vol.item() * lw.vol,
        "refined": l_ref_val,
        "total": total.item(),
    }
    return total, breakdown
