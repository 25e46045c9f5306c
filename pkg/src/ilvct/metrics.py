"""Volume quality metrics: 3D PSNR and slice-averaged SSIM."""

from __future__ import annotations

import numpy as np

from .losses import ssim_2d

__all__ = ["psnr_3d", "ssim_3slab", "MetricError", "PSNR_CAP_DB"]

PSNR_CAP_DB = 99.0


class MetricError(ValueError):
    pass


def psnr_3d(v, v_gt):
    """Peak signal-to-noise ratio over all voxels, data range 1.

    Identical volumes would give +inf; the value is capped at 99.0 dB.
    """
    a = np.asarray(v.data if hasattr(v, "data") else v, dtype=np.float64)
    b = np.asarray(v_gt.data if hasattr(v_gt, "data") else v_gt, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def ssim_3slab(v, v_gt):
    """Mean 2D SSIM over every slice along each of the three axes.

    Per-axis slice scores are averaged, then the three axis averages are
    averaged.
    """
    a = np.asarray(v.data if hasattr(v, "data") else v, dtype=np.float64)
    b = np.asarray(v_gt.data if hasattr(v_gt, "data") else v_gt, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < 11:
        raise MetricError(f"dims must be >= 11 per axis for SSIM, got {a.shape}")
    axis_means = []
    for axis in range(3):
        scores = [ssim_2d(np.take(a, i, axis=axis), np.take(b, i, axis=axis))
                  for i in range(a.shape[axis])]
        axis_means.append(float(np.mean(scores)))
    return float(np.mean(axis_means))
