"""Cone-beam acquisition geometry, ray generation, and Plücker embeddings.

World frame: isocenter at the origin, rotation axis +z, flat-panel detector.
At gantry angle ``beta`` the source sits at ``dso * (cos b, sin b, 0)`` and the
detector plane is perpendicular to the source-isocenter line at distance
``dsd`` from the source. Detector axes: u horizontal in the gantry plane,
v along +z. Pixel (0, 0) is the corner; continuous coordinates follow the
pixel-center convention (center of pixel (i, j) at (i + 0.5, j + 0.5)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = ["ConeBeamGeometry", "equispaced_angles", "view_rays", "plucker_embed",
           "project_point", "GeometryError"]


class GeometryError(ValueError):
    """Raised on invalid geometry parameters or view indices."""


def equispaced_angles(k):
    """K equispaced gantry angles covering the full [0, 2*pi) arc."""
    if k < 1:
        raise GeometryError(f"need at least one angle, got {k}")
    return (2.0 * math.pi / k) * np.arange(k)


@dataclass
class ConeBeamGeometry:
    """Circular-trajectory cone-beam scan configuration (lengths in mm)."""

    dso: float                # source-to-isocenter distance
    dsd: float                # source-to-detector distance
    det_rows: int
    det_cols: int
    det_pixel: float          # detector pixel pitch
    angles: np.ndarray        # gantry angles, radians, strictly increasing
    bbox_half: float          # half-extent of the cubic reconstruction box

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=np.float64)
        if not (self.dsd > self.dso):
            raise GeometryError(f"dsd ({self.dsd}) must exceed dso ({self.dso})")
        if not (self.dso > self.bbox_half * math.sqrt(3.0)):
            raise GeometryError(
                f"dso ({self.dso}) must exceed bbox_half*sqrt(3) "
                f"({self.bbox_half * math.sqrt(3.0):.3f}): source inside volume"
            )
        if self.det_rows < 2 or self.det_cols < 2:
            raise GeometryError("detector must be at least 2x2 pixels")
        if self.angles.ndim != 1 or self.angles.size < 1:
            raise GeometryError("angles must be a non-empty 1D sequence")
        if np.any(np.diff(self.angles) <= 0):
            raise GeometryError("angles must be strictly increasing")
        if self.angles[0] < 0 or self.angles[-1] >= 2.0 * math.pi:
            raise GeometryError("angles must lie in [0, 2*pi)")

    @property
    def n_views(self):
        return self.angles.size

    def _frame(self, view_index):
        """Source position and detector (u, v, axial) unit vectors for a view."""
        if not 0 <= view_index < self.n_views:
            raise GeometryError(
                f"view index {view_index} out of range [0, {self.n_views})"
            )
        b = self.angles[view_index]
        e_src = np.array([math.cos(b), math.sin(b), 0.0])
        u_hat = np.array([-math.sin(b), math.cos(b), 0.0])
        v_hat = np.array([0.0, 0.0, 1.0])
        return self.dso * e_src, e_src, u_hat, v_hat

    def detector_uv_mm(self):
        """Physical (u, v) offsets of every pixel center from the detector center."""
        u = (np.arange(self.det_cols) + 0.5 - self.det_cols / 2.0) * self.det_pixel
        v = (np.arange(self.det_rows) + 0.5 - self.det_rows / 2.0) * self.det_pixel
        return u, v


def view_rays(geom, view_index):
    """Per-pixel rays for one view.

    Returns ``(origins, directions)`` with shape (det_rows, det_cols, 3);
    all origins equal the view's source position and directions are unit.
    """
    src, e_src, u_hat, v_hat = geom._frame(view_index)
    u_mm, v_mm = geom.detector_uv_mm()
    det_center = src - geom.dsd * e_src
    pix = (det_center[None, None, :]
           + u_mm[None, :, None] * u_hat[None, None, :]
           + v_mm[:, None, None] * v_hat[None, None, :])
    d = pix - src
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    origins = np.broadcast_to(src, d.shape).copy()
    return origins, d


def plucker_embed(origins, directions):
    """Per-pixel Plücker 6-vectors (d, m) with moment m = origin x direction."""
    m = np.cross(origins, directions)
    return np.concatenate([directions, m], axis=-1)


def project_point(geom, view_index, p):
    """Perspective-project world points onto a view's detector.

    ``p`` is a 3-vector or an (..., 3) array. Returns ``(u, v, valid)`` where
    (u, v) are continuous detector pixel coordinates (pixel-center convention)
    and ``valid`` flags points in front of the source whose projection lands on
    the detector. Invalid points still carry their (possibly out-of-range)
    coordinates.
    """
    src, e_src, u_hat, v_hat = geom._frame(view_index)
    p = np.asarray(p, dtype=np.float64)
    depth = geom.dso - p @ e_src           # distance from the source plane
    with np.errstate(divide="ignore", invalid="ignore"):
        mag = geom.dsd / depth
        u_mm = (p @ u_hat) * mag
        v_mm = (p @ v_hat) * mag
    u = u_mm / geom.det_pixel + geom.det_cols / 2.0
    v = v_mm / geom.det_pixel + geom.det_rows / 2.0
    valid = ((depth > 1e-9)
             & (u >= 0.0) & (u <= geom.det_cols)
             & (v >= 0.0) & (v <= geom.det_rows))
    return u, v, valid
