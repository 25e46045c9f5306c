"""Volumes, synthetic phantoms, HU normalization, and binary I/O.

Binary ".ilv" layout: magic ``ILV1``, u8 kind (0 = volume, 1 = projection
set), little-endian headers, f32 payload. Round-trips are bit-exact.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .geom import ConeBeamGeometry

__all__ = [
    "Volume", "ProjectionSet", "Ellipsoid", "PhantomSpec",
    "hu_normalize", "hu_to_unit", "make_phantom", "shepp_logan_spec",
    "save_volume", "load_volume", "save_projections", "load_projections",
    "export_slice_pgm",
    "IlvFormatError", "BadMagicError", "DimensionError", "PayloadError",
]

MAGIC = b"ILV1"
KIND_VOLUME = 0
KIND_PROJECTIONS = 1


class IlvFormatError(ValueError):
    """Base class for .ilv file format errors."""


class BadMagicError(IlvFormatError):
    pass


class DimensionError(IlvFormatError):
    pass


class PayloadError(IlvFormatError):
    pass


@dataclass
class Volume:
    """Axis-aligned voxel grid of normalized attenuation values.

    ``data`` has shape (nx, ny, nz); ``origin`` is the world position of the
    center of voxel (0, 0, 0).
    """

    data: np.ndarray
    voxel_size: float
    origin: np.ndarray = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise DimensionError(f"volume data must be 3D, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")
        if self.origin is None:
            # center the grid on the isocenter
            dims = np.array(self.data.shape)
            self.origin = -(dims - 1) / 2.0 * self.voxel_size
        self.origin = np.asarray(self.origin, dtype=np.float64)

    @property
    def dims(self):
        return self.data.shape

    @property
    def bbox_half(self):
        return max(self.dims) * self.voxel_size / 2.0

    def voxel_centers_1d(self):
        """World coordinates of voxel centers along each axis."""
        return tuple(self.origin[a] + np.arange(self.dims[a]) * self.voxel_size
                     for a in range(3))


@dataclass
class ProjectionSet:
    """N detector images plus the geometry and trajectory indices behind them."""

    geometry: ConeBeamGeometry
    images: np.ndarray          # (N, det_rows, det_cols)
    view_indices: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.view_indices = np.asarray(self.view_indices, dtype=np.intp)
        if self.images.ndim != 3:
            raise DimensionError(f"projection stack must be 3D, got {self.images.shape}")
        if self.images.shape[0] != self.view_indices.size:
            raise DimensionError(
                f"{self.images.shape[0]} images but {self.view_indices.size} view indices"
            )
        g = self.geometry
        if self.images.shape[1:] != (g.det_rows, g.det_cols):
            raise DimensionError(
                f"image shape {self.images.shape[1:]} does not match detector "
                f"({g.det_rows}, {g.det_cols})"
            )
        if not np.all(np.isfinite(self.images)):
            raise ValueError("projections contain non-finite values")

    @property
    def n_views(self):
        return self.images.shape[0]


def hu_to_unit(hu):
    """Map Hounsfield units to [0, 1]: clamp((hu + 1000) / 2000, 0, 1)."""
    hu = np.asarray(hu, dtype=np.float64)
    if not np.all(np.isfinite(hu)):
        raise ValueError("HU input contains non-finite values")
    return np.clip((hu + 1000.0) / 2000.0, 0.0, 1.0)


def hu_normalize(raw, voxel_size=1.0, origin=None):
    """Normalize a raw HU scalar field into a unit-range Volume."""
    return Volume(hu_to_unit(raw), voxel_size, origin)


@dataclass
class Ellipsoid:
    center: tuple        # normalized bbox coordinates in [-1, 1]
    semi_axes: tuple     # normalized, relative to bbox half-extent
    rotation: tuple = (0.0, 0.0, 0.0)   # intrinsic ZYX Euler angles, radians
    density: float = 1.0                # additive


@dataclass
class PhantomSpec:
    ellipsoids: list = field(default_factory=list)


def _euler_zyx(rz, ry, rx):
    cz, sz = math.cos(rz), math.sin(rz)
    cy, sy = math.cos(ry), math.sin(ry)
    cx, sx = math.cos(rx), math.sin(rx)
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    return Rz @ Ry @ Rx


def shepp_logan_spec():
    """A 10-ellipsoid head-phantom analog whose normalized values span [0, 1]."""
    E = Ellipsoid
    return PhantomSpec([
        E((0.0, 0.0, 0.0), (0.69, 0.92, 0.81), density=0.80),
        E((0.0, -0.0184, 0.0), (0.6624, 0.874, 0.78), density=-0.30),
        E((0.22, 0.0, 0.0), (0.11, 0.31, 0.22), (-math.radians(18), 0, 0), -0.20),
        E((-0.22, 0.0, 0.0), (0.16, 0.41, 0.28), (math.radians(18), 0, 0), -0.20),
        E((0.0, 0.35, -0.15), (0.21, 0.25, 0.41), density=0.30),
        E((0.0, 0.1, 0.25), (0.046, 0.046, 0.05), density=0.30),
        E((0.0, -0.1, 0.25), (0.046, 0.046, 0.05), density=0.30),
        E((-0.08, -0.605, 0.0), (0.046, 0.023, 0.05), density=0.40),
        E((0.0, -0.606, 0.0), (0.023, 0.023, 0.02), density=0.40),
        E((0.06, -0.605, -0.1), (0.023, 0.046, 0.02), density=0.50),
    ])


def make_phantom(spec, dims, voxel_size):
    """Rasterize additive ellipsoids on a voxel grid (hard membership test).

    Voxel value = clamp of the summed densities of all ellipsoids whose
    interior contains the voxel center. An empty spec yields a zero volume.
    """
    dims = tuple(int(d) for d in dims)
    if min(dims) < 8:
        raise DimensionError(f"phantom dims must be >= 8 per axis, got {dims}")
    vol = Volume(np.zeros(dims), voxel_size)
    half = vol.bbox_half
    xs, ys, zs = vol.voxel_centers_1d()
    X, Y, Z = np.meshgrid(xs / half, ys / half, zs / half, indexing="ij")
    pts = np.stack([X, Y, Z], axis=-1)
    acc = np.zeros(dims)
    for e in spec.ellipsoids:
        R = _euler_zyx(*e.rotation)
        local = (pts - np.asarray(e.center)) @ R
        q = (local / np.asarray(e.semi_axes)) ** 2
        acc += e.density * (q.sum(axis=-1) <= 1.0)
    vol.data[...] = np.clip(acc, 0.0, 1.0)
    return vol


# -- binary I/O ----------------------------------------------------------

def save_volume(vol, path):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", KIND_VOLUME))
        fh.write(struct.pack("<3I", *vol.dims))
        fh.write(struct.pack("<d", vol.voxel_size))
        fh.write(struct.pack("<3d", *vol.origin))
        fh.write(vol.data.astype("<f4").tobytes())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise PayloadError(f"truncated file while reading {what}")
    return buf


def load_volume(path):
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise BadMagicError(f"bad magic in {path}")
        (kind,) = struct.unpack("<B", _read_exact(fh, 1, "kind"))
        if kind != KIND_VOLUME:
            raise DimensionError(f"{path} holds kind {kind}, expected a volume")
        dims = struct.unpack("<3I", _read_exact(fh, 12, "dims"))
        (voxel_size,) = struct.unpack("<d", _read_exact(fh, 8, "voxel size"))
        origin = struct.unpack("<3d", _read_exact(fh, 24, "origin"))
        n = dims[0] * dims[1] * dims[2]
        payload = _read_exact(fh, 4 * n, "payload")
        if fh.read(1):
            raise PayloadError(f"oversized payload in {path}")
        data = np.frombuffer(payload, dtype="<f4").reshape(dims)
        return Volume(data, voxel_size, np.array(origin))


def save_projections(p, path):
    g = p.geometry
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", KIND_PROJECTIONS))
        fh.write(struct.pack("<2d", g.dso, g.dsd))
        fh.write(struct.pack("<2I", g.det_rows, g.det_cols))
        fh.write(struct.pack("<2d", g.det_pixel, g.bbox_half))
        fh.write(struct.pack("<I", g.n_views))
        fh.write(g.angles.astype("<f8").tobytes())
        fh.write(struct.pack("<I", p.n_views))
        fh.write(p.view_indices.astype("<u4").tobytes())
        fh.write(p.images.astype("<f4").tobytes())


def load_projections(path):
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise BadMagicError(f"bad magic in {path}")
        (kind,) = struct.unpack("<B", _read_exact(fh, 1, "kind"))
        if kind != KIND_PROJECTIONS:
            raise DimensionError(f"{path} holds kind {kind}, expected projections")
        dso, dsd = struct.unpack("<2d", _read_exact(fh, 16, "distances"))
        rows, cols = struct.unpack("<2I", _read_exact(fh, 8, "detector dims"))
        det_pixel, bbox_half = struct.unpack("<2d", _read_exact(fh, 16, "pixel/bbox"))
        (n_angles,) = struct.unpack("<I", _read_exact(fh, 4, "angle count"))
        angles = np.frombuffer(_read_exact(fh, 8 * n_angles, "angles"), dtype="<f8")
        (n_views,) = struct.unpack("<I", _read_exact(fh, 4, "view count"))
        vi = np.frombuffer(_read_exact(fh, 4 * n_views, "view indices"), dtype="<u4")
        n = n_views * rows * cols
        payload = _read_exact(fh, 4 * n, "payload")
        if fh.read(1):
            raise PayloadError(f"oversized payload in {path}")
        images = np.frombuffer(payload, dtype="<f4").reshape(n_views, rows, cols)
        geom = ConeBeamGeometry(dso, dsd, rows, cols, det_pixel, angles.copy(),
                                bbox_half)
        return ProjectionSet(geom, images, vi.astype(np.intp))


def export_slice_pgm(vol, axis, index, path):
    """Write one slice as binary PGM (P5) with linear [0,1] -> [0,255] mapping."""
    if not 0 <= axis <= 2:
        raise DimensionError(f"axis must be 0..2, got {axis}")
    if not 0 <= index < vol.dims[axis]:
        raise DimensionError(f"slice index {index} out of range for axis {axis}")
    sl = np.take(vol.data, index, axis=axis)
    img = np.clip(np.rint(np.clip(sl, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())
