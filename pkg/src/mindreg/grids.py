"""Grid geometry, scalar/vector volumes, sampling, smoothing, pyramids, masking.

Conventions used across the package:

* volumes are numpy arrays of shape (X, Y, Z), C-order;
* vector fields are (X, Y, Z, 3), components along the array axes,
  displacements measured in voxel units;
* sampling clamps to the edge (coordinates clipped to [0, shape-1] per axis);
* filters renormalize their kernels over in-bounds taps at the boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

__all__ = [
    "GridGeometry",
    "ScalarVolume",
    "VectorField",
    "MaskVolume",
    "LabelVolume",
    "trilinear_sample",
    "gaussian_blur",
    "downsample_by_two",
    "foreground_mask",
    "six_neighborhood_structure",
]


def _as_triple(value, name: str) -> tuple:
    t = tuple(value)
    if len(t) != 3:
        raise ValueError(f"{name} must have exactly 3 entries, got {len(t)}")
    return t


@dataclass(frozen=True)
class GridGeometry:
    """Shape, spacing and origin of a regular 3D grid.

    Parameters
    ----------
    shape : tuple of int
        Voxels per axis; every entry must be >= 4 (cubic B-spline support
        and central differences need that much margin).
    spacing : tuple of float
        Physical units per voxel, strictly positive. Default 1.0 each.
    origin : tuple of float
        Physical coordinate of voxel index (0, 0, 0). Default 0.
    """

    shape: tuple
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in _as_triple(self.shape, "shape")))
        object.__setattr__(self, "spacing", tuple(float(s) for s in _as_triple(self.spacing, "spacing")))
        object.__setattr__(self, "origin", tuple(float(s) for s in _as_triple(self.origin, "origin")))
        if any(s < 4 for s in self.shape):
            raise ValueError(f"every shape entry must be >= 4, got {self.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def voxel_count(self) -> int:
        return self.shape[0] * self.shape[1] * self.shape[2]


def _check_payload(geometry: GridGeometry, data: np.ndarray, trailing=()):
    expected = tuple(geometry.shape) + tuple(trailing)
    if tuple(data.shape) != expected:
        raise ValueError(f"data shape {data.shape} does not match geometry {expected}")


@dataclass
class ScalarVolume:
    """A real-valued image on a grid. ``data`` has shape ``geometry.shape``."""

    geometry: GridGeometry
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        _check_payload(self.geometry, self.data)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("scalar volume contains non-finite values")


@dataclass
class VectorField:
    """A dense displacement field, voxel units, shape ``geometry.shape + (3,)``."""

    geometry: GridGeometry
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        _check_payload(self.geometry, self.data, trailing=(3,))
        if not np.all(np.isfinite(self.data)):
            raise ValueError("vector field contains non-finite values")


@dataclass
class MaskVolume:
    """Boolean foreground mask on a grid."""

    geometry: GridGeometry
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=bool)
        _check_payload(self.geometry, self.data)


@dataclass
class LabelVolume:
    """Nonnegative integer labels on a grid; 0 is background."""

    geometry: GridGeometry
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if not np.issubdtype(self.data.dtype, np.integer):
            raise ValueError("label volume must hold integers")
        _check_payload(self.geometry, self.data)
        if self.data.min() < 0:
            raise ValueError("labels must be nonnegative")

    def labels(self) -> np.ndarray:
        """Sorted nonzero labels present in the volume."""
        u = np.unique(self.data)
        return u[u != 0]


def trilinear_sample(vol: ScalarVolume, points) -> np.ndarray:
    """Sample a volume at fractional voxel coordinates.

    Parameters
    ----------
    vol : ScalarVolume
    points : array-like, shape (N, 3)
        Sample locations in voxel coordinates. Points outside the domain
        clamp to the boundary.

    Returns
    -------
    ndarray, shape (N,)
        Interpolated values.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[None, :]
    if not np.all(np.isfinite(pts)):
        raise ValueError("non-finite coordinate")
    return sample_channels(vol.data[..., None], pts)[:, 0]


def sample_channels(data: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Trilinear sampling of an (X, Y, Z, C) array at (N, 3) voxel coords."""
    shape = data.shape[:3]
    out_c = data.shape[3]
    p = np.empty_like(pts)
    for ax in range(3):
        p[:, ax] = np.clip(pts[:, ax], 0.0, shape[ax] - 1.0)
    i0 = np.empty((pts.shape[0], 3), dtype=np.int64)
    t = np.empty_like(p)
    for ax in range(3):
        i0[:, ax] = np.clip(np.floor(p[:, ax]).astype(np.int64), 0, max(shape[ax] - 2, 0))
        t[:, ax] = p[:, ax] - i0[:, ax]
    i1 = np.minimum(i0 + 1, np.asarray(shape) - 1)
    out = np.zeros((pts.shape[0], out_c), dtype=np.float64)
    for dx in (0, 1):
        wx = (1.0 - t[:, 0]) if dx == 0 else t[:, 0]
        ix = i0[:, 0] if dx == 0 else i1[:, 0]
        for dy in (0, 1):
            wy = (1.0 - t[:, 1]) if dy == 0 else t[:, 1]
            iy = i0[:, 1] if dy == 0 else i1[:, 1]
            for dz in (0, 1):
                wz = (1.0 - t[:, 2]) if dz == 0 else t[:, 2]
                iz = i0[:, 2] if dz == 0 else i1[:, 2]
                out += (wx * wy * wz)[:, None] * data[ix, iy, iz, :]
    return out


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Discrete Gaussian taps at integer offsets in [-ceil(3*sigma), +ceil(3*sigma)],
    normalized to sum 1."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    radius = math.ceil(3.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _blur_array(data: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian on a raw array; boundaries renormalize over
    in-bounds taps (filter the data and an all-ones volume with zero
    padding, then divide)."""
    kernel = gaussian_kernel(sigma)
    out = data.astype(np.float64, copy=True)
    norm = np.ones_like(out)
    for axis in range(3):
        out = ndimage.correlate1d(out, kernel, axis=axis, mode="constant", cval=0.0)
        norm = ndimage.correlate1d(norm, kernel, axis=axis, mode="constant", cval=0.0)
    return out / norm


def gaussian_blur(vol: ScalarVolume, sigma_voxels: float) -> ScalarVolume:
    """Separable discrete Gaussian blur, kernel radius ceil(3*sigma).

    The kernel is normalized to sum 1; at the boundary the effective kernel
    is renormalized over the in-bounds taps, so constants are preserved
    exactly and no background zeros bleed in.
    """
    return ScalarVolume(vol.geometry, _blur_array(vol.data, float(sigma_voxels)))


def downsample_by_two(vol: ScalarVolume) -> ScalarVolume:
    """Anti-aliased 2x downsampling: Gaussian blur at sigma 1.0, then every
    second voxel starting at index 0. Output spacing doubles."""
    if any(s < 8 for s in vol.geometry.shape):
        raise ValueError(f"shape {vol.geometry.shape} too small to halve (need >= 8 per axis)")
    blurred = _blur_array(vol.data, 1.0)
    data = blurred[::2, ::2, ::2]
    geom = GridGeometry(
        shape=data.shape,
        spacing=tuple(2.0 * s for s in vol.geometry.spacing),
        origin=vol.geometry.origin,
    )
    return ScalarVolume(geom, data)


def six_neighborhood_structure() -> np.ndarray:
    """3x3x3 structuring element connecting the six face neighbors."""
    return ndimage.generate_binary_structure(3, 1)


def foreground_mask(vol: ScalarVolume, quantile: float = 0.05) -> MaskVolume:
    """Threshold above an intensity quantile, then one 6-neighborhood
    morphological closing pass (dilate then erode).

    The erosion treats outside-of-volume as foreground so the closing never
    eats voxels at the volume edge (clamp-to-edge philosophy).
    """
    if not 0.0 < quantile < 1.0:
        raise ValueError("quantile must lie in (0, 1)")
    data = vol.data
    if data.max() == data.min():
        raise ValueError("degenerate intensity distribution")
    threshold = np.quantile(data, quantile)
    mask = data > threshold
    structure = six_neighborhood_structure()
    dilated = ndimage.binary_dilation(mask, structure=structure, border_value=0)
    closed = ndimage.binary_erosion(dilated, structure=structure, border_value=1)
    return MaskVolume(vol.geometry, closed)
