"""Modality-independent neighborhood descriptor (MIND) feature volumes.

Each voxel x gets one feature per offset r:

    feature(x, r) = exp(-D(I, x, x + r) / V(I, x))

where D is a Gaussian-weighted sum of squared differences between the patch
around x and the patch around x + r,

    D(I, x, y) = sum_p  exp(-|p|^2 / sigma^2) * (I(x + p) - I(y + p))^2

over the integer lattice p in [-patch_radius, patch_radius]^3 (weights are
used unnormalized, exactly as the defining sum is written), and V is the mean
of D over the six axis-aligned unit offsets, floored so constant regions stay
well-defined. Features lie in (0, 1] and are invariant to affine intensity
maps a*I + b (a != 0) wherever the variance floor is inactive, which is what
makes them usable as a multi-modal similarity substrate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import ceil, exp

import numpy as np
from scipy import ndimage

from .grids import GridGeometry, MaskVolume, ScalarVolume

__all__ = [
    "SIX_NEIGHBORHOOD",
    "MindParams",
    "MindVolume",
    "patch_ssd",
    "local_variance",
    "mind_transform",
    "mind_distance",
]

SIX_NEIGHBORHOOD = (
    (1, 0, 0),
    (-1, 0, 0),
    (0, 1, 0),
    (0, -1, 0),
    (0, 0, 1),
    (0, 0, -1),
)

ABSOLUTE_VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class MindParams:
    """Descriptor parameters.

    Parameters
    ----------
    sigma : float
        Gaussian patch weight width. Default 0.5.
    offsets : tuple of int triples
        Feature offsets; default the six-neighborhood {±e1, ±e2, ±e3}.
    patch_radius : int
        Patch lattice half-width; default ceil(3 * sigma) (2 for the default
        sigma), wide enough to cover the weight's effective support.
    variance_floor_rel : float
        Relative variance floor, times the global mean of V.
    """

    sigma: float = 0.5
    offsets: tuple = SIX_NEIGHBORHOOD
    patch_radius: int = None  # type: ignore[assignment]
    variance_floor_rel: float = 1e-6

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        offsets = tuple(tuple(int(c) for c in o) for o in self.offsets)
        if len(offsets) == 0:
            raise ValueError("offsets must be nonempty")
        if len(set(offsets)) != len(offsets):
            raise ValueError("offsets must be pairwise distinct")
        object.__setattr__(self, "offsets", offsets)
        if self.patch_radius is None:
            object.__setattr__(self, "patch_radius", ceil(3.0 * self.sigma))
        if self.patch_radius < 1:
            raise ValueError("patch_radius must be >= 1")


@dataclass
class MindVolume:
    """Feature volume: ``data`` has shape ``geometry.shape + (len(offsets),)``,
    channels ordered as the offsets list.

    ``floor_active`` marks voxels where the variance floor clipped V
    (diagnostic; invariance guarantees hold only where it is False).
    """

    geometry: GridGeometry
    data: np.ndarray
    offsets: tuple
    floor_active: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        expected = tuple(self.geometry.shape) + (len(self.offsets),)
        if tuple(self.data.shape) != expected:
            raise ValueError(f"feature shape {self.data.shape} does not match {expected}")
        if self.data.min() <= 0.0 or self.data.max() > 1.0:
            raise ValueError("MIND features must lie in (0, 1]")


def _edge_pad(data: np.ndarray, margin: int) -> np.ndarray:
    return np.pad(data, margin, mode="edge")


def _axis_weights(params: MindParams) -> np.ndarray:
    r = params.patch_radius
    taps = np.arange(-r, r + 1, dtype=np.float64)
    return np.exp(-(taps**2) / (params.sigma**2))


def patch_ssd(img: ScalarVolume, offset, params: MindParams = MindParams()) -> ScalarVolume:
    """Gaussian-weighted patch distance D(I, x, x + offset) for every x.

    The shifted patch samples clamp to the volume edge, matching the
    package-wide sampling policy; the lattice weights exp(-|p|^2 / sigma^2)
    are applied unnormalized.
    """
    offset = tuple(int(c) for c in offset)
    shape = img.geometry.shape
    if any(abs(offset[a]) >= shape[a] for a in range(3)):
        raise ValueError(f"offset {offset} out of bounds for shape {shape}")
    r = params.patch_radius
    margin = r + max(abs(c) for c in offset)
    padded = _edge_pad(img.data, margin)
    shifted = padded[
        tuple(slice(margin + offset[a] - r, margin + offset[a] + r + shape[a]) for a in range(3))
    ]
    base = padded[tuple(slice(margin - r, margin + r + shape[a]) for a in range(3))]
    sq = (base - shifted) ** 2
    w = _axis_weights(params)
    for axis in range(3):
        sq = ndimage.correlate1d(sq, w, axis=axis, mode="constant", cval=0.0)
    out = sq[r:-r, r:-r, r:-r] if r > 0 else sq
    return ScalarVolume(img.geometry, out)


def local_variance(d_by_offset, params: MindParams = MindParams()) -> ScalarVolume:
    """Mean of the six-neighborhood patch distances, floored.

    The floor is ``variance_floor_rel`` times the global mean of the raw
    variance volume; when that global mean is zero (constant image) the
    absolute floor 1e-12 applies instead.
    """
    if len(d_by_offset) != 6:
        raise ValueError("local variance needs exactly the six-neighborhood distances")
    geometry = d_by_offset[0].geometry
    for d in d_by_offset[1:]:
        if d.geometry != geometry:
            raise ValueError("geometry mismatch across distance volumes")
    v = np.mean([d.data for d in d_by_offset], axis=0)
    global_mean = float(v.mean())
    floor = params.variance_floor_rel * global_mean if global_mean > 0.0 else ABSOLUTE_VARIANCE_FLOOR
    return ScalarVolume(geometry, np.maximum(v, floor))


def mind_transform(img: ScalarVolume, params: MindParams = MindParams()) -> MindVolume:
    """Full descriptor: one exp(-D/V) channel per offset.

    V always comes from the six-neighborhood distances regardless of the
    requested feature offsets.
    """
    six = [patch_ssd(img, off, params) for off in SIX_NEIGHBORHOOD]
    v = local_variance(six, params)
    six_map = {off: vol for off, vol in zip(SIX_NEIGHBORHOOD, six)}
    channels = []
    for off in params.offsets:
        d = six_map.get(tuple(off))
        if d is None:
            d = patch_ssd(img, off, params)
        # far custom offsets can drive D/V high enough for exp to underflow;
        # keep the value strictly positive as the feature range demands
        channels.append(np.maximum(np.exp(-d.data / v.data), np.finfo(np.float64).tiny))
    raw_mean = np.mean([d.data for d in six], axis=0)
    floor_active = raw_mean < v.data  # strictly raised to the floor
    return MindVolume(
        geometry=img.geometry,
        data=np.stack(channels, axis=-1),
        offsets=params.offsets,
        floor_active=floor_active,
    )


def mind_distance(a: MindVolume, b: MindVolume, mask: MaskVolume) -> float:
    """Mean squared feature difference over masked voxels and channels."""
    if a.geometry != b.geometry or a.data.shape != b.data.shape:
        raise ValueError("feature volumes must share geometry and channel count")
    if mask.geometry != a.geometry:
        raise ValueError("mask geometry mismatch")
    m = mask.data
    if not m.any():
        raise ValueError("empty mask")
    diff = a.data[m] - b.data[m]
    return float(np.mean(diff**2))
