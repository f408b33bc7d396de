"""Evaluation metrics: Dice overlap, 95th-percentile surface distance,
landmark registration error, and folding volume.

Conventions fixed here so numbers are comparable across runs: hd95 is the
max of the two directed 95th percentiles (linear-interpolation percentile
over boundary-voxel distances, exact Euclidean distance transform);
label warping samples nearest-neighbor at x + u(x).
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .bspline import non_diffeomorphic_volume
from .grids import (
    LabelVolume,
    ScalarVolume,
    VectorField,
    six_neighborhood_structure,
    trilinear_sample,
)


@dataclass(frozen=True)
class LandmarkSet:
    """Named points in voxel coordinates.

    ``points`` and ``identifiers`` are parallel; identifiers must be unique
    so sets can be matched by name. Domain membership is checked where a
    geometry is available (see ``tre``).
    """

    points: tuple
    identifiers: tuple

    def __post_init__(self):
        pts = tuple(tuple(float(c) for c in p) for p in self.points)
        ids = tuple(str(i) for i in self.identifiers)
        if len(pts) != len(ids):
            raise ValueError("points and identifiers must have equal length")
        if any(len(p) != 3 for p in pts):
            raise ValueError("points must be (x, y, z) triples")
        if not all(np.isfinite(c) for p in pts for c in p):
            raise ValueError("points must be finite")
        if len(set(ids)) != len(ids):
            raise ValueError("identifiers must be unique")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "identifiers", ids)

    def __len__(self) -> int:
        return len(self.points)


def _check_geometry(a, b):
    if a.geometry != b.geometry:
        raise ValueError("geometry mismatch")


def dice(a: LabelVolume, b: LabelVolume) -> tuple:
    """Per-label Dice overlap and its mean.

    Returns ``(per_label, mean)`` where ``per_label`` maps each nonzero
    label present in either volume to 2|A∩B| / (|A| + |B|). With no nonzero
    labels anywhere the mean is nan.
    """
    _check_geometry(a, b)
    labels = sorted(set(a.labels().tolist()) | set(b.labels().tolist()))
    per_label = {}
    for lab in labels:
        in_a = a.data == lab
        in_b = b.data == lab
        inter = int(np.count_nonzero(in_a & in_b))
        size = int(np.count_nonzero(in_a)) + int(np.count_nonzero(in_b))
        per_label[int(lab)] = 2.0 * inter / size
    mean = float(np.mean(list(per_label.values()))) if per_label else float("nan")
    return per_label, mean


def _boundary(mask: np.ndarray) -> np.ndarray:
    # mask voxels with a six-neighbor outside the mask; the volume edge
    # counts as outside (border_value=0)
    eroded = ndimage.binary_erosion(mask, structure=six_neighborhood_structure(), border_value=0)
    return mask & ~eroded


def hd95(a: LabelVolume, b: LabelVolume, label: int) -> float:
    """Symmetric 95th-percentile surface distance of one label, in physical
    units: max of the two directed linear-interpolation percentiles over
    exact Euclidean distances between boundary voxels."""
    _check_geometry(a, b)
    mask_a = a.data == label
    mask_b = b.data == label
    if not mask_a.any() or not mask_b.any():
        raise ValueError(f"label {label} is empty in at least one volume")
    spacing = a.geometry.spacing
    bound_a = _boundary(mask_a)
    bound_b = _boundary(mask_b)
    to_b = ndimage.distance_transform_edt(~bound_b, sampling=spacing)
    to_a = ndimage.distance_transform_edt(~bound_a, sampling=spacing)
    d_ab = float(np.percentile(to_b[bound_a], 95.0))
    d_ba = float(np.percentile(to_a[bound_b], 95.0))
    return max(d_ab, d_ba)


def tre(
    fixed_lm: LandmarkSet,
    moving_lm: LandmarkSet,
    u: VectorField,
    spacing: tuple | None = None,
) -> tuple:
    """Target registration error: landmarks matched by identifier, fixed
    points displaced by the trilinearly sampled field, Euclidean distance to
    the moving points in physical units.

    Returns ``(mean, per_landmark)`` with per-landmark distances in
    ``fixed_lm`` identifier order. ``spacing`` defaults to the field
    geometry's spacing.
    """
    if sorted(fixed_lm.identifiers) != sorted(moving_lm.identifiers):
        raise ValueError("landmark identifiers do not match")
    if len(fixed_lm) == 0:
        raise ValueError("landmark sets are empty")
    by_name = dict(zip(moving_lm.identifiers, moving_lm.points))
    pts_f = np.asarray(fixed_lm.points, dtype=np.float64)
    pts_m = np.asarray([by_name[i] for i in fixed_lm.identifiers], dtype=np.float64)
    hi = np.asarray(u.geometry.shape, dtype=np.float64) - 1.0
    for pts in (pts_f, pts_m):
        if (pts < 0.0).any() or (pts > hi).any():
            raise ValueError("landmarks fall outside the image domain")
    if spacing is None:
        spacing = u.geometry.spacing
    sampled = np.stack(
        [trilinear_sample(ScalarVolume(u.geometry, u.data[..., c]), pts_f) for c in range(3)],
        axis=-1,
    )
    delta = (pts_m - (pts_f + sampled)) * np.asarray(spacing, dtype=np.float64)
    per_landmark = tuple(float(d) for d in np.sqrt((delta**2).sum(axis=1)))
    return float(np.mean(per_landmark)), per_landmark


def ndv_metric(u: VectorField) -> float:
    """Non-diffeomorphic volume fraction of a displacement field."""
    return non_diffeomorphic_volume(u)


def warp_labels(labels: LabelVolume, u: VectorField) -> LabelVolume:
    """Warp a label volume by nearest-neighbor sampling at x + u(x).

    The identity field reproduces the input exactly; sample positions
    outside the domain clamp to the nearest voxel.
    """
    _check_geometry(labels, u)
    shape = labels.geometry.shape
    grids = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")
    out_idx = []
    for axis in range(3):
        pos = np.rint(grids[axis] + u.data[..., axis])
        out_idx.append(np.clip(pos, 0, shape[axis] - 1).astype(np.intp))
    return LabelVolume(labels.geometry, labels.data[tuple(out_idx)])
