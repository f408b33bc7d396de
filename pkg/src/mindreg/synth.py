"""Synthetic benchmark: blob phantoms, ground-truth diffeomorphisms,
contrast remaps, and intensity augmentations.

Phantoms are sums of compactly supported anisotropic Gaussian blobs with
flat-topped intensity plateaus, so the image has genuine background zeros,
per-voxel dominant-blob labels, and one landmark per blob center. The
ground-truth deformation for a case is a composition of bounded B-spline
stages, drawn repeatedly (seeded rejection) until the initial mean landmark
error lands in a difficulty window proportional to ``deformation_max``; the
accepted field is fold-free by the stage bound.
"""

from dataclasses import dataclass

import numpy as np

from .bspline import (
    BOUND_FACTOR,
    BSplineField,
    StageStack,
    apply_warp,
    control_grid_shape,
    stack_to_dense,
)
from .grids import (
    GridGeometry,
    LabelVolume,
    MaskVolume,
    ScalarVolume,
    VectorField,
    foreground_mask,
    gaussian_blur,
    trilinear_sample,
)
from .metrics import LandmarkSet, warp_labels

# blob profile: intensity ramps from 0 at SUPPORT_LEVEL to the blob's plateau
# at CORE_LEVEL (levels of the unit Gaussian profile)
SUPPORT_LEVEL = 0.08
CORE_LEVEL = 0.55
INTENSITY_RANGE = (0.35, 1.0)
CENTER_MARGIN = 0.22
WIDTH_RANGE = (0.07, 0.12)

GT_CONTROL_SPACING = 8
GT_STAGE_COUNT = 5
# accepted initial mean landmark error, as fractions of deformation_max
DIFFICULTY_WINDOW = (17.0 / 30.0, 27.0 / 30.0)
MAX_GT_ATTEMPTS = 64
LANDMARK_TOL = 1e-9
LANDMARK_MAX_ITER = 150


def _normalize_contrast(mode):
    if mode == "identity" or mode == "inverted":
        return mode, None
    if isinstance(mode, tuple) and len(mode) == 2:
        kind, param = mode
        if kind == "gamma":
            if float(param) <= 0:
                raise ValueError("gamma must be > 0")
            return "gamma", float(param)
        if kind == "monotone_lut":
            return "monotone_lut", int(param)
    raise ValueError(
        f"unknown contrast mode {mode!r}; expected 'identity', 'inverted', "
        "('gamma', g) or ('monotone_lut', seed)"
    )


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of one synthetic case."""

    shape: tuple = (48, 48, 48)
    blob_count: int = 8
    seed: int = 0
    deformation_max: float = 3.0
    contrast: object = "identity"

    def __post_init__(self):
        shape = tuple(int(n) for n in self.shape)
        if len(shape) != 3 or min(shape) < 16:
            raise ValueError("shape must be a triple with every entry >= 16")
        object.__setattr__(self, "shape", shape)
        if self.blob_count < 1:
            raise ValueError("blob_count must be >= 1")
        if not 0.0 <= self.deformation_max <= BOUND_FACTOR * GT_CONTROL_SPACING:
            raise ValueError(
                "deformation_max must lie in "
                f"[0, {BOUND_FACTOR * GT_CONTROL_SPACING}] so the generated "
                "field keeps the fold-free stage bound"
            )
        _normalize_contrast(self.contrast)


@dataclass(frozen=True)
class BenchCase:
    """One registration problem with known ground truth."""

    fixed: ScalarVolume
    moving: ScalarVolume
    gt_field: VectorField
    labels_fixed: LabelVolume
    labels_moving: LabelVolume
    landmarks_fixed: LandmarkSet
    landmarks_moving: LandmarkSet
    mask: MaskVolume


def make_phantom(spec: PhantomSpec):
    """Seeded blob phantom: normalized image, dominant-blob labels, and one
    landmark per blob center. Returns (image, labels, landmarks)."""
    rng = np.random.default_rng(spec.seed)
    shape = spec.shape
    axes = [np.arange(n, dtype=np.float64) for n in shape]
    intensities = rng.permutation(np.linspace(*INTENSITY_RANGE, spec.blob_count))
    contributions = np.zeros((spec.blob_count,) + shape)
    centers = []
    for i in range(spec.blob_count):
        c = [rng.uniform(CENTER_MARGIN * n, (1.0 - CENTER_MARGIN) * n) for n in shape]
        w = [rng.uniform(WIDTH_RANGE[0] * n, WIDTH_RANGE[1] * n) for n in shape]
        g = np.exp(
            -(
                (axes[0][:, None, None] - c[0]) ** 2 / (2 * w[0] ** 2)
                + (axes[1][None, :, None] - c[1]) ** 2 / (2 * w[1] ** 2)
                + (axes[2][None, None, :] - c[2]) ** 2 / (2 * w[2] ** 2)
            )
        )
        ramp = np.clip((g - SUPPORT_LEVEL) / (CORE_LEVEL - SUPPORT_LEVEL), 0.0, 1.0)
        contributions[i] = intensities[i] * ramp
        centers.append(tuple(c))
    img = contributions.sum(axis=0)
    img /= img.max()
    labels = np.where(
        contributions.max(axis=0) > 0.0,
        contributions.argmax(axis=0) + 1,
        0,
    ).astype(np.int32)
    geometry = GridGeometry(shape)
    landmarks = LandmarkSet(tuple(centers), tuple(f"blob{i + 1}" for i in range(spec.blob_count)))
    return ScalarVolume(geometry, img), LabelVolume(geometry, labels), landmarks


def random_diffeomorphism(
    geometry: GridGeometry,
    max_displacement: float,
    control_spacing: int,
    seed: int,
) -> BSplineField:
    """One seeded fold-free stage: coefficients uniform within the tighter of
    ``max_displacement`` and the stage bound."""
    if max_displacement < 0:
        raise ValueError("max_displacement must be >= 0")
    half = min(float(max_displacement), BOUND_FACTOR * int(control_spacing))
    nc = control_grid_shape(geometry.shape, control_spacing)
    coefficients = np.random.default_rng(seed).uniform(-half, half, nc + (3,))
    return BSplineField(geometry, control_spacing, coefficients)


def contrast_remap(img: ScalarVolume, mode) -> ScalarVolume:
    """Intensity remap standing in for a modality change. Input must already
    be normalized to [0, 1]."""
    kind, param = _normalize_contrast(mode)
    v = img.data
    if v.min() < 0.0 or v.max() > 1.0:
        raise ValueError("contrast_remap expects intensities in [0, 1]")
    if kind == "identity":
        out = v.copy()
    elif kind == "inverted":
        out = 1.0 - v
    elif kind == "gamma":
        out = v**param
    else:
        knots_x = np.linspace(0.0, 1.0, 8)
        steps = np.random.default_rng(param).uniform(0.2, 1.0, 7)
        knots_y = np.concatenate(([0.0], np.cumsum(steps) / steps.sum()))
        out = np.interp(v, knots_x, knots_y)
    return ScalarVolume(img.geometry, out)


def augment(img: ScalarVolume, ops, seed: int) -> ScalarVolume:
    """Apply intensity augmentations in the listed order.

    Ops: ("noise", sigma), ("blur", sigma), "sign_inversion", ("gamma", g).
    The foreground mask is computed once from the input, so sign inversion
    (negation about the foreground mean) applied twice in one call restores
    the input. Gamma rescales the current range to [0, 1], applies the power,
    and restores the range, so it stays defined after noise.
    """
    rng = np.random.default_rng(seed)
    mask = None
    out = img.data.astype(np.float64).copy()
    for op in ops:
        kind, param = (op, None) if isinstance(op, str) else op
        if kind == "noise":
            out = out + rng.normal(0.0, float(param), out.shape)
        elif kind == "blur":
            out = gaussian_blur(ScalarVolume(img.geometry, out), float(param)).data
        elif kind == "sign_inversion":
            if mask is None:
                mask = foreground_mask(img).data
            center = out[mask].mean()
            out = 2.0 * center - out
        elif kind == "gamma":
            if float(param) <= 0:
                raise ValueError("gamma must be > 0")
            lo, hi = out.min(), out.max()
            if hi > lo:
                out = ((out - lo) / (hi - lo)) ** float(param) * (hi - lo) + lo
        else:
            raise ValueError(f"unknown augmentation {op!r}")
    return ScalarVolume(img.geometry, out)


def _map_landmarks_through(gt: VectorField, points: np.ndarray):
    """Solve q + gt(q) = p per landmark by damped fixed-point iteration;
    returns (q, converged)."""
    geometry = gt.geometry

    def sample(pts):
        cols = [
            trilinear_sample(ScalarVolume(geometry, gt.data[..., c]), pts) for c in range(3)
        ]
        return np.stack(cols, axis=-1)

    q = points.copy()
    for _ in range(LANDMARK_MAX_ITER):
        residual = q + sample(q) - points
        worst = float(np.abs(residual).max())
        if worst < LANDMARK_TOL:
            return q, True
        q = q - 0.4 * residual
    return q, False


def make_case(spec: PhantomSpec) -> BenchCase:
    """Generate one benchmark case with ground truth.

    The ground-truth field is a composition of GT_STAGE_COUNT bounded stages;
    draws are rejected (deterministically, derived sub-seeds) until the
    initial mean landmark error falls inside the difficulty window scaled by
    ``deformation_max`` and every mapped landmark stays in the domain.
    """
    base, labels, landmarks = make_phantom(spec)
    geometry = base.geometry
    points = np.asarray(landmarks.points, dtype=np.float64)
    window = (
        DIFFICULTY_WINDOW[0] * spec.deformation_max,
        DIFFICULTY_WINDOW[1] * spec.deformation_max,
    )
    hi = np.asarray(geometry.shape, dtype=np.float64) - 1.0
    gt = mapped = None
    for attempt in range(MAX_GT_ATTEMPTS):
        stage_seeds = np.random.SeedSequence((spec.seed, attempt)).generate_state(GT_STAGE_COUNT)
        stages = tuple(
            random_diffeomorphism(geometry, spec.deformation_max, GT_CONTROL_SPACING, int(s))
            for s in stage_seeds
        )
        candidate = stack_to_dense(StageStack(stages))
        q, converged = _map_landmarks_through(candidate, points)
        if not converged:
            continue
        if (q < 0.0).any() or (q > hi).any():
            continue
        initial = float(np.linalg.norm(q - points, axis=1).mean())
        if window[0] <= initial <= window[1]:
            gt, mapped = candidate, q
            break
    if gt is None:
        raise ValueError(
            f"no ground-truth draw hit the difficulty window {window} in "
            f"{MAX_GT_ATTEMPTS} attempts"
        )
    moving = contrast_remap(apply_warp(base, gt), spec.contrast)
    return BenchCase(
        fixed=base,
        moving=moving,
        gt_field=gt,
        labels_fixed=labels,
        labels_moving=warp_labels(labels, gt),
        landmarks_fixed=landmarks,
        landmarks_moving=LandmarkSet(tuple(map(tuple, mapped)), landmarks.identifiers),
        mask=foreground_mask(base),
    )
