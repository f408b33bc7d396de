"""Magnitude-constrained cubic B-spline displacement fields.

A field is parameterized by a 3-vector of coefficients per control point on a
regular lattice with ``control_spacing`` voxels between points and one margin
point on every side (cubic support). Control point with array index c along
an axis sits at voxel position (c - 1) * control_spacing. Every coefficient
component is capped at ``bound = 0.4 * control_spacing`` voxels, the classical
sufficient condition for the dense displacement to be invertible; that cap is
what makes composition, exact inversion, and coefficient-space averaging safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import _diffcore as core
from ._diffcore import InversionError
from .grids import GridGeometry, ScalarVolume, VectorField

__all__ = [
    "BOUND_FACTOR",
    "BSplineField",
    "StageStack",
    "InversionError",
    "control_grid_shape",
    "bspline_to_dense",
    "clamp_coefficients",
    "compose",
    "invert_fixed_point",
    "jacobian_determinant",
    "non_diffeomorphic_volume",
    "apply_warp",
    "stack_to_dense",
]

BOUND_FACTOR = 0.4


def control_grid_shape(image_shape, control_spacing: int) -> tuple:
    """Control points per axis: enough spans to cover [0, N-1] plus one
    margin point on each side."""
    return tuple(math.ceil((n - 1) / control_spacing) + 3 for n in image_shape)


@dataclass
class BSplineField:
    """One deformation stage: bounded coefficients on a control lattice.

    ``coefficients`` has shape ``control_grid_shape(...) + (3,)``, voxel
    units on the image grid of ``geometry``.
    """

    geometry: GridGeometry
    control_spacing: int
    coefficients: np.ndarray
    bound: float = field(default=0.0)

    def __post_init__(self):
        self.control_spacing = int(self.control_spacing)
        if self.control_spacing < 1:
            raise ValueError("control_spacing must be a positive integer")
        if self.bound == 0.0:
            self.bound = BOUND_FACTOR * self.control_spacing
        if self.bound <= 0:
            raise ValueError("bound must be positive")
        self.coefficients = np.asarray(self.coefficients, dtype=np.float64)
        expected = control_grid_shape(self.geometry.shape, self.control_spacing) + (3,)
        if self.coefficients.shape != expected:
            raise ValueError(
                f"coefficient shape {self.coefficients.shape} does not match control grid {expected}"
            )
        if not np.all(np.isfinite(self.coefficients)):
            raise ValueError("coefficients contain non-finite values")
        top = float(np.abs(self.coefficients).max())
        if top > self.bound:
            raise ValueError(f"coefficient magnitude {top} exceeds bound {self.bound}")

    @classmethod
    def zeros(cls, geometry: GridGeometry, control_spacing: int) -> "BSplineField":
        shape = control_grid_shape(geometry.shape, control_spacing) + (3,)
        return cls(geometry, control_spacing, np.zeros(shape))


@dataclass
class StageStack:
    """Ordered deformation stages, coarsest first, on one image domain."""

    stages: tuple

    def __post_init__(self):
        self.stages = tuple(self.stages)
        for s in self.stages:
            if not isinstance(s, BSplineField):
                raise TypeError("stages must be BSplineField instances")
            if s.geometry != self.stages[0].geometry:
                raise ValueError("stages refer to different image domains")


def _weight_matrices(geometry: GridGeometry, control_spacing: int):
    nc = control_grid_shape(geometry.shape, control_spacing)
    return tuple(
        core.bspline_weight_matrix(np.arange(n, dtype=np.float64), control_spacing, c)
        for n, c in zip(geometry.shape, nc)
    )


def _coef_tensor(field: BSplineField) -> torch.Tensor:
    return core.field_to_tensor(field.coefficients)


def bspline_to_dense(field: BSplineField) -> VectorField:
    """Evaluate the tensor-product cubic B-spline on the full image grid."""
    mats = _weight_matrices(field.geometry, field.control_spacing)
    with torch.no_grad():
        dense = core.bspline_dense(_coef_tensor(field), mats)
    return VectorField(field.geometry, core.tensor_to_field(dense))


def clamp_coefficients(raw: np.ndarray, geometry: GridGeometry, control_spacing: int) -> BSplineField:
    """Map unconstrained coefficients through bound * tanh(raw / bound)."""
    bound = BOUND_FACTOR * int(control_spacing)
    clamped = bound * np.tanh(np.asarray(raw, dtype=np.float64) / bound)
    return BSplineField(geometry, control_spacing, clamped)


def _check_same_geometry(a, b):
    if a.geometry != b.geometry:
        raise ValueError("geometry mismatch")


def compose(first: VectorField, second: VectorField) -> VectorField:
    """Displacement of (x -> x + u1(x) + u2(x + u1(x))): apply ``first``,
    then ``second``, acting on points."""
    _check_same_geometry(first, second)
    with torch.no_grad():
        out = core.compose_displacements(
            core.field_to_tensor(first.data), core.field_to_tensor(second.data)
        )
    return VectorField(first.geometry, core.tensor_to_field(out))


def invert_fixed_point(u: VectorField, tol: float = 1e-6, max_iter: int = 50) -> VectorField:
    """Inverse displacement via the fixed point v(x) = -u(x + v(x)).

    Convergence is guaranteed for fields from bounded stages (contraction);
    non-convergence raises InversionError carrying the last residual.
    """
    with torch.no_grad():
        v = core.invert_displacement(core.field_to_tensor(u.data), tol=tol, max_iter=max_iter)
    return VectorField(u.geometry, core.tensor_to_field(v))


def invert_newton(u: VectorField, tol: float = 1e-9, max_iter: int = 200) -> VectorField:
    """Inverse displacement by damped Newton iteration.

    Also converges on multi-stage composite fields, whose displacement maps
    need not be contractions; raises InversionError on non-convergence.
    """
    with torch.no_grad():
        v = core.invert_displacement_newton(core.field_to_tensor(u.data), tol=tol, max_iter=max_iter)
    return VectorField(u.geometry, core.tensor_to_field(v))


def jacobian_determinant(u: VectorField) -> ScalarVolume:
    """det(I + grad u), central differences at interior voxels and one-sided
    differences at the boundary slabs."""
    with torch.no_grad():
        det = core.jacobian_det_map(core.field_to_tensor(u.data))
    return ScalarVolume(u.geometry, det.numpy().copy())


def non_diffeomorphic_volume(u: VectorField) -> float:
    """Mean over interior voxels of max(0, -det(I + grad u)): exactly zero
    when no finite-difference determinant is negative, and the same quantity
    serves as the differentiable folding penalty."""
    with torch.no_grad():
        return float(core.ndv(core.field_to_tensor(u.data)))


def apply_warp(img: ScalarVolume, u: VectorField) -> ScalarVolume:
    """output(x) = img(x + u(x)), trilinear with clamp-to-edge."""
    _check_same_geometry(img, u)
    with torch.no_grad():
        warped = core.warp_channels(
            core.to_tensor(img.data).unsqueeze(0), core.field_to_tensor(u.data)
        )[0]
    return ScalarVolume(img.geometry, warped.numpy().copy())


def stack_to_dense(stack: StageStack) -> VectorField:
    """Left-fold composition of the stages' dense fields, coarsest first."""
    if not stack.stages:
        raise ValueError("empty stage stack")
    total = bspline_to_dense(stack.stages[0])
    for stage in stack.stages[1:]:
        total = compose(total, bspline_to_dense(stage))
    return total
