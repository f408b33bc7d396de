"""Objective terms for registration: local correlation similarity, diffusion
regularization, folding penalty, cycle consistency, and analytic gradients
with respect to raw stage coefficients.

All terms are assembled on the torch side (float64) so one code path serves
three callers: the public numpy-facing functions here, the finite-difference
gradient checks, and the optimizer's hot loop. The similarity term enters the
total as its negation (the total is minimized), so in every report the
"similarity" entry is a loss contribution: lower is better everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import _diffcore as core
from .bspline import BSplineField, StageStack, control_grid_shape
from .grids import GridGeometry, MaskVolume, ScalarVolume, VectorField
from .mind import MindVolume

__all__ = [
    "LNCC_VARIANCE_FLOOR",
    "LossWeights",
    "LossReport",
    "PairObjective",
    "lncc",
    "multichannel_lncc",
    "diffusion_regularizer",
    "ndv_penalty",
    "group_consistency",
    "loss_value",
    "loss_gradient",
]

LNCC_VARIANCE_FLOOR = 1e-8


@dataclass(frozen=True)
class LossWeights:
    """Term weights; ndv and group_consistency stay 0 until the final
    iterations of a registration raise them."""

    similarity: float = 1.0
    diffusion: float = 1.0
    ndv: float = 0.0
    group_consistency: float = 0.0
    intermediate_stage_factor: float = 0.01

    def __post_init__(self):
        for name in ("similarity", "diffusion", "ndv", "group_consistency"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} weight must be >= 0")
        if not 0.0 <= self.intermediate_stage_factor <= 1.0:
            raise ValueError("intermediate_stage_factor must lie in [0, 1]")


@dataclass
class LossReport:
    """One objective evaluation, decomposed three ways.

    ``terms`` holds unweighted term values (similarity already negated, see
    module docstring), ``weighted`` the same keys multiplied by their weights
    (and, for similarity/diffusion, by the stage scale), ``stage_totals`` the
    per-stage contributions to ``total``, and ``forward``/``backward`` the
    raw per-direction similarity and diffusion values.
    """

    total: float
    terms: dict
    weighted: dict
    stage_totals: tuple
    forward: dict
    backward: dict

    def __post_init__(self):
        if abs(self.total - sum(self.weighted.values())) > 1e-10:
            raise ValueError("total does not match the weighted term sum")


def _channels_tensor(data: np.ndarray) -> torch.Tensor:
    """(X, Y, Z) or (X, Y, Z, C) numpy -> (C, X, Y, Z) tensor."""
    if data.ndim == 3:
        data = data[..., None]
    return core.to_tensor(np.moveaxis(data, -1, 0))


def _mask_tensor(mask: MaskVolume) -> torch.Tensor:
    return core.to_tensor(mask.data.astype(np.float64))


def _check_geometry(a, b):
    if a.geometry != b.geometry:
        raise ValueError("geometry mismatch")


def lncc(a: ScalarVolume, b: ScalarVolume, mask: MaskVolume, window_radius: int = 4) -> float:
    """Mean local correlation over masked voxels; higher is better, 1.0 for
    a voxelwise positive affine relation (away from the variance floor)."""
    _check_geometry(a, b)
    _check_geometry(a, mask)
    if not mask.data.any():
        raise ValueError("empty mask")
    with torch.no_grad():
        return float(
            core.lncc(
                _channels_tensor(a.data),
                _channels_tensor(b.data),
                _mask_tensor(mask),
                radius=window_radius,
                variance_floor=LNCC_VARIANCE_FLOOR,
            )
        )


def multichannel_lncc(a: MindVolume, b: MindVolume, mask: MaskVolume, window_radius: int = 4) -> float:
    """Channelwise lncc averaged over feature channels."""
    _check_geometry(a, b)
    _check_geometry(a, mask)
    if a.data.shape[-1] != b.data.shape[-1]:
        raise ValueError("channel count mismatch")
    if not mask.data.any():
        raise ValueError("empty mask")
    with torch.no_grad():
        return float(
            core.lncc(
                _channels_tensor(a.data),
                _channels_tensor(b.data),
                _mask_tensor(mask),
                radius=window_radius,
                variance_floor=LNCC_VARIANCE_FLOOR,
            )
        )


def diffusion_regularizer(u: VectorField, mask: MaskVolume) -> float:
    """Mean over masked interior voxels of the squared Frobenius norm of the
    forward-difference Jacobian of the displacement."""
    _check_geometry(u, mask)
    sub = tuple(n - 1 for n in u.geometry.shape)
    if not mask.data[: sub[0], : sub[1], : sub[2]].any():
        raise ValueError("mask has no interior voxels")
    with torch.no_grad():
        return float(core.diffusion(core.field_to_tensor(u.data), _mask_tensor(mask)))


def ndv_penalty(u: VectorField) -> float:
    """Mean rectified negative interior Jacobian determinant (see
    bspline.non_diffeomorphic_volume); differentiable through the rectifier
    when assembled into an objective."""
    with torch.no_grad():
        return float(core.ndv(core.field_to_tensor(u.data)))


def group_consistency(cycle, mask: MaskVolume) -> float:
    """Mean squared displacement magnitude of the left-fold composition of a
    cycle of fields whose composition should be the identity."""
    cycle = list(cycle)
    if len(cycle) < 2:
        raise ValueError("a cycle needs at least two fields")
    for f in cycle:
        _check_geometry(f, cycle[0])
    _check_geometry(cycle[0], mask)
    if not mask.data.any():
        raise ValueError("empty mask")
    with torch.no_grad():
        fields = [core.field_to_tensor(f.data) for f in cycle]
        return float(core.cycle_residual(fields, _mask_tensor(mask)))


@dataclass
class PairObjective:
    """Everything the pair objective needs besides the deformation itself.

    ``fixed_features`` / ``moving_features`` are (X, Y, Z, C) arrays (C = 1
    for raw intensities); similarity for both directions is evaluated under
    ``mask``. ``cycle_tail`` optionally lists frozen fields completing an
    image cycle after the live forward deformation (enables the cycle term).
    ``inversion_warm_start`` seeds the backward-field fixed point; it only
    affects iteration count, never the converged value.
    """

    geometry: GridGeometry
    fixed_features: np.ndarray
    moving_features: np.ndarray
    mask: MaskVolume
    weights: LossWeights = field(default_factory=LossWeights)
    window_radius: int = 4
    cycle_tail: tuple = ()
    inversion_tol: float = 1e-9
    inversion_max_iter: int = 200
    inversion_warm_start: np.ndarray | None = None

    def __post_init__(self):
        self.fixed_features = np.asarray(self.fixed_features, dtype=np.float64)
        self.moving_features = np.asarray(self.moving_features, dtype=np.float64)
        for name, feat in (("fixed", self.fixed_features), ("moving", self.moving_features)):
            if feat.ndim != 4 or feat.shape[:3] != tuple(self.geometry.shape):
                raise ValueError(f"{name} features must be (X, Y, Z, C) on the image grid")
        if self.fixed_features.shape[-1] != self.moving_features.shape[-1]:
            raise ValueError("feature channel mismatch")
        if self.mask.geometry != self.geometry:
            raise ValueError("mask geometry mismatch")
        if not self.mask.data.any():
            raise ValueError("empty mask")
        if self.window_radius < 1:
            raise ValueError("window_radius must be >= 1")


def _objective_tensors(obj: PairObjective):
    fixed_t = _channels_tensor(obj.fixed_features)
    moving_t = _channels_tensor(obj.moving_features)
    mask_t = _mask_tensor(obj.mask)
    tail = tuple(core.field_to_tensor(f.data) for f in obj.cycle_tail)
    warm = (
        core.field_to_tensor(obj.inversion_warm_start)
        if obj.inversion_warm_start is not None
        else None
    )
    return fixed_t, moving_t, mask_t, tail, warm


def _pair_total(obj: PairObjective, tensors, total_fwd: torch.Tensor, stage_scale: float):
    """Weighted objective total plus the per-term breakdown, as tensors.

    total = stage_scale * (-w_sim (sim_f + sim_b) + w_diff (reg_f + reg_b))
            + w_ndv * ndv(fwd) + w_gc * cycle(fwd, *tail)

    Terms with zero weight are skipped entirely.
    """
    fixed_t, moving_t, mask_t, tail, warm = tensors
    w = obj.weights
    if total_fwd.requires_grad:
        # Newton fixed point with the implicit-function backward
        total_bwd = core.invert_displacement(
            total_fwd, tol=obj.inversion_tol, max_iter=obj.inversion_max_iter, v0=warm
        )
    else:
        total_bwd = core.invert_displacement_newton(
            total_fwd, tol=obj.inversion_tol, max_iter=obj.inversion_max_iter, v0=warm
        )
    sim_f = core.lncc(
        core.warp_channels(moving_t, total_fwd), fixed_t, mask_t,
        radius=obj.window_radius, variance_floor=LNCC_VARIANCE_FLOOR,
    )
    sim_b = core.lncc(
        core.warp_channels(fixed_t, total_bwd), moving_t, mask_t,
        radius=obj.window_radius, variance_floor=LNCC_VARIANCE_FLOOR,
    )
    reg_f = core.diffusion(total_fwd, mask_t)
    reg_b = core.diffusion(total_bwd, mask_t)
    terms = {"similarity": -(sim_f + sim_b), "diffusion": reg_f + reg_b}
    weighted = {
        "similarity": stage_scale * w.similarity * terms["similarity"],
        "diffusion": stage_scale * w.diffusion * terms["diffusion"],
    }
    if w.ndv > 0:
        terms["ndv"] = core.ndv(total_fwd)
        weighted["ndv"] = w.ndv * terms["ndv"]
    if w.group_consistency > 0 and tail:
        terms["group_consistency"] = core.cycle_residual([total_fwd, *tail], mask_t)
        weighted["group_consistency"] = w.group_consistency * terms["group_consistency"]
    total = sum(weighted.values())
    directions = {
        "forward": {"similarity": float(sim_f.detach()), "diffusion": float(reg_f.detach())},
        "backward": {"similarity": float(sim_b.detach()), "diffusion": float(reg_b.detach())},
    }
    return total, terms, weighted, directions, total_bwd.detach()


_MATRIX_CACHE: dict = {}


def _weight_matrices(shape: tuple, control_spacing: int):
    key = (shape, control_spacing)
    if key not in _MATRIX_CACHE:
        nc = control_grid_shape(shape, control_spacing)
        _MATRIX_CACHE[key] = tuple(
            core.bspline_weight_matrix(np.arange(n, dtype=np.float64), control_spacing, c)
            for n, c in zip(shape, nc)
        )
    return _MATRIX_CACHE[key]


def _total_forward(obj: PairObjective, stack: StageStack, stage_index: int, raw_t: torch.Tensor):
    """Fold the stack's dense fields with the live stage's raw coefficients
    substituted (clamped) at stage_index; other stages are constants."""
    shape = tuple(obj.geometry.shape)
    total = None
    for i, stage in enumerate(stack.stages):
        if stage.geometry.shape != shape:
            raise ValueError("stage geometry does not match the objective grid")
        mats = _weight_matrices(shape, stage.control_spacing)
        if i == stage_index:
            clamped = core.tanh_clamp(raw_t, stage.bound)
            dense = core.bspline_dense(clamped, mats)
        else:
            with torch.no_grad():
                dense = core.bspline_dense(core.field_to_tensor(stage.coefficients), mats)
        total = dense if total is None else core.compose_displacements(total, dense)
    return total


def _check_gradient_call(stack: StageStack, stage_index: int, raw: np.ndarray) -> np.ndarray:
    if not stack.stages:
        raise ValueError("empty stage stack")
    if not 0 <= stage_index < len(stack.stages):
        raise ValueError(f"stage_index {stage_index} out of range")
    stage = stack.stages[stage_index]
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != stage.coefficients.shape:
        raise ValueError(f"raw coefficients must have shape {stage.coefficients.shape}")
    return raw


def loss_value(obj: PairObjective, stack: StageStack, stage_index: int, raw: np.ndarray) -> LossReport:
    """Evaluate the pair objective with stage ``stage_index`` replaced by the
    clamped ``raw`` coefficients; the stage's similarity/diffusion carry the
    intermediate-stage factor unless it is the final stage."""
    raw = _check_gradient_call(stack, stage_index, raw)
    scale = 1.0 if stage_index == len(stack.stages) - 1 else obj.weights.intermediate_stage_factor
    tensors = _objective_tensors(obj)
    with torch.no_grad():
        total_fwd = _total_forward(obj, stack, stage_index, core.field_to_tensor(raw))
        total, terms, weighted, directions, _ = _pair_total(obj, tensors, total_fwd, scale)
    weighted_f = {k: float(v) for k, v in weighted.items()}
    return LossReport(
        total=float(total),
        terms={k: float(v) for k, v in terms.items()},
        weighted=weighted_f,
        stage_totals=tuple(
            sum(weighted_f.values()) if i == stage_index else 0.0
            for i in range(len(stack.stages))
        ),
        forward=directions["forward"],
        backward=directions["backward"],
    )


def loss_gradient(obj: PairObjective, stack: StageStack, stage_index: int, raw: np.ndarray) -> np.ndarray:
    """Analytic gradient of the total objective with respect to the raw
    (pre-clamp) coefficients of one stage, all other stages held constant.

    Chains through the tanh clamp, the B-spline basis, trilinear warping,
    and the backward direction's fixed-point inversion.
    """
    raw = _check_gradient_call(stack, stage_index, raw)
    scale = 1.0 if stage_index == len(stack.stages) - 1 else obj.weights.intermediate_stage_factor
    tensors = _objective_tensors(obj)
    raw_t = core.field_to_tensor(raw).requires_grad_(True)
    total_fwd = _total_forward(obj, stack, stage_index, raw_t)
    total, _, _, _, _ = _pair_total(obj, tensors, total_fwd, scale)
    (grad,) = torch.autograd.grad(total, raw_t)
    return core.tensor_to_field(grad)
