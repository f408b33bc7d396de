"""Symmetric multiresolution registration by direct Adam optimization of
bounded B-spline stages.

Each resolution level appends one stage whose control grid is always sized
on the full-resolution image; coarse levels evaluate the same coefficients
analytically at their own grid positions, so no displacement field is ever
resampled between levels. Earlier stages stay frozen while a level runs.
The backward deformation is never a second optimization target: per-stage
exact inverses plus a Newton inverse of the composed forward field make the
backward map the numerical inverse of the forward map by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch
from scipy import ndimage

from . import _diffcore as core
from .bspline import (
    BOUND_FACTOR,
    BSplineField,
    StageStack,
    bspline_to_dense,
    clamp_coefficients,
    control_grid_shape,
    stack_to_dense,
)
from .grids import (
    GridGeometry,
    MaskVolume,
    ScalarVolume,
    VectorField,
    downsample_by_two,
    foreground_mask,
    six_neighborhood_structure,
)
from .losses import LossReport, LossWeights, PairObjective, _objective_tensors, _pair_total
from .mind import mind_transform

__all__ = [
    "INVERSE_CONSISTENCY_BOUND",
    "RegistrationConfig",
    "RegistrationResult",
    "build_pyramid",
    "register_pair",
    "register_triplet",
]

SIMILARITY_SPACES = ("raw_intensity", "mind")

INVERSE_CONSISTENCY_BOUND = 0.05


@dataclass(frozen=True)
class RegistrationConfig:
    """Optimizer and schedule settings for one registration run.

    ``control_spacing_schedule`` lists control-point spacings in
    full-resolution voxels, one per level, coarsest first and strictly
    decreasing. The ndv and group_consistency weights only act during the
    last ``final_phase_iterations`` of the finest level; their default
    magnitudes reflect the scale of each term (ndv values are tiny).
    """

    levels: int = 3
    iterations_per_level: int = 100
    final_phase_iterations: int = 30
    learning_rate: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    control_spacing_schedule: tuple = (8, 4, 2)
    weights: LossWeights = field(
        default_factory=lambda: LossWeights(ndv=1000.0, group_consistency=1.0)
    )
    similarity_space: str = "mind"
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.iterations_per_level < 1:
            raise ValueError("iterations_per_level must be >= 1")
        if not 0 <= self.final_phase_iterations <= self.iterations_per_level:
            raise ValueError("final_phase_iterations must lie in [0, iterations_per_level]")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        schedule = tuple(int(s) for s in self.control_spacing_schedule)
        object.__setattr__(self, "control_spacing_schedule", schedule)
        if len(schedule) != self.levels:
            raise ValueError("control_spacing_schedule must have one spacing per level")
        if any(s < 1 for s in schedule):
            raise ValueError("control spacings must be >= 1")
        if any(b >= a for a, b in zip(schedule, schedule[1:])):
            raise ValueError("control spacings must be strictly decreasing")
        if self.similarity_space not in SIMILARITY_SPACES:
            raise ValueError(f"similarity_space must be one of {SIMILARITY_SPACES}")


@dataclass
class RegistrationResult:
    """Everything one registration produced.

    ``backward_stack`` holds dense per-stage inverses in reversed stage
    order; the exact inverse of a spline stage is not itself a spline field,
    so the backward direction is stored densely. ``backward_total`` is the
    Newton inverse of ``forward_total`` and is the field consumers should
    warp with: composing it with the forward field leaves a residual at
    solver tolerance, far inside the 0.05 voxel contract enforced here.
    ``level_spans`` maps each level to its slice of ``loss_history``.
    """

    forward_stack: StageStack
    backward_stack: tuple
    forward_total: VectorField
    backward_total: VectorField
    loss_history: list
    converged_flags: tuple
    level_spans: tuple

    def __post_init__(self):
        with torch.no_grad():
            bwd = core.field_to_tensor(self.backward_total.data)
            fwd = core.field_to_tensor(self.forward_total.data)
            residual = float(core.compose_displacements(bwd, fwd).abs().max())
        if not residual < INVERSE_CONSISTENCY_BOUND:
            raise ValueError(
                f"inverse-consistency residual {residual:.4g} is not below "
                f"{INVERSE_CONSISTENCY_BOUND}"
            )


def build_pyramid(img: ScalarVolume, levels: int) -> list:
    """Coarsest-first pyramid by repeated blur-and-halve downsampling."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    shape = tuple(img.geometry.shape)
    for _ in range(levels - 1):
        if min(shape) < 8:
            raise ValueError(
                f"image of shape {tuple(img.geometry.shape)} is too small for "
                f"{levels} pyramid levels"
            )
        shape = tuple((n + 1) // 2 for n in shape)
    out = [img]
    for _ in range(levels - 1):
        out.append(downsample_by_two(out[-1]))
    out.reverse()
    return out


def _mask_pyramid(fixed: ScalarVolume, levels: int) -> list:
    """Foreground of the fixed image carried down the pyramid: threshold the
    downsampled float mask at 0.5, then dilate twice so the similarity
    window sees the object boundary."""
    base = foreground_mask(fixed)
    vols = build_pyramid(ScalarVolume(fixed.geometry, base.data.astype(np.float64)), levels)
    structure = six_neighborhood_structure()
    out = []
    for vol in vols:
        m = vol.data > 0.5
        if not m.any():
            m = vol.data > 0.0
        if not m.any():
            m = np.ones(vol.data.shape, dtype=bool)
        m = ndimage.binary_dilation(m, structure=structure, iterations=2)
        out.append(MaskVolume(vol.geometry, m))
    return out


def _level_features(img: ScalarVolume, mask: MaskVolume, space: str) -> np.ndarray:
    if space == "mind":
        return mind_transform(img).data
    return (img.data * mask.data)[..., None]


_LEVEL_MATRIX_CACHE: dict = {}


def _level_matrices(level_shape: tuple, factor: int, spacing: int, full_shape: tuple):
    """Basis weight matrices evaluating a full-resolution stage at a level's
    voxel positions (level voxel i sits at full-resolution coordinate
    factor * i)."""
    key = (tuple(level_shape), int(factor), int(spacing), tuple(full_shape))
    if key not in _LEVEL_MATRIX_CACHE:
        nc = control_grid_shape(full_shape, spacing)
        _LEVEL_MATRIX_CACHE[key] = tuple(
            core.bspline_weight_matrix(
                np.arange(n, dtype=np.float64) * factor, spacing, c
            )
            for n, c in zip(level_shape, nc)
        )
    return _LEVEL_MATRIX_CACHE[key]


@dataclass
class _PairState:
    """Per-pair mutable optimization state for one level."""

    obj: PairObjective
    tensors_base: tuple
    prefix: object
    mats: tuple
    factor: int
    bound: float
    raw: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    warm: object = None
    fwd: object = None
    raw_t: object = None


def _floats(d: dict) -> dict:
    return {k: float(v.detach()) for k, v in d.items()}


def _joint_step(states, weights_now, gc_weight, gc_mask_t, step_index, config):
    """One Adam step over all live stages; returns per-pair report pieces.

    The group-consistency term is a single shared value on the cycle of all
    forward fields; it enters the optimized total once but is recorded in
    every pair's report.
    """
    for st in states:
        raw_t = core.field_to_tensor(st.raw).requires_grad_(True)
        live = core.bspline_dense(core.tanh_clamp(raw_t, st.bound), st.mats)
        if st.factor != 1:
            live = live / st.factor
        st.raw_t = raw_t
        st.fwd = live if st.prefix is None else core.compose_displacements(st.prefix, live)
    gc_val = None
    if gc_weight > 0.0 and len(states) > 1:
        cycle = [st.fwd for st in reversed(states)]
        gc_val = core.cycle_residual(cycle, gc_mask_t)
    total_graph = None
    pieces = []
    for st in states:
        st.obj.weights = weights_now
        tensors = st.tensors_base + ((), st.warm)
        total, terms, weighted, directions, bwd = _pair_total(st.obj, tensors, st.fwd, 1.0)
        st.warm = bwd
        terms_f = _floats(terms)
        weighted_f = _floats(weighted)
        if gc_val is not None:
            terms_f["group_consistency"] = float(gc_val.detach())
            weighted_f["group_consistency"] = gc_weight * terms_f["group_consistency"]
        pieces.append((terms_f, weighted_f, directions))
        total_graph = total if total_graph is None else total_graph + total
    if gc_val is not None:
        total_graph = total_graph + gc_weight * gc_val
    grads = torch.autograd.grad(total_graph, [st.raw_t for st in states])
    t = step_index + 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    for st, g in zip(states, grads):
        gn = core.tensor_to_field(g)
        st.adam_m = b1 * st.adam_m + (1.0 - b1) * gn
        st.adam_v = b2 * st.adam_v + (1.0 - b2) * gn * gn
        m_hat = st.adam_m / (1.0 - b1 ** t)
        v_hat = st.adam_v / (1.0 - b2 ** t)
        st.raw = st.raw - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_epsilon)
    return pieces


def _make_report(terms_f, weighted_f, directions, n_stages) -> LossReport:
    total = sum(weighted_f.values())
    return LossReport(
        total=total,
        terms=terms_f,
        weighted=weighted_f,
        stage_totals=tuple(total if i == n_stages - 1 else 0.0 for i in range(n_stages)),
        forward=directions["forward"],
        backward=directions["backward"],
    )


def _progress_key(report: LossReport) -> float:
    # the always-on portion of the objective; comparable across the final
    # phase weight switch
    return report.weighted["similarity"] + report.weighted["diffusion"]


def _run(pair_images, config, initial_raw_scale, joint_cycle):
    geometry = pair_images[0][0].geometry
    for fixed, moving in pair_images:
        if fixed.geometry != geometry or moving.geometry != geometry:
            raise ValueError("all images must share one geometry")
        for img in (fixed, moving):
            if float(img.data.max() - img.data.min()) == 0.0:
                raise ValueError("degenerate images: constant intensities")
    rng = np.random.default_rng(config.seed)
    full_shape = tuple(geometry.shape)
    schedule = config.control_spacing_schedule

    pyramid_cache: dict = {}

    def pyramid(vol):
        if id(vol) not in pyramid_cache:
            pyramid_cache[id(vol)] = build_pyramid(vol, config.levels)
        return pyramid_cache[id(vol)]

    mask_cache: dict = {}

    def fixed_masks(vol):
        if id(vol) not in mask_cache:
            mask_cache[id(vol)] = _mask_pyramid(vol, config.levels)
        return mask_cache[id(vol)]

    feature_cache: dict = {}

    def features(level_vol, level_mask):
        key = (id(level_vol), id(level_mask))
        if key not in feature_cache:
            feature_cache[key] = _level_features(level_vol, level_mask, config.similarity_space)
        return feature_cache[key]

    base_weights = replace(config.weights, ndv=0.0, group_consistency=0.0)
    final_weights = replace(config.weights, group_consistency=0.0)
    gc_weight = config.weights.group_consistency if joint_cycle else 0.0

    n_pairs = len(pair_images)
    stacks = [[] for _ in range(n_pairs)]
    histories = [[] for _ in range(n_pairs)]
    flags = [[] for _ in range(n_pairs)]
    spans = []
    it_counter = 0

    for level in range(config.levels):
        spacing = schedule[level]
        factor = 2 ** (config.levels - 1 - level)
        bound = BOUND_FACTOR * spacing
        nc = control_grid_shape(full_shape, spacing)
        states = []
        level_masks = []
        for p, (fixed, moving) in enumerate(pair_images):
            fixed_l = pyramid(fixed)[level]
            moving_l = pyramid(moving)[level]
            mask_l = fixed_masks(fixed)[level]
            level_masks.append(mask_l)
            obj = PairObjective(
                geometry=fixed_l.geometry,
                fixed_features=features(fixed_l, mask_l),
                moving_features=features(moving_l, mask_l),
                mask=mask_l,
                weights=base_weights,
            )
            fixed_t, moving_t, mask_t, _, _ = _objective_tensors(obj)
            level_shape = tuple(fixed_l.geometry.shape)
            mats = _level_matrices(level_shape, factor, spacing, full_shape)
            prefix = None
            with torch.no_grad():
                for stage in stacks[p]:
                    st_mats = _level_matrices(level_shape, factor, stage.control_spacing, full_shape)
                    dense = core.bspline_dense(core.field_to_tensor(stage.coefficients), st_mats)
                    if factor != 1:
                        dense = dense / factor
                    prefix = dense if prefix is None else core.compose_displacements(prefix, dense)
            raw = np.zeros(nc + (3,))
            if level == 0 and initial_raw_scale > 0.0:
                raw = rng.uniform(-initial_raw_scale, initial_raw_scale, size=nc + (3,))
            states.append(_PairState(
                obj=obj,
                tensors_base=(fixed_t, moving_t, mask_t),
                prefix=prefix,
                mats=mats,
                factor=factor,
                bound=bound,
                raw=raw,
                adam_m=np.zeros(nc + (3,)),
                adam_v=np.zeros(nc + (3,)),
            ))
        gc_mask_t = None
        if joint_cycle:
            union = np.logical_or.reduce([m.data for m in level_masks])
            gc_mask_t = core.to_tensor(union.astype(np.float64))
        level_start = it_counter
        for it in range(config.iterations_per_level):
            in_final_phase = (
                level == config.levels - 1
                and it >= config.iterations_per_level - config.final_phase_iterations
            )
            w_now = final_weights if in_final_phase else base_weights
            gcw = gc_weight if in_final_phase else 0.0
            pieces = _joint_step(states, w_now, gcw, gc_mask_t, it, config)
            for p, (terms_f, weighted_f, directions) in enumerate(pieces):
                histories[p].append(_make_report(terms_f, weighted_f, directions, level + 1))
            it_counter += 1
        spans.append((level_start, it_counter))
        for p, st in enumerate(states):
            stacks[p].append(clamp_coefficients(st.raw, geometry, spacing))
            start, end = histories[p][level_start], histories[p][-1]
            flags[p].append(bool(_progress_key(end) <= _progress_key(start)))

    results = []
    for p in range(n_pairs):
        stack = StageStack(tuple(stacks[p]))
        backward_stack, forward_total, backward_total = dense_fields_from_stack(stack)
        results.append(RegistrationResult(
            forward_stack=stack,
            backward_stack=backward_stack,
            forward_total=forward_total,
            backward_total=backward_total,
            loss_history=histories[p],
            converged_flags=tuple(flags[p]),
            level_spans=tuple(spans),
        ))
    return results


def dense_fields_from_stack(stack: StageStack):
    """(backward_stack, forward_total, backward_total) for a spline stack.

    Per-stage Newton inverses in reversed stage order, their composition as a
    warm start, then a Newton polish against the full forward field. The
    computation is deterministic, so results serialized as coefficients alone
    can rebuild bitwise-identical dense fields on load.
    """
    geometry = stack.stages[0].geometry
    forward_total = stack_to_dense(stack)
    with torch.no_grad():
        inverses = []
        for stage in reversed(stack.stages):
            dense = core.field_to_tensor(bspline_to_dense(stage).data)
            inverses.append(core.invert_displacement_newton(dense, tol=1e-9, max_iter=200))
        warm = None
        for inv in inverses:
            warm = inv if warm is None else core.compose_displacements(warm, inv)
        fwd_t = core.field_to_tensor(forward_total.data)
        bwd_t = core.invert_displacement_newton(fwd_t, tol=1e-9, max_iter=200, v0=warm)
    backward_stack = tuple(
        VectorField(geometry, core.tensor_to_field(inv)) for inv in inverses
    )
    return backward_stack, forward_total, VectorField(geometry, core.tensor_to_field(bwd_t))


def register_pair(
    fixed: ScalarVolume,
    moving: ScalarVolume,
    config: RegistrationConfig | None = None,
    initial_raw_scale: float = 0.0,
) -> RegistrationResult:
    """Register ``moving`` onto ``fixed``.

    ``initial_raw_scale`` perturbs the first level's raw coefficients with a
    seeded uniform draw of that half-width (in voxels); the default 0 keeps
    the contract's zero initialization. Ensembling uses it for diversity.
    """
    config = config if config is not None else RegistrationConfig()
    return _run([(fixed, moving)], config, initial_raw_scale, joint_cycle=False)[0]


def register_triplet(
    a: ScalarVolume,
    b: ScalarVolume,
    c: ScalarVolume,
    config: RegistrationConfig | None = None,
) -> tuple:
    """Jointly optimize the pairwise registrations a→b, b→c, c→a.

    During the finest level's final phase the cycle composition of the three
    forward fields is penalized toward identity with the configured
    group-consistency weight; with that weight at 0 the three results are
    exactly what three independent pair runs produce.
    """
    config = config if config is not None else RegistrationConfig()
    return tuple(_run([(b, a), (c, b), (a, c)], config, 0.0, joint_cycle=True))
