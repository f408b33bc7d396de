"""Weight-space ensembling of registrations.

Several seeded runs of the same pair are averaged stage by stage on their
B-spline coefficients. The coefficient constraint set is a box, so the
elementwise mean of member coefficients stays inside the box and the averaged
stages keep the positive-Jacobian guarantee. That is the reason to average in
weight space at all: averaging dense displacement fields has no such
guarantee.

Averaging acts on the clamped coefficients, which are the quantities that
define the deformations. Member diversity comes from a seeded uniform
perturbation of the first level's initial coefficients; member 0 always
starts from zero.
"""

from dataclasses import dataclass, replace

import numpy as np

from .bspline import BOUND_FACTOR, BSplineField, StageStack
from .engine import (
    RegistrationConfig,
    RegistrationResult,
    _level_features,
    _mask_pyramid,
    dense_fields_from_stack,
    register_pair,
)
from .grids import ScalarVolume
from .losses import PairObjective, loss_value


@dataclass(frozen=True)
class EnsembleConfig:
    """Membership and seeding of one ensemble.

    ``perturbation_scale`` is the half-width, in voxels, of the uniform draw
    applied to each non-zero member's initial raw coefficients. ``None``
    resolves to 0.1 times the coarsest stage's displacement bound, the only
    stage that exists when the perturbation is applied.
    """

    members: int = 5
    seed_base: int = 0
    perturbation_scale: float | None = None

    def __post_init__(self):
        if self.members < 1:
            raise ValueError("members must be >= 1")
        if self.perturbation_scale is not None and self.perturbation_scale < 0:
            raise ValueError("perturbation_scale must be >= 0")


def _resolved_scale(ens: EnsembleConfig, reg: RegistrationConfig) -> float:
    if ens.perturbation_scale is not None:
        return float(ens.perturbation_scale)
    return 0.1 * BOUND_FACTOR * reg.control_spacing_schedule[0]


def run_ensemble(
    fixed: ScalarVolume,
    moving: ScalarVolume,
    reg_config: RegistrationConfig | None = None,
    ens_config: EnsembleConfig | None = None,
) -> list:
    """Run ``members`` seeded registrations of one pair, ordered by member.

    Member i runs with seed ``seed_base + i``. Member 0 initializes at zero;
    every other member perturbs its first-level initialization to create
    diversity.
    """
    reg = reg_config if reg_config is not None else RegistrationConfig()
    ens = ens_config if ens_config is not None else EnsembleConfig()
    scale = _resolved_scale(ens, reg)
    out = []
    for i in range(ens.members):
        cfg = replace(reg, seed=ens.seed_base + i)
        out.append(register_pair(fixed, moving, cfg, initial_raw_scale=0.0 if i == 0 else scale))
    return out


def _check_members(results) -> None:
    if len(results) == 0:
        raise ValueError("cannot average an empty result list")
    first = results[0]
    geometry = first.forward_total.geometry
    n = len(first.forward_stack.stages)
    for r in results[1:]:
        if r.forward_total.geometry != geometry:
            raise ValueError("member results cover different image domains")
        if len(r.forward_stack.stages) != n:
            raise ValueError("member results have different stage counts")
        for a, b in zip(first.forward_stack.stages, r.forward_stack.stages):
            if a.control_spacing != b.control_spacing:
                raise ValueError("member results have different control spacings")


def _mean_coefficients(arrays) -> np.ndarray:
    # first member plus the mean of differences: averaging identical members
    # is then exact, and c with -c cancels to exactly zero
    base = arrays[0]
    acc = np.zeros_like(base)
    for a in arrays[1:]:
        acc += a - base
    return base + acc / len(arrays)


def _final_report(stack, fixed, moving, config):
    mask = _mask_pyramid(fixed, 1)[0]
    obj = PairObjective(
        geometry=fixed.geometry,
        fixed_features=_level_features(fixed, mask, config.similarity_space),
        moving_features=_level_features(moving, mask, config.similarity_space),
        mask=mask,
        weights=replace(config.weights, group_consistency=0.0),
    )
    last = len(stack.stages) - 1
    st = stack.stages[last]
    ratio = np.clip(st.coefficients / st.bound, -1 + 1e-15, 1 - 1e-15)
    return loss_value(obj, stack, last, st.bound * np.arctanh(ratio))


def ensemble_average(
    results,
    fixed: ScalarVolume | None = None,
    moving: ScalarVolume | None = None,
    config: RegistrationConfig | None = None,
) -> RegistrationResult:
    """Average member registrations stage by stage in coefficient space.

    The backward direction is rebuilt from the averaged stages the same way
    a registration builds it, so the returned result satisfies the usual
    inverse-consistency contract. When the pair images are provided the
    result's ``loss_history`` holds one final evaluation of every loss term
    under the averaged deformation (similarity needs the images); without
    them the history is empty. Summation runs in member-index order, making
    the average deterministic and permutation-sensitive only at the
    floating-point level.
    """
    _check_members(results)
    geometry = results[0].forward_total.geometry
    stages = []
    for s, proto in enumerate(results[0].forward_stack.stages):
        coeffs = _mean_coefficients([r.forward_stack.stages[s].coefficients for r in results])
        stages.append(BSplineField(geometry, proto.control_spacing, coeffs))
    stack = StageStack(tuple(stages))
    backward_stack, forward_total, backward_total = dense_fields_from_stack(stack)
    history = []
    if fixed is not None and moving is not None:
        cfg = config if config is not None else RegistrationConfig()
        history.append(_final_report(stack, fixed, moving, cfg))
    return RegistrationResult(
        forward_stack=stack,
        backward_stack=backward_stack,
        forward_total=forward_total,
        backward_total=backward_total,
        loss_history=history,
        converged_flags=(),
        level_spans=(),
    )
