"""Ensemble tests: member seeding, weight-space averaging, bound convexity."""

import numpy as np
import pytest

from mindreg.bspline import (
    StageStack,
    clamp_coefficients,
    invert_fixed_point,
    non_diffeomorphic_volume,
    stack_to_dense,
)
from mindreg.engine import RegistrationConfig, RegistrationResult, register_pair
from mindreg.ensemble import EnsembleConfig, ensemble_average, run_ensemble
from mindreg.grids import GridGeometry, ScalarVolume

from test_engine import blob_image, small_config


def stage_result(geom, raw, spacing=8):
    """RegistrationResult wrapping a single handmade stage."""
    stack = StageStack((clamp_coefficients(raw, geom, spacing),))
    fwd = stack_to_dense(stack)
    bwd = invert_fixed_point(fwd, tol=1e-9, max_iter=200)
    return RegistrationResult(
        forward_stack=stack,
        backward_stack=(bwd,),
        forward_total=fwd,
        backward_total=bwd,
        loss_history=[],
        converged_flags=(),
        level_spans=(),
    )


class TestEnsembleConfig:
    def test_defaults(self):
        cfg = EnsembleConfig()
        assert cfg.members == 5
        assert cfg.perturbation_scale is None

    def test_rejects_zero_members(self):
        with pytest.raises(ValueError, match="members"):
            EnsembleConfig(members=0)

    def test_rejects_negative_scale(self):
        with pytest.raises(ValueError, match="perturbation_scale"):
            EnsembleConfig(perturbation_scale=-0.1)


class TestRunEnsemble:
    def test_single_member_equals_plain_run(self):
        from dataclasses import replace
        fixed, moving = blob_image(41, 16), blob_image(42, 16)
        reg = small_config(seed=0)
        members = run_ensemble(fixed, moving, reg, EnsembleConfig(members=1, seed_base=3))
        assert len(members) == 1
        solo = register_pair(fixed, moving, replace(reg, seed=3))
        for sm, ss in zip(members[0].forward_stack.stages, solo.forward_stack.stages):
            assert np.array_equal(sm.coefficients, ss.coefficients)
        assert np.array_equal(members[0].forward_total.data, solo.forward_total.data)

    def test_repeat_runs_are_bitwise_identical(self):
        fixed, moving = blob_image(43, 16), blob_image(44, 16)
        ens = EnsembleConfig(members=3, seed_base=10)
        a = run_ensemble(fixed, moving, small_config(), ens)
        b = run_ensemble(fixed, moving, small_config(), ens)
        for ra, rb in zip(a, b):
            for sa, sb in zip(ra.forward_stack.stages, rb.forward_stack.stages):
                assert np.array_equal(sa.coefficients, sb.coefficients)

    def test_perturbation_creates_diversity(self):
        fixed, moving = blob_image(45, 16), blob_image(46, 16)
        members = run_ensemble(fixed, moving, small_config(), EnsembleConfig(members=5))
        finals = [r.forward_stack.stages[-1].coefficients for r in members]
        distinct = 1 + sum(not np.array_equal(finals[0], f) for f in finals[1:])
        assert distinct >= 2


class TestEnsembleAverage:
    def test_average_of_identical_results_is_exact(self):
        geom = GridGeometry((16, 16, 16))
        rng = np.random.default_rng(0)
        from mindreg.bspline import control_grid_shape
        raw = rng.normal(0.0, 1.0, control_grid_shape(geom.shape, 8) + (3,))
        r = stage_result(geom, raw)
        avg = ensemble_average([r, r, r])
        assert np.array_equal(avg.forward_stack.stages[0].coefficients,
                              r.forward_stack.stages[0].coefficients)

    def test_opposite_members_cancel_to_identity(self):
        geom = GridGeometry((16, 16, 16))
        rng = np.random.default_rng(1)
        from mindreg.bspline import control_grid_shape
        raw = rng.normal(0.0, 1.5, control_grid_shape(geom.shape, 8) + (3,))
        avg = ensemble_average([stage_result(geom, raw), stage_result(geom, -raw)])
        assert np.all(avg.forward_stack.stages[0].coefficients == 0.0)
        assert np.all(avg.forward_total.data == 0.0)

    def test_average_respects_bound_and_stays_diffeomorphic(self):
        fixed, moving = blob_image(47, 16), blob_image(48, 16)
        members = run_ensemble(fixed, moving, small_config(), EnsembleConfig(members=3))
        avg = ensemble_average(members)
        for stage in avg.forward_stack.stages:
            assert float(np.abs(stage.coefficients).max()) <= stage.bound
        assert non_diffeomorphic_volume(avg.forward_total) == 0.0

    def test_report_under_the_averaged_deformation(self):
        fixed, moving = blob_image(49, 16), blob_image(50, 16)
        members = run_ensemble(fixed, moving, small_config(), EnsembleConfig(members=2))
        avg = ensemble_average(members, fixed, moving, small_config())
        assert len(avg.loss_history) == 1
        report = avg.loss_history[0]
        assert {"similarity", "diffusion", "ndv"} <= set(report.terms)
        without = ensemble_average(members)
        assert without.loss_history == []
        assert np.array_equal(without.forward_total.data, avg.forward_total.data)

    def test_rejects_empty_and_mismatched_members(self):
        geom = GridGeometry((16, 16, 16))
        from mindreg.bspline import control_grid_shape
        raw8 = np.zeros(control_grid_shape(geom.shape, 8) + (3,))
        raw4 = np.zeros(control_grid_shape(geom.shape, 4) + (3,))
        with pytest.raises(ValueError, match="empty"):
            ensemble_average([])
        with pytest.raises(ValueError, match="control spacings"):
            ensemble_average([stage_result(geom, raw8, 8), stage_result(geom, raw4, 4)])
        two = RegistrationResult(
            forward_stack=StageStack((
                clamp_coefficients(raw8, geom, 8),
                clamp_coefficients(raw4, geom, 4),
            )),
            backward_stack=(stage_result(geom, raw8).backward_total,) * 2,
            forward_total=stage_result(geom, raw8).forward_total,
            backward_total=stage_result(geom, raw8).backward_total,
            loss_history=[],
            converged_flags=(),
            level_spans=(),
        )
        with pytest.raises(ValueError, match="stage counts"):
            ensemble_average([stage_result(geom, raw8), two])
