"""Round trips and determinism for case/result directory serialization."""

import json

import numpy as np
import pytest

from mindreg.caseio import (
    read_case,
    read_config,
    read_landmarks,
    read_result,
    spec_from_dict,
    spec_to_dict,
    write_case,
    write_landmarks,
    write_result,
)
from mindreg.engine import RegistrationConfig, register_pair
from mindreg.metrics import LandmarkSet
from mindreg.nifti import write_volume
from mindreg.synth import PhantomSpec, make_case


@pytest.fixture(scope="module")
def case_and_spec():
    spec = PhantomSpec(shape=(24, 24, 24), blob_count=4, seed=3, deformation_max=2.0)
    return make_case(spec), spec


@pytest.fixture(scope="module")
def small_result(case_and_spec):
    case, _ = case_and_spec
    config = RegistrationConfig(
        levels=2,
        iterations_per_level=8,
        final_phase_iterations=3,
        control_spacing_schedule=(8, 4),
        seed=0,
    )
    return register_pair(case.fixed, case.moving, config)


class TestCaseDirectory:
    def test_round_trip(self, tmp_path, case_and_spec):
        case, spec = case_and_spec
        out = tmp_path / "case"
        write_case(case, out, spec)
        back, spec_back = read_case(out)
        assert spec_back == spec
        assert np.array_equal(back.labels_fixed.data, case.labels_fixed.data)
        assert np.array_equal(back.labels_moving.data, case.labels_moving.data)
        assert np.array_equal(back.mask.data, case.mask.data)
        assert back.landmarks_fixed == case.landmarks_fixed
        assert back.landmarks_moving == case.landmarks_moving
        # images and field come back at the float32 precision of the files
        for attr in ("fixed", "moving", "gt_field"):
            stored = getattr(case, attr).data.astype(np.float32).astype(np.float64)
            assert np.array_equal(getattr(back, attr).data, stored)

    def test_write_is_deterministic(self, tmp_path, case_and_spec):
        case, spec = case_and_spec
        write_case(case, tmp_path / "a", spec)
        write_case(case, tmp_path / "b", spec)
        for name in ("case.json", "fixed.nii", "moving.nii", "gt_field.nii",
                     "labels_fixed.nii", "labels_moving.nii", "mask.nii",
                     "landmarks_fixed.json", "landmarks_moving.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_spec_optional(self, tmp_path, case_and_spec):
        case, _ = case_and_spec
        write_case(case, tmp_path / "case")
        _, spec_back = read_case(tmp_path / "case")
        assert spec_back is None

    def test_format_mismatch(self, tmp_path):
        (tmp_path / "case.json").write_text(json.dumps({"format": "other"}))
        with pytest.raises(ValueError, match="format"):
            read_case(tmp_path)

    def test_missing_volume(self, tmp_path, case_and_spec):
        case, spec = case_and_spec
        out = tmp_path / "case"
        write_case(case, out, spec)
        (out / "moving.nii").unlink()
        with pytest.raises(FileNotFoundError):
            read_case(out)

    def test_wrong_field_type(self, tmp_path, case_and_spec):
        case, spec = case_and_spec
        out = tmp_path / "case"
        write_case(case, out, spec)
        write_volume(case.fixed, out / "gt_field.nii")
        with pytest.raises(ValueError, match="displacement field"):
            read_case(out)


class TestResultDirectory:
    def test_round_trip_bitwise(self, tmp_path, small_result):
        out = tmp_path / "res"
        write_result(small_result, out)
        back = read_result(out)
        for a, b in zip(small_result.forward_stack.stages, back.forward_stack.stages):
            assert np.array_equal(a.coefficients, b.coefficients)
            assert a.control_spacing == b.control_spacing
            assert a.bound == b.bound
            assert a.geometry == b.geometry
        assert np.array_equal(small_result.forward_total.data, back.forward_total.data)
        assert np.array_equal(small_result.backward_total.data, back.backward_total.data)
        for a, b in zip(small_result.backward_stack, back.backward_stack):
            assert np.array_equal(a.data, b.data)
        assert back.converged_flags == small_result.converged_flags
        assert back.level_spans == small_result.level_spans

    def test_history_survives(self, tmp_path, small_result):
        out = tmp_path / "res"
        write_result(small_result, out)
        back = read_result(out)
        assert len(back.loss_history) == len(small_result.loss_history)
        for a, b in zip(small_result.loss_history, back.loss_history):
            assert a.total == b.total
            assert a.terms == b.terms
            assert a.weighted == b.weighted
            assert a.stage_totals == b.stage_totals
            assert a.forward == b.forward
            assert a.backward == b.backward

    def test_write_is_deterministic(self, tmp_path, small_result):
        write_result(small_result, tmp_path / "a")
        write_result(small_result, tmp_path / "b")
        for name in ("result.json", "history.jsonl", "forward.nii", "backward.nii"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_format_mismatch(self, tmp_path):
        (tmp_path / "result.json").write_text(json.dumps({"format": "other"}))
        with pytest.raises(ValueError, match="format"):
            read_result(tmp_path)

    def test_no_stages(self, tmp_path):
        manifest = {
            "format": "mindreg-result/1",
            "geometry": {"shape": [8, 8, 8], "spacing": [1, 1, 1], "origin": [0, 0, 0]},
            "stages": [],
            "converged_flags": [],
            "level_spans": [],
        }
        (tmp_path / "result.json").write_text(json.dumps(manifest))
        with pytest.raises(ValueError, match="no stages"):
            read_result(tmp_path)


class TestLandmarkFiles:
    def test_round_trip(self, tmp_path):
        lms = LandmarkSet([(1.0, 2.5, 3.0), (4.0, 5.0, 6.25)], ["a", "b"])
        write_landmarks(lms, tmp_path / "lm.json")
        assert read_landmarks(tmp_path / "lm.json") == lms

    def test_missing_keys(self, tmp_path):
        (tmp_path / "lm.json").write_text(json.dumps({"points": [[1, 2, 3]]}))
        with pytest.raises(ValueError, match="identifiers"):
            read_landmarks(tmp_path / "lm.json")


class TestSpecDict:
    def test_tuple_contrast_round_trip(self):
        spec = PhantomSpec(shape=(16, 16, 16), seed=5, contrast=("gamma", 0.8))
        assert spec_from_dict(spec_to_dict(spec)) == spec

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            spec_from_dict({"seed": 1, "volume": [2, 2, 2]})


class TestConfigFiles:
    def test_defaults_when_empty(self, tmp_path):
        (tmp_path / "cfg.json").write_text("{}")
        assert read_config(tmp_path / "cfg.json") == RegistrationConfig()

    def test_overrides(self, tmp_path):
        payload = {
            "levels": 2,
            "control_spacing_schedule": [8, 4],
            "weights": {"ndv": 500.0},
            "similarity_space": "raw_intensity",
            "seed": 9,
        }
        (tmp_path / "cfg.json").write_text(json.dumps(payload))
        cfg = read_config(tmp_path / "cfg.json")
        assert cfg.levels == 2
        assert cfg.control_spacing_schedule == (8, 4)
        assert cfg.weights.ndv == 500.0
        assert cfg.weights.group_consistency == 0.0
        assert cfg.similarity_space == "raw_intensity"
        assert cfg.seed == 9

    def test_unknown_config_key(self, tmp_path):
        (tmp_path / "cfg.json").write_text(json.dumps({"step_size": 0.1}))
        with pytest.raises(ValueError, match="unknown config keys"):
            read_config(tmp_path / "cfg.json")

    def test_unknown_weight_key(self, tmp_path):
        (tmp_path / "cfg.json").write_text(json.dumps({"weights": {"fold": 1.0}}))
        with pytest.raises(ValueError, match="unknown weight keys"):
            read_config(tmp_path / "cfg.json")

    def test_non_object(self, tmp_path):
        (tmp_path / "cfg.json").write_text("[1, 2]")
        with pytest.raises(ValueError, match="JSON object"):
            read_config(tmp_path / "cfg.json")
