"""Directory serialization for benchmark cases and registration results.

A case directory holds the six volumes as .nii files plus ``case.json`` with
landmarks, generator parameters, and the file listing. A result directory
holds ``result.json`` recording the stage structure (control spacing, bound,
coefficients) as plain JSON, the loss history as JSON lines, and float32
.nii copies of the total forward/backward fields for use with external
viewers.

Coefficients are the authoritative content of a result: JSON serializes
float64 exactly, and the dense fields (per-stage inverses and both totals)
are rebuilt deterministically on load, so a round trip reproduces every
array bitwise. The .nii field copies are derived artifacts at float32
precision and are never read back by this module.

All JSON is written with sorted keys and a trailing newline, so writing the
same value twice produces byte-identical files.
"""

import dataclasses
import json
import os

import numpy as np

from .bspline import BSplineField, StageStack
from .engine import RegistrationConfig, RegistrationResult, dense_fields_from_stack
from .grids import GridGeometry, LabelVolume, MaskVolume, VectorField
from .losses import LossReport, LossWeights
from .metrics import LandmarkSet
from .nifti import read_volume, write_volume
from .synth import BenchCase, PhantomSpec

CASE_FORMAT = "mindreg-case/1"
RESULT_FORMAT = "mindreg-result/1"

CASE_VOLUMES = (
    ("fixed", "fixed.nii"),
    ("moving", "moving.nii"),
    ("gt_field", "gt_field.nii"),
    ("labels_fixed", "labels_fixed.nii"),
    ("labels_moving", "labels_moving.nii"),
    ("mask", "mask.nii"),
)
CASE_LANDMARKS = (
    ("landmarks_fixed", "landmarks_fixed.json"),
    ("landmarks_moving", "landmarks_moving.json"),
)


def _dump_json(obj, path) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _load_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def landmarks_to_dict(landmarks: LandmarkSet) -> dict:
    return {
        "identifiers": list(landmarks.identifiers),
        "points": [list(p) for p in landmarks.points],
    }


def landmarks_from_dict(data) -> LandmarkSet:
    if not isinstance(data, dict) or not {"identifiers", "points"} <= set(data):
        raise ValueError("landmarks need 'identifiers' and 'points' entries")
    return LandmarkSet(data["points"], data["identifiers"])


def write_landmarks(landmarks: LandmarkSet, path) -> None:
    _dump_json(landmarks_to_dict(landmarks), path)


def read_landmarks(path) -> LandmarkSet:
    return landmarks_from_dict(_load_json(path))


def spec_to_dict(spec: PhantomSpec) -> dict:
    contrast = spec.contrast
    if isinstance(contrast, tuple):
        contrast = list(contrast)
    return {
        "shape": list(spec.shape),
        "blob_count": spec.blob_count,
        "seed": spec.seed,
        "deformation_max": spec.deformation_max,
        "contrast": contrast,
    }


def spec_from_dict(data) -> PhantomSpec:
    if not isinstance(data, dict):
        raise ValueError("phantom spec must be a JSON object")
    known = {f.name for f in dataclasses.fields(PhantomSpec)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown phantom spec keys: {sorted(unknown)}")
    kwargs = dict(data)
    if "shape" in kwargs:
        kwargs["shape"] = tuple(kwargs["shape"])
    if isinstance(kwargs.get("contrast"), list):
        kwargs["contrast"] = tuple(kwargs["contrast"])
    return PhantomSpec(**kwargs)


def _geometry_to_dict(geometry: GridGeometry) -> dict:
    return {
        "shape": list(geometry.shape),
        "spacing": list(geometry.spacing),
        "origin": list(geometry.origin),
    }


def _geometry_from_dict(data) -> GridGeometry:
    return GridGeometry(tuple(data["shape"]), tuple(data["spacing"]), tuple(data["origin"]))


def write_case(case: BenchCase, out_dir, spec: PhantomSpec | None = None) -> None:
    """Write a case directory; ``spec`` records how it was generated.

    Landmarks go into standalone JSON files (listed in the manifest like the
    volumes) so the directory feeds the metrics command without unpacking.
    """
    os.makedirs(out_dir, exist_ok=True)
    for attr, name in CASE_VOLUMES:
        write_volume(getattr(case, attr), os.path.join(out_dir, name))
    for attr, name in CASE_LANDMARKS:
        write_landmarks(getattr(case, attr), os.path.join(out_dir, name))
    manifest = {
        "format": CASE_FORMAT,
        "files": {attr: name for attr, name in CASE_VOLUMES + CASE_LANDMARKS},
        "spec": None if spec is None else spec_to_dict(spec),
    }
    _dump_json(manifest, os.path.join(out_dir, "case.json"))


def read_case(path):
    """Read a case directory. Returns (BenchCase, PhantomSpec or None)."""
    manifest = _load_json(os.path.join(path, "case.json"))
    if manifest.get("format") != CASE_FORMAT:
        raise ValueError(f"{path} is not a case directory (format mismatch)")
    volumes = {}
    for attr, default_name in CASE_VOLUMES:
        name = manifest["files"].get(attr, default_name)
        volumes[attr] = read_volume(os.path.join(path, name))
    if not isinstance(volumes["gt_field"], VectorField):
        raise ValueError("gt_field file does not hold a displacement field")
    for attr in ("labels_fixed", "labels_moving", "mask"):
        if not isinstance(volumes[attr], LabelVolume):
            raise ValueError(f"{attr} file does not hold integer labels")
    landmarks = {}
    for attr, default_name in CASE_LANDMARKS:
        name = manifest["files"].get(attr, default_name)
        landmarks[attr] = read_landmarks(os.path.join(path, name))
    mask = volumes.pop("mask")
    case = BenchCase(
        mask=MaskVolume(mask.geometry, mask.data != 0),
        **volumes,
        **landmarks,
    )
    spec = manifest.get("spec")
    return case, (None if spec is None else spec_from_dict(spec))


def _report_to_dict(report: LossReport) -> dict:
    return {
        "total": report.total,
        "terms": report.terms,
        "weighted": report.weighted,
        "stage_totals": list(report.stage_totals),
        "forward": report.forward,
        "backward": report.backward,
    }


def _report_from_dict(data) -> LossReport:
    return LossReport(
        total=data["total"],
        terms=data["terms"],
        weighted=data["weighted"],
        stage_totals=tuple(data["stage_totals"]),
        forward=data["forward"],
        backward=data["backward"],
    )


def write_result(result: RegistrationResult, out_dir) -> None:
    """Write a result directory (stage coefficients, history, field copies)."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "format": RESULT_FORMAT,
        "geometry": _geometry_to_dict(result.forward_total.geometry),
        "stages": [
            {
                "control_spacing": stage.control_spacing,
                "bound": stage.bound,
                "coefficients": stage.coefficients.tolist(),
            }
            for stage in result.forward_stack.stages
        ],
        "converged_flags": list(result.converged_flags),
        "level_spans": [list(span) for span in result.level_spans],
        "history_file": "history.jsonl",
        "field_files": {"forward": "forward.nii", "backward": "backward.nii"},
    }
    _dump_json(manifest, os.path.join(out_dir, "result.json"))
    with open(os.path.join(out_dir, "history.jsonl"), "w", encoding="utf-8") as fh:
        for report in result.loss_history:
            fh.write(json.dumps(_report_to_dict(report), sort_keys=True) + "\n")
    write_volume(result.forward_total, os.path.join(out_dir, "forward.nii"))
    write_volume(result.backward_total, os.path.join(out_dir, "backward.nii"))


def read_result(path) -> RegistrationResult:
    """Read a result directory written by write_result.

    The dense fields are rebuilt from the stored coefficients, which
    reproduces the originals bitwise (same deterministic construction).
    """
    manifest = _load_json(os.path.join(path, "result.json"))
    if manifest.get("format") != RESULT_FORMAT:
        raise ValueError(f"{path} is not a result directory (format mismatch)")
    geometry = _geometry_from_dict(manifest["geometry"])
    stages = tuple(
        BSplineField(
            geometry,
            entry["control_spacing"],
            np.asarray(entry["coefficients"], dtype=np.float64),
            bound=entry["bound"],
        )
        for entry in manifest["stages"]
    )
    if not stages:
        raise ValueError("result holds no stages")
    stack = StageStack(stages)
    backward_stack, forward_total, backward_total = dense_fields_from_stack(stack)
    history = []
    history_path = os.path.join(path, manifest.get("history_file", "history.jsonl"))
    if os.path.exists(history_path):
        with open(history_path, "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    history.append(_report_from_dict(json.loads(line)))
    return RegistrationResult(
        forward_stack=stack,
        backward_stack=backward_stack,
        forward_total=forward_total,
        backward_total=backward_total,
        loss_history=history,
        converged_flags=tuple(bool(f) for f in manifest["converged_flags"]),
        level_spans=tuple(tuple(span) for span in manifest["level_spans"]),
    )


def read_config(path) -> RegistrationConfig:
    """Build a RegistrationConfig from a JSON file of keyword overrides."""
    raw = _load_json(path)
    if not isinstance(raw, dict):
        raise ValueError("config file must hold a JSON object")
    known = {f.name for f in dataclasses.fields(RegistrationConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kwargs = dict(raw)
    if "control_spacing_schedule" in kwargs:
        kwargs["control_spacing_schedule"] = tuple(kwargs["control_spacing_schedule"])
    if "weights" in kwargs:
        weight_fields = {f.name for f in dataclasses.fields(LossWeights)}
        bad = set(kwargs["weights"]) - weight_fields
        if bad:
            raise ValueError(f"unknown weight keys: {sorted(bad)}")
        kwargs["weights"] = LossWeights(**kwargs["weights"])
    return RegistrationConfig(**kwargs)
