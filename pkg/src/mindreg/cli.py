"""Command-line surface tying the library into a batch tool.

Exit codes: 0 success, 1 usage errors (bad flags or flag combinations),
2 data errors (unreadable, malformed, or inconsistent inputs), 3 numerical
failures (non-convergent inversion). All randomness flows from explicit
seed flags; nothing reads the clock, so equal invocations write
byte-identical outputs.
"""

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import replace

import numpy as np

from ._diffcore import InversionError
from .bspline import apply_warp, compose, invert_fixed_point, invert_newton
from .caseio import (
    read_config,
    read_landmarks,
    read_result,
    spec_from_dict,
    write_case,
    write_result,
)
from .engine import RegistrationConfig, register_pair
from .ensemble import EnsembleConfig, ensemble_average, run_ensemble
from .grids import LabelVolume, ScalarVolume, VectorField
from .metrics import dice, hd95, ndv_metric, tre, warp_labels
from .mind import MindParams, mind_transform
from .nifti import ChannelVolume, NiftiError, read_volume, write_volume
from .report import render_registration_report, write_metrics_csv
from .synth import make_case

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

SIMILARITY_CHOICES = {"mind": "mind", "raw": "raw_intensity"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on usage problems; the contract wants 1
    def error(self, message):
        raise UsageError(message)


def _load_scalar(path) -> ScalarVolume:
    vol = read_volume(path)
    if not isinstance(vol, ScalarVolume):
        raise ValueError(f"{path} does not hold a scalar image")
    return vol


def _load_field(path) -> VectorField:
    vol = read_volume(path)
    if not isinstance(vol, VectorField):
        raise ValueError(f"{path} does not hold a displacement field")
    return vol


def _load_labels(path) -> LabelVolume:
    vol = read_volume(path)
    if not isinstance(vol, LabelVolume):
        raise ValueError(f"{path} does not hold integer labels")
    return vol


def _parse_offsets(text: str) -> tuple:
    triples = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        comps = part.split(",")
        if len(comps) != 3:
            raise ValueError(f"offset {part!r} is not an integer triple")
        triples.append(tuple(int(c) for c in comps))
    if not triples:
        raise ValueError("at least one offset is required")
    return tuple(triples)


def _registration_config(args) -> RegistrationConfig:
    config = read_config(args.config) if args.config else RegistrationConfig()
    if getattr(args, "similarity", None):
        config = replace(config, similarity_space=SIMILARITY_CHOICES[args.similarity])
    if getattr(args, "seed", None) is not None:
        config = replace(config, seed=args.seed)
    return config


def cmd_mind(args) -> int:
    img = _load_scalar(args.image)
    params = MindParams(sigma=args.sigma) if args.offsets is None else MindParams(
        sigma=args.sigma, offsets=args.offsets
    )
    features = mind_transform(img, params)
    write_volume(ChannelVolume(features.geometry, features.data), args.out)
    print(f"wrote {features.data.shape[3]}-channel features to {args.out}")
    return EXIT_OK


def cmd_register(args) -> int:
    config = _registration_config(args)
    fixed = _load_scalar(args.fixed)
    moving = _load_scalar(args.moving)
    result = register_pair(fixed, moving, config)
    final_ndv = ndv_metric(result.forward_total)
    if args.out_field:
        write_volume(result.forward_total, args.out_field)
    if args.out_inverse:
        write_volume(result.backward_total, args.out_inverse)
    if args.out_result:
        write_result(result, args.out_result)
    if args.report_dir:
        rows = [
            ("final_loss", "", result.loss_history[-1].total),
            ("ndv", "", final_ndv),
        ]
        render_registration_report(
            args.report_dir,
            metrics_rows=rows,
            fixed=fixed,
            moving=moving,
            warped=apply_warp(moving, result.forward_total),
            field=result.forward_total,
            history=result.loss_history,
            level_spans=result.level_spans,
        )
    print(f"final loss: {result.loss_history[-1].total!r}")
    print(f"final NDV: {final_ndv!r}")
    return EXIT_OK


def _nearest_warp_scalar(img: ScalarVolume, field: VectorField) -> ScalarVolume:
    shape = img.geometry.shape
    coords = np.moveaxis(np.indices(shape, dtype=np.float64), 0, -1) + field.data
    nearest = tuple(
        np.clip(np.rint(coords[..., k]).astype(np.int64), 0, shape[k] - 1)
        for k in range(3)
    )
    return ScalarVolume(img.geometry, img.data[nearest])


def cmd_warp(args) -> int:
    field = _load_field(args.field)
    vol = read_volume(args.image)
    if isinstance(vol, LabelVolume):
        if args.interp != "nearest":
            raise ValueError("label volumes need --interp nearest")
        warped = warp_labels(vol, field)
    elif isinstance(vol, ScalarVolume):
        if args.interp == "nearest":
            warped = _nearest_warp_scalar(vol, field)
        else:
            warped = apply_warp(vol, field)
    else:
        raise ValueError(f"{args.image} does not hold a warpable volume")
    write_volume(warped, args.out)
    print(f"wrote warped volume to {args.out}")
    return EXIT_OK


def cmd_invert(args) -> int:
    field = _load_field(args.field)
    if args.method == "newton":
        inverse = invert_newton(field, tol=args.tol, max_iter=args.max_iter)
    else:
        inverse = invert_fixed_point(field, tol=args.tol, max_iter=args.max_iter)
    write_volume(inverse, args.out)
    print(f"wrote inverse field to {args.out}")
    return EXIT_OK


def cmd_compose(args) -> int:
    first = _load_field(args.first)
    second = _load_field(args.second)
    write_volume(compose(first, second), args.out)
    print(f"wrote composed field to {args.out}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    if (args.landmarks_a is None) != (args.landmarks_b is None):
        raise UsageError("--landmarks-a and --landmarks-b must be given together")
    labels_a = _load_labels(args.labels_a)
    labels_b = _load_labels(args.labels_b)
    field = _load_field(args.field) if args.field else None
    labels_eval = warp_labels(labels_b, field) if field is not None else labels_b

    per_label, mean_dice = dice(labels_a, labels_eval)
    rows = [("dice", "mean", mean_dice)]
    rows += [("dice", f"label_{k}", v) for k, v in sorted(per_label.items())]
    common = sorted(set(labels_a.labels()) & set(labels_eval.labels()))
    rows += [("hd95", f"label_{k}", hd95(labels_a, labels_eval, k)) for k in common]
    if args.landmarks_a is not None:
        lm_a = read_landmarks(args.landmarks_a)
        lm_b = read_landmarks(args.landmarks_b)
        u = field if field is not None else VectorField(
            labels_a.geometry, np.zeros(tuple(labels_a.geometry.shape) + (3,))
        )
        mean_tre, per_lm = tre(lm_a, lm_b, u)
        rows.append(("tre", "mean", mean_tre))
        rows += [("tre", ident, v) for ident, v in zip(lm_a.identifiers, per_lm)]
    rows.append(("ndv", "", ndv_metric(field) if field is not None else 0.0))

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric", "key", "value"])
    writer.writerows(rows)
    sys.stdout.write(buf.getvalue())
    if args.out:
        write_metrics_csv(rows, args.out)
    if args.report_dir:
        render_registration_report(args.report_dir, metrics_rows=rows, field=field)
    return EXIT_OK


def cmd_synth(args) -> int:
    with open(args.spec, "r", encoding="utf-8") as fh:
        spec = spec_from_dict(json.load(fh))
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    case = make_case(spec)
    write_case(case, args.out_dir, spec)
    print(f"wrote case to {args.out_dir}")
    return EXIT_OK


def cmd_ensemble(args) -> int:
    if args.average:
        if args.fixed or args.moving:
            raise UsageError("--average cannot be combined with --fixed/--moving")
        results = [read_result(path) for path in args.average]
        averaged = ensemble_average(results)
    else:
        if not (args.fixed and args.moving):
            raise UsageError("ensemble needs --fixed and --moving (or --average)")
        config = _registration_config(args)
        ens = EnsembleConfig(
            members=args.members,
            seed_base=args.seed_base,
            perturbation_scale=args.perturbation_scale,
        )
        fixed = _load_scalar(args.fixed)
        moving = _load_scalar(args.moving)
        results = run_ensemble(fixed, moving, config, ens)
        for i, member in enumerate(results):
            write_result(member, os.path.join(args.out, f"member_{i:02d}"))
        averaged = ensemble_average(results, fixed=fixed, moving=moving, config=config)
    target = args.out if args.average else os.path.join(args.out, "averaged")
    write_result(averaged, target)
    print(f"averaged {len(results)} members")
    print(f"averaged NDV: {ndv_metric(averaged.forward_total)!r}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="mindreg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mind", help="image -> multichannel feature volume")
    p.add_argument("--image", required=True, help="input scalar image (.nii)")
    p.add_argument("--out", required=True, help="output feature volume (.nii)")
    p.add_argument("--sigma", type=float, default=0.5,
                   help="patch Gaussian width in voxels (default 0.5)")
    p.add_argument("--offsets", type=_parse_offsets, default=None,
                   help="semicolon-separated integer triples, e.g. '1,0,0;0,1,0'"
                        " (default: the six axis neighbors)")
    p.set_defaults(handler=cmd_mind)

    p = sub.add_parser("register", help="register a moving image to a fixed image")
    p.add_argument("--fixed", required=True, help="fixed image (.nii)")
    p.add_argument("--moving", required=True, help="moving image (.nii)")
    p.add_argument("--config", help="JSON file of configuration overrides")
    p.add_argument("--out-field", help="write the forward displacement field here")
    p.add_argument("--out-inverse", help="write the backward displacement field here")
    p.add_argument("--out-result", help="write the full result directory here")
    p.add_argument("--report-dir", help="write figures and a metrics CSV here")
    p.add_argument("--similarity", choices=sorted(SIMILARITY_CHOICES), default=None,
                   help="similarity space: mind (default) or raw intensities")
    p.add_argument("--seed", type=int, default=None, help="optimizer seed (default 0)")
    p.set_defaults(handler=cmd_register)

    p = sub.add_parser("warp", help="apply a displacement field to a volume")
    p.add_argument("--image", required=True, help="scalar image or labels (.nii)")
    p.add_argument("--field", required=True, help="displacement field (.nii)")
    p.add_argument("--out", required=True, help="output volume (.nii)")
    p.add_argument("--interp", choices=("linear", "nearest"), default="linear",
                   help="interpolation (default linear; labels need nearest)")
    p.set_defaults(handler=cmd_warp)

    p = sub.add_parser("invert", help="invert a displacement field")
    p.add_argument("--field", required=True, help="displacement field (.nii)")
    p.add_argument("--out", required=True, help="output field (.nii)")
    p.add_argument("--method", choices=("newton", "picard"), default="newton",
                   help="inversion iteration (default newton)")
    p.add_argument("--tol", type=float, default=1e-9,
                   help="max-norm residual tolerance (default 1e-9)")
    p.add_argument("--max-iter", type=int, default=200,
                   help="iteration cap (default 200)")
    p.set_defaults(handler=cmd_invert)

    p = sub.add_parser("compose", help="compose two displacement fields")
    p.add_argument("--first", required=True, help="field applied first (.nii)")
    p.add_argument("--second", required=True, help="field applied second (.nii)")
    p.add_argument("--out", required=True, help="output field (.nii)")
    p.set_defaults(handler=cmd_compose)

    p = sub.add_parser("metrics", help="overlap, surface, and landmark metrics")
    p.add_argument("--labels-a", required=True, help="reference labels (.nii)")
    p.add_argument("--labels-b", required=True,
                   help="compared labels (.nii), warped by --field when given")
    p.add_argument("--field", help="displacement field (.nii)")
    p.add_argument("--landmarks-a", help="reference landmarks (.json)")
    p.add_argument("--landmarks-b", help="compared landmarks (.json)")
    p.add_argument("--out", help="also write the CSV to this path")
    p.add_argument("--report-dir", help="write figures and the CSV here")
    p.set_defaults(handler=cmd_metrics)

    p = sub.add_parser("synth", help="generate a synthetic benchmark case")
    p.add_argument("--spec", required=True, help="phantom spec (.json)")
    p.add_argument("--out-dir", required=True, help="case output directory")
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("ensemble", help="run seeded members and average them")
    p.add_argument("--fixed", help="fixed image (.nii)")
    p.add_argument("--moving", help="moving image (.nii)")
    p.add_argument("--members", type=int, default=5,
                   help="number of seeded members (default 5)")
    p.add_argument("--seed-base", type=int, default=0,
                   help="member i uses seed seed-base + i (default 0)")
    p.add_argument("--perturbation-scale", type=float, default=None,
                   help="half-width of the member init perturbation in voxels"
                        " (default: a tenth of the coarsest stage bound)")
    p.add_argument("--config", help="JSON file of configuration overrides")
    p.add_argument("--similarity", choices=sorted(SIMILARITY_CHOICES), default=None,
                   help="similarity space: mind (default) or raw intensities")
    p.add_argument("--average", nargs="+", metavar="RESULT_DIR",
                   help="average these existing result directories instead of running")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=cmd_ensemble)

    return parser


def run(argv) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.handler(args)


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    try:
        return run(argv)
    except SystemExit as exc:  # argparse --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InversionError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (NiftiError, OSError, json.JSONDecodeError, ValueError, TypeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
