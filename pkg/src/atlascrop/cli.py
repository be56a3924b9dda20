"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 processing error. Every subcommand
writes a JSON report; set ``CTARR_LOG`` to error/warn/info/debug for logs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import io as vio
from .atlas import atlas_from_labels, build_atlas_report, load_atlas, save_atlas
from .errors import AtlasCropError
from .metrics import crop_metrics, dice_score, summarize_cases, table_rows
from .model import DEFAULT_SCHEMA, LabelSchema
from .phantom import CaseConfig, canonical_phantom, sample_case
from .regions import (
    DEFAULT_MARGIN_MM,
    DEFAULT_THRESHOLDS,
    crop_region,
    default_region,
    infer_region_report,
    load_region,
    map_box_to_voxels,
    region_to_dict,
    save_region,
)
from .registration import register, save_transform, transform_from_dict, transform_to_dict
from .volume import apply_orientation

log = logging.getLogger("atlascrop")

EXIT_OK, EXIT_USAGE, EXIT_PROCESSING = 0, 1, 2
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _write_json(path, obj):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _load_region_arg(value):
    if os.path.exists(value):
        return load_region(value)
    return default_region(value)


def _registration_report(reg):
    r = reg.report
    d = transform_to_dict(reg.transform, r)
    d.update(
        iterations=r.iterations,
        step_reductions=r.step_reductions,
        loss_trace=r.loss_trace,
        residuals={f"{k}{'f' if f else ''}": v for (k, f), v in r.residuals.items()},
        wall_time_s=r.wall_time_s,
        timings=r.timings,
    )
    return d


# --- subcommands ------------------------------------------------------------------


def cmd_register(args):
    atlas = load_atlas(args.atlas)
    seg = vio.read_label_volume(args.moving, num_classes=atlas.num_classes)
    reg = register(seg, atlas)
    save_transform(args.out, reg.transform, reg.report)
    if args.report:
        _write_json(args.report, _registration_report(reg))
    return {"transform": args.out}


def cmd_crop(args):
    atlas = load_atlas(args.atlas)
    region = _load_region_arg(args.region)
    image = vio.read_image_volume(args.image)
    seg = vio.read_label_volume(args.moving_seg, num_classes=atlas.num_classes)
    crops, report = crop_region(image, seg, atlas, region)
    os.makedirs(args.out_dir, exist_ok=True)
    ext = ".nii.gz" if args.format == "nifti" else ".vol"
    written = []
    for k, (c, entry) in enumerate(zip(crops, report.boxes)):
        if c is None:
            continue
        path = os.path.join(args.out_dir, f"crop_{k}{ext}")
        vio.write_volume(c, path, args.format)
        entry["path"] = path
        written.append(path)
    out = report.to_dict()
    out["region"] = region.name
    _write_json(os.path.join(args.out_dir, "report.json"), out)
    return {"crops": written}


def _read_list(path, key=None):
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if isinstance(data, dict) and key:
        data = data[key]
    base = os.path.dirname(os.path.abspath(path))
    return data, base


def _resolve(base, p):
    return p if os.path.isabs(p) else os.path.join(base, p)


def cmd_build_atlas(args):
    names = DEFAULT_SCHEMA.names
    if args.cohort:
        paths, base = _read_list(args.cohort, "scans")
        paths = [_resolve(base, p) for p in paths]
    else:
        paths = args.scans
    if not paths:
        raise UsageError("build-atlas: give --cohort or --scans")
    cohort = [vio.read_label_volume(p, num_classes=len(names)) for p in paths]
    built = build_atlas_report(cohort, LabelSchema(names), jobs=args.jobs)
    save_atlas(built.atlas, args.out)
    rep = built.report
    report = {
        "n_input": rep.n_input,
        "valid": [paths[i] for i in rep.valid],
        "rejected": [{"path": paths[r["index"]], "reason": r["reason"]} for r in rep.rejected],
        "reference": paths[rep.reference_index],
        "final_transforms": {paths[i]: transform_to_dict(tf) for i, tf in rep.final_transforms.items()},
        "timings": rep.timings,
    }
    _write_json(args.report or os.path.join(args.out, "build_report.json"), report)
    return {"atlas": args.out}


def cmd_infer_region(args):
    atlas = load_atlas(args.atlas)
    entries, base = _read_list(args.pairs, "pairs")
    pairs = []
    for e in entries:
        seg = vio.read_label_volume(_resolve(base, e["seg_path"]), num_classes=atlas.num_classes)
        roi = vio.read_label_volume(_resolve(base, e["roi_path"]), num_classes=1)
        pairs.append((seg, roi))
    threshold = args.threshold if args.threshold is not None else DEFAULT_THRESHOLDS.get(args.name, 0.0)
    res = infer_region_report(pairs, atlas, args.name, threshold, args.margin_mm, jobs=args.jobs)
    save_region(res.region, args.out)
    if args.report:
        _write_json(args.report, {
            "region": region_to_dict(res.region),
            "n_pairs": len(pairs),
            "failures": [{"pair": k, "error": m} for k, m in res.failures],
        })
    return {"region": args.out}


def cmd_phantom(args):
    cfg_kwargs = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            cfg_kwargs = json.load(fh)
        if "orientations" in cfg_kwargs:
            cfg_kwargs["orientations"] = tuple(tuple(o) for o in cfg_kwargs["orientations"])
        for key in ("scale_range", "fov_z_mm", "lesion_radius_mm"):
            if cfg_kwargs.get(key) is not None:
                cfg_kwargs[key] = tuple(cfg_kwargs[key])
    try:
        cfg = CaseConfig(**cfg_kwargs)
    except TypeError as exc:
        raise UsageError(f"phantom: bad config: {exc}") from None
    os.makedirs(args.out_dir, exist_ok=True)
    ext = ".nii.gz" if args.format == "nifti" else ".vol"
    outputs = {}
    if args.atlas_out:
        save_atlas(atlas_from_labels(canonical_phantom()), args.atlas_out)
        outputs["atlas"] = args.atlas_out
    for k in range(args.count):
        seed = args.seed + k
        case = sample_case(seed, cfg)
        stem = os.path.join(args.out_dir, f"case_{seed}")
        files = {"seg": stem + "_seg" + ext, "roi": stem + "_roi" + ext, "image": stem + "_image" + ext}
        vio.write_volume(case.seg, files["seg"], args.format)
        vio.write_volume(case.roi, files["roi"], args.format)
        vio.write_volume(case.image, files["image"], args.format)
        truth = transform_to_dict(case.truth)
        _write_json(stem + "_truth.json", {
            "seed": seed, "rng": case.rng, "truth": truth, "dropped_classes": list(case.dropped),
            "lesion_center_mm": case.lesion_center_mm, "lesion_radius_mm": case.lesion_radius_mm,
            "config": cfg.to_dict(), **{f"{key}_path": os.path.basename(v) for key, v in files.items()},
        })
        outputs[str(seed)] = files
    return outputs


def cmd_eval(args):
    atlas = load_atlas(args.atlas)
    seg = vio.read_label_volume(args.moving_seg, num_classes=atlas.num_classes)
    roi = vio.read_label_volume(args.roi, num_classes=1)
    t0 = time.perf_counter()
    if args.transform:
        with open(args.transform, encoding="utf-8") as fh:
            tf = transform_from_dict(json.load(fh))
    else:
        tf = register(seg, atlas).transform
    elapsed = time.perf_counter() - t0
    row = {"seconds_per_case": elapsed}
    oriented = apply_orientation(roi, tf.orientation)
    if args.region:
        region = _load_region_arg(args.region)
        ranges = []
        for bb in region.boxes:
            try:
                ranges.append(map_box_to_voxels(bb, tf, oriented).ranges)
            except AtlasCropError:
                pass
        row.update(crop_metrics(oriented.voxels > 0, ranges))
    if args.truth:
        with open(args.truth, encoding="utf-8") as fh:
            d = json.load(fh)
        truth = transform_from_dict(d.get("truth", d))
        row["orientation_correct"] = truth.orientation == tf.orientation
        row["scale_error"] = float(np.abs(tf.scale - truth.scale).max())
        row["translation_error_mm"] = float(np.abs(tf.translation_mm - truth.translation_mm).max())
    if args.reference_seg:
        ref = vio.read_label_volume(args.reference_seg, num_classes=atlas.num_classes)
        if ref.dims == roi.dims:
            row["dice_roi"] = dice_score(roi.voxels > 0, ref.voxels > 0)
    summary = summarize_cases([row])
    out = {"case": row, "rows": table_rows(summary, args.task)}
    _write_json(args.out, out)
    return out


# --- parser -------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="atlascrop", description="Atlas registration and anatomical region cropping for label volumes.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    r = sub.add_parser("register", help="register a label volume to an atlas")
    r.add_argument("--moving", required=True, help="label volume (native or NIfTI)")
    r.add_argument("--atlas", required=True, help="atlas directory")
    r.add_argument("--out", required=True, help="transform JSON")
    r.add_argument("--report", help="optional JSON with registration diagnostics")
    r.set_defaults(func=cmd_register)

    c = sub.add_parser("crop", help="crop an image to the boxes of a region")
    c.add_argument("--image", required=True)
    c.add_argument("--moving-seg", required=True)
    c.add_argument("--atlas", required=True)
    c.add_argument("--region", required=True, help="region JSON file or shipped region name")
    c.add_argument("--out-dir", required=True)
    c.add_argument("--format", choices=("nifti", "native"), default="nifti")
    c.set_defaults(func=cmd_crop)

    b = sub.add_parser("build-atlas", help="build an atlas from a cohort of label volumes")
    g = b.add_mutually_exclusive_group(required=True)
    g.add_argument("--cohort", help="JSON list of label volume paths (or {\"scans\": [...]})")
    g.add_argument("--scans", nargs="+")
    b.add_argument("--out", required=True, help="atlas directory")
    b.add_argument("--jobs", type=int, default=1)
    b.add_argument("--report")
    b.set_defaults(func=cmd_build_atlas)

    i = sub.add_parser("infer-region", help="compute region boxes from labelled examples")
    i.add_argument("--pairs", required=True, help="JSON list of {seg_path, roi_path}")
    i.add_argument("--atlas", required=True)
    i.add_argument("--name", required=True)
    i.add_argument("--threshold", type=float, help="heatmap threshold (default: shipped value for --name, else 0)")
    i.add_argument("--margin-mm", type=float, default=DEFAULT_MARGIN_MM)
    i.add_argument("--out", required=True)
    i.add_argument("--jobs", type=int, default=1)
    i.add_argument("--report")
    i.set_defaults(func=cmd_infer_region)

    ph = sub.add_parser("phantom", help="write synthetic cases with known transforms")
    ph.add_argument("--seed", type=int, default=0)
    ph.add_argument("--count", type=int, default=1)
    ph.add_argument("--config", help="JSON with CaseConfig fields")
    ph.add_argument("--out-dir", required=True)
    ph.add_argument("--atlas-out", help="also write the canonical phantom atlas here")
    ph.add_argument("--format", choices=("nifti", "native"), default="nifti")
    ph.set_defaults(func=cmd_phantom)

    e = sub.add_parser("eval", help="crop metrics and transform errors for one case")
    e.add_argument("--moving-seg", required=True)
    e.add_argument("--roi", required=True)
    e.add_argument("--atlas", required=True)
    e.add_argument("--region")
    e.add_argument("--transform", help="use this transform instead of registering")
    e.add_argument("--truth", help="phantom truth JSON")
    e.add_argument("--reference-seg")
    e.add_argument("--task", default="case")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)
    return p


def _configure_logging():
    level = LOG_LEVELS.get(os.environ.get("CTARR_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def dispatch(argv=None):
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    try:
        result = args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (AtlasCropError, OSError, ValueError, KeyError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_PROCESSING
    print(json.dumps({"status": "ok", "command": args.command, "outputs": result}, default=_json_default))
    return EXIT_OK


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
