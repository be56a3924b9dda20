"""Probabilistic atlas construction and persistence.

An atlas is built from a cohort of label maps by register-and-average:
every scan is registered to every other scan, moved by its mean pairwise
transform, and averaged into a provisional atlas; each scan is then
registered once more to that provisional atlas and averaged again.
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AtlasCropError,
    CohortTooSmallError,
    CorruptFileError,
    FileFormatError,
    MissingChannelError,
    TruncatedFileError,
    VersionMismatchError,
)
from .model import DEFAULT_SCHEMA, WORKING_SPACING_MM, AtlasSegmentation, DEFAULT_CLASS_NAMES, RestrictedAffine
from .registration import register
from .volume import apply_orientation, class_volumes, resample_labels, to_soft_masks, warp_axis_aligned

log = logging.getLogger(__name__)

ATLAS_SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"


def atlas_from_labels(vol, names=None, spacing_mm=None):
    """Atlas whose probabilities are the one-hot masks of a single label map."""
    if spacing_mm is not None:
        vol = resample_labels(vol, spacing_mm)
    names = tuple(names) if names is not None else DEFAULT_CLASS_NAMES[: vol.num_classes]
    return AtlasSegmentation(to_soft_masks(vol, np.float32), vol.spacing_mm, vol.origin_mm, names=names)


@dataclass
class CommonGrid:
    dims: tuple
    spacing_mm: np.ndarray
    origin_mm: np.ndarray


@dataclass
class AtlasBuildReport:
    n_input: int
    valid: list
    rejected: list  # dicts {index, reason}
    reference_index: int
    pairwise: dict = field(default_factory=dict)  # (i, j) -> RestrictedAffine of scan i onto scan j
    mean_transforms: dict = field(default_factory=dict)
    final_transforms: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)


@dataclass
class AtlasBuild:
    atlas: AtlasSegmentation
    provisional: AtlasSegmentation
    report: AtlasBuildReport


def _map(fn, items, jobs):
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _warp_average(scans, transforms, grid, n_classes):
    """Voxel-wise mean (dividing by the number of scans) of warped one-hot masks."""
    acc = np.zeros((n_classes,) + tuple(grid.dims))
    for vol, tf in zip(scans, transforms):
        oriented = apply_orientation(vol, tf.orientation)
        lab = oriented.voxels
        for c in range(1, n_classes + 1):
            mask = lab == c
            if mask.any():
                acc[c - 1] += warp_axis_aligned(mask, oriented, grid, tf.scale, tf.translation_mm)
    acc /= len(scans)
    return np.clip(acc, 0.0, 1.0).astype(np.float32)


def _foreground_center(vol):
    idx = np.argwhere(vol.voxels > 0)
    return vol.index_to_mm(idx.mean(axis=0))


def build_atlas_report(cohort, schema=DEFAULT_SCHEMA, jobs=1, spacing_mm=WORKING_SPACING_MM):
    """Build an atlas from a cohort of label maps; returns an :class:`AtlasBuild`.

    Scans missing a class, or whose pairwise registrations disagree with the
    identity orientation, are rejected and listed in the report.
    """
    t_start = time.perf_counter()
    names = tuple(schema.names)
    C = len(names)
    if len(cohort) < 2:
        raise CohortTooSmallError(len(cohort), [])
    scans, rejected = [], []
    for i, vol in enumerate(cohort):
        if vol.num_classes != C:
            rejected.append({"index": i, "reason": f"num_classes {vol.num_classes} != {C}"})
            continue
        missing = [names[c] for c in np.flatnonzero(class_volumes(vol) == 0)]
        if missing:
            rejected.append({"index": i, "reason": f"missing classes {missing}"})
            continue
        scans.append((i, resample_labels(vol, spacing_mm)))
    if len(scans) < 2:
        raise CohortTooSmallError(len(scans), rejected)

    # (1) pairwise registration; one target atlas in memory at a time
    pairwise = {}
    for j, target in scans:
        target_atlas = atlas_from_labels(target, names)
        movers = [(i, v) for i, v in scans if i != j]
        results = _map(lambda iv: register(iv[1], target_atlas).transform, movers, jobs)
        for (i, _), tf in zip(movers, results):
            pairwise[(i, j)] = tf
        del target_atlas

    # drop the scan involved in most non-identity pairs until all remaining pairs agree
    keep = {i for i, _ in scans}
    while True:
        counts = {i: 0 for i in keep}
        for (a, b), tf in pairwise.items():
            if a in keep and b in keep and not tf.orientation.is_identity:
                counts[a] += 1
                counts[b] += 1
        worst = max(sorted(counts), key=lambda i: counts[i])
        if counts[worst] == 0:
            break
        keep.discard(worst)
        rejected.append({"index": worst, "reason": f"{counts[worst]} pairwise registration(s) disagree on orientation"})

    valid, mean_tf = [], {}
    for i, vol in scans:
        if i not in keep:
            continue
        tfs = [tf for (a, b), tf in pairwise.items() if a == i and b in keep]
        s = np.mean([tf.scale for tf in tfs], axis=0)
        t = np.mean([tf.translation_mm for tf in tfs], axis=0)
        valid.append((i, vol))
        mean_tf[i] = RestrictedAffine(scale=s, translation_mm=t)
    if len(valid) < 2:
        raise CohortTooSmallError(len(valid), rejected)
    t_pair = time.perf_counter()

    # (2)+(3) provisional atlas on the grid of the scan with the longest z extent,
    # shifted so it sits over the averaged anatomy as it sat over its own
    ref_pos = int(np.argmax([v.extent_mm[2] for _, v in valid]))
    ref_index, ref = valid[ref_pos]
    centers = np.array([mean_tf[i].forward(_foreground_center(v)) for i, v in valid])
    shift = centers.mean(axis=0) - centers[ref_pos]
    if np.all(centers == centers[0]):
        shift = np.zeros(3)
    grid = CommonGrid(ref.dims, ref.spacing_mm, ref.origin_mm + shift)
    vols = [v for _, v in valid]
    provisional = AtlasSegmentation(
        _warp_average(vols, [mean_tf[i] for i, _ in valid], grid, C), grid.spacing_mm, grid.origin_mm, names=names
    )
    t_prov = time.perf_counter()

    # (4)+(5) register to the provisional atlas and average again
    final = _map(lambda v: register(v, provisional).transform, vols, jobs)
    atlas = AtlasSegmentation(_warp_average(vols, final, grid, C), grid.spacing_mm, grid.origin_mm, names=names)
    t_end = time.perf_counter()

    report = AtlasBuildReport(
        n_input=len(cohort),
        valid=[i for i, _ in valid],
        rejected=sorted(rejected, key=lambda r: r["index"]),
        reference_index=ref_index,
        pairwise=pairwise,
        mean_transforms=mean_tf,
        final_transforms={i: tf for (i, _), tf in zip(valid, final)},
        timings={"pairwise": t_pair - t_start, "provisional": t_prov - t_pair, "final": t_end - t_prov},
    )
    log.info("atlas built from %d of %d scans in %.1fs", len(valid), len(cohort), t_end - t_start)
    return AtlasBuild(atlas, provisional, report)


def build_atlas(cohort, schema=DEFAULT_SCHEMA, jobs=1):
    """Register-and-average atlas from a cohort of label maps."""
    return build_atlas_report(cohort, schema, jobs).atlas


def channel_filename(class_id, name):
    slug = re.sub(r"[^a-z0-9]+", "_", name.lower()).strip("_")
    return f"class_{class_id}_{slug}.f32"


def save_atlas(atlas, path):
    """Write ``manifest.json`` plus one little-endian float32 file per class (x fastest)."""
    os.makedirs(path, exist_ok=True)
    checksums = {}
    for c, name in enumerate(atlas.names, start=1):
        fname = channel_filename(c, name)
        payload = np.asarray(atlas.prob[c - 1], dtype="<f4").tobytes(order="F")
        with open(os.path.join(path, fname), "wb") as fh:
            fh.write(payload)
        checksums[fname] = zlib.crc32(payload)
    manifest = {
        "schema_version": ATLAS_SCHEMA_VERSION,
        "dims": list(atlas.dims),
        "spacing_mm": atlas.spacing_mm.tolist(),
        "origin_mm": atlas.origin_mm.tolist(),
        "classes": list(atlas.names),
        "landmarks_mm": atlas.landmarks_mm.tolist(),
        "class_volumes": atlas.class_volumes.tolist(),
        "checksums": checksums,
    }
    with open(os.path.join(path, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)


def load_atlas(path):
    mpath = os.path.join(path, MANIFEST_NAME)
    try:
        with open(mpath, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise FileFormatError(f"no atlas manifest at {mpath}") from None
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"{mpath}: {exc}") from None
    version = manifest.get("schema_version")
    if version != ATLAS_SCHEMA_VERSION:
        raise VersionMismatchError(f"{mpath}: schema_version {version!r}, expected {ATLAS_SCHEMA_VERSION}")
    try:
        dims = tuple(int(d) for d in manifest["dims"])
        names = tuple(manifest["classes"])
        checksums = manifest["checksums"]
        spacing, origin = manifest["spacing_mm"], manifest["origin_mm"]
    except KeyError as exc:
        raise CorruptFileError(f"{mpath}: missing field {exc}") from None

    n_bytes = 4 * int(np.prod(dims))
    prob = np.empty((len(names),) + dims, dtype=np.float32)
    for c, name in enumerate(names, start=1):
        fname = channel_filename(c, name)
        fpath = os.path.join(path, fname)
        try:
            with open(fpath, "rb") as fh:
                payload = fh.read()
        except FileNotFoundError:
            raise MissingChannelError(c, name, fpath) from None
        if len(payload) != n_bytes:
            raise TruncatedFileError(f"{fpath}: {len(payload)} bytes, expected {n_bytes}")
        expected = checksums.get(fname)
        if expected is None or zlib.crc32(payload) != int(expected):
            raise CorruptFileError(f"{fpath}: checksum mismatch")
        prob[c - 1] = np.frombuffer(payload, dtype="<f4").reshape(dims, order="F")
    try:
        return AtlasSegmentation(
            prob, spacing, origin, landmarks_mm=manifest.get("landmarks_mm"),
            class_volumes=manifest.get("class_volumes"), names=names,
        )
    except AtlasCropError as exc:
        raise CorruptFileError(f"{path}: {exc}") from None


def atlas_summary(atlas):
    """Plain-text per-class table: volume, landmark and axis projections' extents."""
    lines = [f"atlas {atlas.dims} @ {atlas.spacing_mm[0]:g} mm, origin {np.round(atlas.origin_mm, 3).tolist()}"]
    for c, name in enumerate(atlas.names, start=1):
        p = atlas.prob[c - 1]
        ext = []
        for ax in range(3):
            prof = p.sum(axis=tuple(a for a in range(3) if a != ax))
            nz = np.flatnonzero(prof)
            lo, hi = atlas.index_to_mm(np.full(3, nz[0]))[ax], atlas.index_to_mm(np.full(3, nz[-1]))[ax]
            ext.append(f"{lo:.0f}..{hi:.0f}")
        lm = atlas.landmarks_mm[c - 1]
        lines.append(
            f"{c:2d} {name:32s} vol {atlas.class_volumes[c - 1]:9.1f}  "
            f"lm ({lm[0]:7.1f},{lm[1]:7.1f},{lm[2]:7.1f})  x {ext[0]}  y {ext[1]}  z {ext[2]}"
        )
    return "\n".join(lines)

