"""Region boxes: mapping into scans, cropping, and inference from examples.

Boxes live in atlas millimetres. A box is carried into a scan by the inverse
of the scan's registration transform; since that transform is an axis-aligned
scaling plus translation on the orientation-normalised grid, mapped boxes stay
axis-aligned and cropping never interpolates image values.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
from scipy import ndimage

from .errors import AtlasCropError, EmptyCropError, EmptyRegionError, InvalidArgumentError, OutsideFieldOfViewError
from .model import BoundingBox, Heatmap, LabelVolume, RegionDefinition
from .registration import register
from .volume import apply_orientation, crop, warp_axis_aligned

log = logging.getLogger(__name__)

REGION_SCHEMA_VERSION = 1
DEFAULT_MARGIN_MM = 10.0

# heatmap thresholds used for the shipped region files
DEFAULT_THRESHOLDS = {
    "spine": 0.03,
    "brain": 0.01,
    "lungs": 0.04,
    "heart": 0.03,
    "spleen": 0.01,
    "kidneys": 0.01,
    "urinary bladder": 0.01,
    "colon": 0.03,
    "gallbladder": 0.01,
    "pancreas": 0.01,
    "stomach": 0.01,
    "liver": 0.035,
}


# --- box mapping ----------------------------------------------------------------


@dataclass(frozen=True)
class VoxelBox:
    """Inclusive index ranges of a mapped box, after clipping to the grid."""

    lo: tuple
    hi: tuple
    unclipped_lo: tuple
    unclipped_hi: tuple
    clipped_fraction: tuple  # per axis, share of the mapped index range outside the grid

    @property
    def ranges(self):
        """Half-open ``((x0, x1), (y0, y1), (z0, z1))`` ranges for :func:`crop`."""
        return tuple((a, b + 1) for a, b in zip(self.lo, self.hi))

    @property
    def n_voxels(self):
        return int(np.prod([b - a + 1 for a, b in zip(self.lo, self.hi)]))

    def to_dict(self):
        return {
            "index_min": list(self.lo),
            "index_max": list(self.hi),
            "unclipped_index_min": list(self.unclipped_lo),
            "unclipped_index_max": list(self.unclipped_hi),
            "clipped_fraction": list(self.clipped_fraction),
        }


def box_to_scan_mm(bb, transform):
    """Atlas box to the orientation-normalised scan frame: ``(bb - t) / s``."""
    a, b = transform.inverse(bb.min_mm), transform.inverse(bb.max_mm)
    return BoundingBox(np.minimum(a, b), np.maximum(a, b))


def box_to_atlas_mm(bb, transform):
    a, b = transform.forward(bb.min_mm), transform.forward(bb.max_mm)
    return BoundingBox(np.minimum(a, b), np.maximum(a, b))


def orient_box(bb, orientation, center_mm):
    """Carry a box through an orientation acting about ``center_mm``."""
    corners = np.array([[x, y, z] for x in (bb.min_mm[0], bb.max_mm[0]) for y in (bb.min_mm[1], bb.max_mm[1]) for z in (bb.min_mm[2], bb.max_mm[2])])
    mapped = orientation.map_points(corners, center_mm)
    return BoundingBox(mapped.min(axis=0), mapped.max(axis=0))


def map_box_to_voxels(bb, transform, target):
    """Map an atlas box onto the voxel grid of the orientation-normalised scan.

    Corners go through ``(bb - t) / s``; the lower index is floored and the
    upper one ceiled, so the inclusive ranges cover the mapped box. Ranges are
    clipped to the grid; a box with no voxel inside raises
    :class:`OutsideFieldOfViewError`.
    """
    mm = box_to_scan_mm(bb, transform)
    u_lo = (mm.min_mm - target.origin_mm) / target.spacing_mm
    u_hi = (mm.max_mm - target.origin_mm) / target.spacing_mm
    lo = np.floor(np.round(u_lo, 9)).astype(np.int64)
    hi = np.ceil(np.round(u_hi, 9)).astype(np.int64)
    dims = np.asarray(target.dims)
    c_lo, c_hi = np.maximum(lo, 0), np.minimum(hi, dims - 1)
    if np.any(c_hi < c_lo):
        raise OutsideFieldOfViewError(
            f"box {mm.min_mm.round(1).tolist()}..{mm.max_mm.round(1).tolist()} mm lies outside the scan grid {tuple(dims)}"
        )
    n = hi - lo + 1
    frac = 1.0 - (c_hi - c_lo + 1) / n
    return VoxelBox(
        tuple(int(v) for v in c_lo), tuple(int(v) for v in c_hi),
        tuple(int(v) for v in lo), tuple(int(v) for v in hi),
        tuple(float(f) for f in frac),
    )


# --- cropping -----------------------------------------------------------------------


@dataclass
class CropReport:
    transform: object
    boxes: list  # one dict per region box: status plus index ranges / clip fractions
    timings: dict = field(default_factory=dict)
    registration: object = None

    def to_dict(self):
        from .registration import transform_to_dict

        return {
            "transform": transform_to_dict(self.transform, self.registration),
            "boxes": self.boxes,
            "timings": self.timings,
        }


def _check_shared_geometry(image, seg):
    tol = 0.5 * np.maximum(image.spacing_mm, seg.spacing_mm)
    if np.any(np.abs(image.center_mm - seg.center_mm) > tol) or np.any(np.abs(image.extent_mm - seg.extent_mm) > 2 * tol):
        raise InvalidArgumentError(
            "image and segmentation must cover the same physical extent "
            f"(centres {image.center_mm.round(2).tolist()} vs {seg.center_mm.round(2).tolist()})"
        )


def crop_boxes(image, transform, region):
    """Orient ``image`` and cut one sub-volume per region box.

    Returns ``(crops, entries)``; boxes outside the field of view or empty
    after clipping yield ``None`` and an explanatory report entry.
    """
    oriented = apply_orientation(image, transform.orientation)
    crops, entries = [], []
    for k, bb in enumerate(region.boxes):
        entry = {"box": k, **bb.to_dict()}
        try:
            vb = map_box_to_voxels(bb, transform, oriented)
            crops.append(crop(oriented, vb.ranges))
            entry.update(status="ok", **vb.to_dict())
        except OutsideFieldOfViewError as exc:
            crops.append(None)
            entry.update(status="outside_fov", message=str(exc))
        except EmptyCropError as exc:
            crops.append(None)
            entry.update(status="empty", message=str(exc))
        entries.append(entry)
    return crops, entries


def crop_region(image, seg_moving, atlas, region, registration=None):
    """Register ``seg_moving``, orient ``image`` and crop every box of ``region``.

    Returns ``(crops, report)``; ``crops[k]`` is ``None`` for a box that falls
    outside the scan. If every box is outside, raises
    :class:`OutsideFieldOfViewError`.
    """
    t0 = time.perf_counter()
    _check_shared_geometry(image, seg_moving)
    reg = registration or register(seg_moving, atlas)
    t1 = time.perf_counter()
    crops, entries = crop_boxes(image, reg.transform, region)
    t2 = time.perf_counter()
    if all(c is None for c in crops):
        raise OutsideFieldOfViewError(f"no box of region {region.name!r} intersects the scan")
    report = CropReport(
        transform=reg.transform,
        boxes=entries,
        timings={"register": t1 - t0, "crop": t2 - t1, "total": t2 - t0},
        registration=reg.report,
    )
    return crops, report


# --- heatmaps and box inference ------------------------------------------------


def warp_roi_to_atlas(roi, transform, grid):
    """Binary ROI (unoriented scan frame) trilinearly resampled onto ``grid``."""
    oriented = apply_orientation(roi, transform.orientation)
    mask = oriented.voxels > 0
    return np.clip(warp_axis_aligned(mask, oriented, grid, transform.scale, transform.translation_mm), 0.0, 1.0)


def accumulate_heatmap(h, roi, transform):
    """Add one warped ROI to the running mean ``h``."""
    warped = warp_roi_to_atlas(roi, transform, h)
    n = h.count
    values = np.clip((h.values * n + warped) / (n + 1), 0.0, 1.0)
    return Heatmap(values, h.spacing_mm, h.origin_mm, n + 1)


def _index_boxes_touch(a, b):
    # indicator sets are 6-connected: ranges intersect on every axis, or on
    # all but one axis where they are directly adjacent
    gaps = [max(a[0][ax], b[0][ax]) - min(a[1][ax], b[1][ax]) for ax in range(3)]
    return all(g <= 0 for g in gaps) or (sum(g == 1 for g in gaps) == 1 and all(g <= 1 for g in gaps))


def _merge_to_fixpoint(items, touching, hull):
    items = sorted(items)
    while True:
        for i in range(len(items)):
            hit = next((j for j in range(i + 1, len(items)) if touching(items[i], items[j])), None)
            if hit is not None:
                merged = hull(items[i], items[hit])
                items = sorted(items[:i] + items[i + 1 : hit] + items[hit + 1 :] + [merged])
                break
        else:
            return items


def component_index_boxes(mask):
    """Tight inclusive index boxes of the 6-connected components of ``mask``,
    merged (in lexicographic order) until no two overlap or share a face.
    """
    labels, n = ndimage.label(mask, structure=ndimage.generate_binary_structure(3, 1))
    boxes = [
        (tuple(s.start for s in sl), tuple(s.stop - 1 for s in sl))
        for sl in ndimage.find_objects(labels)
        if sl is not None
    ]
    hull = lambda a, b: (tuple(map(min, a[0], b[0])), tuple(map(max, a[1], b[1])))
    return _merge_to_fixpoint(boxes, _index_boxes_touch, hull)


def index_box_to_mm(box, grid):
    """Voxel-extent box: node positions widened by half a voxel on each face."""
    lo, hi = box
    half = grid.spacing_mm / 2.0
    return BoundingBox(grid.index_to_mm(lo) - half, grid.index_to_mm(hi) + half)


def _clip_box(bb, lo, hi):
    a, b = np.maximum(bb.min_mm, lo), np.minimum(bb.max_mm, hi)
    return BoundingBox(a, b) if np.all(a < b) else None


def merge_overlapping(boxes):
    """Hull-merge boxes with positive-volume overlap until none remain."""
    keyed = [(tuple(b.min_mm), tuple(b.max_mm)) for b in boxes]
    hull = lambda a, b: (tuple(map(min, a[0], b[0])), tuple(map(max, a[1], b[1])))
    touching = lambda a, b: BoundingBox(*a).overlaps(BoundingBox(*b))
    return [BoundingBox(lo, hi) for lo, hi in _merge_to_fixpoint(keyed, touching, hull)]


def finalize_boxes(core_boxes, margin_mm, grid):
    """Inflate by ``margin_mm``, clip to the grid extent and merge again."""
    lo, hi = grid.bounds_mm
    out = []
    for bb in core_boxes:
        inflated = BoundingBox(bb.min_mm - margin_mm, bb.max_mm + margin_mm) if margin_mm else bb
        clipped = _clip_box(inflated, lo, hi)
        if clipped is not None:
            out.append(clipped)
    return merge_overlapping(out)


def heatmap_core_boxes(h, threshold):
    """Merged voxel-extent boxes of ``h > threshold`` before any margin."""
    if threshold < 0:
        raise InvalidArgumentError("threshold must be >= 0")
    mask = h.values > threshold
    if not mask.any():
        raise EmptyRegionError(f"no heatmap voxel exceeds threshold {threshold}")
    return [index_box_to_mm(b, h) for b in component_index_boxes(mask)]


def boxes_from_heatmap(h, threshold, margin_mm=DEFAULT_MARGIN_MM, name="region"):
    """Threshold the heatmap and turn its components into a region definition."""
    core = heatmap_core_boxes(h, threshold)
    boxes = finalize_boxes(core, margin_mm, h)
    if not boxes:
        raise EmptyRegionError("all boxes vanished after clipping")
    return RegionDefinition(name, tuple(boxes), threshold, margin_mm, h.count)


def boxes_indicator(boxes, grid):
    """Atlas-grid mask of nodes strictly inside any of the boxes."""
    out = np.zeros(grid.dims, dtype=bool)
    axes = [grid.origin_mm[a] + grid.spacing_mm[a] * np.arange(grid.dims[a]) for a in range(3)]
    for bb in boxes:
        sel = [(axes[a] > bb.min_mm[a]) & (axes[a] < bb.max_mm[a]) for a in range(3)]
        out |= sel[0][:, None, None] & sel[1][None, :, None] & sel[2][None, None, :]
    return out


def fit_margin_to_volume(core_boxes, target_volume_mm3, grid, tol_mm=1e-4):
    """Margin (mm, may be negative) whose finalized boxes reach the given total volume.

    Used to compare regions inferred from cohorts of different size at
    equal box volume.
    """
    def vol(m):
        boxes = finalize_boxes(_shrink_ok(core_boxes, m), m, grid)
        return sum(b.volume_mm3 for b in boxes)

    lo = -0.5 * min(float(np.min(b.max_mm - b.min_mm)) for b in core_boxes) + 1e-6
    hi = float(np.max(grid.extent_mm))
    if vol(hi) < target_volume_mm3:
        return hi
    if vol(lo) > target_volume_mm3:
        return lo
    while hi - lo > tol_mm:
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if vol(mid) < target_volume_mm3 else (lo, mid)
    return hi


def fixed_volume_boxes(core_boxes, target_volume_mm3, grid):
    """Finalized boxes at the margin found by :func:`fit_margin_to_volume`; returns ``(boxes, margin)``."""
    m = fit_margin_to_volume(core_boxes, target_volume_mm3, grid)
    return finalize_boxes(_shrink_ok(core_boxes, m), m, grid), m


def _shrink_ok(core_boxes, m):
    # with a negative margin, drop boxes that would turn inside out
    return [b for b in core_boxes if np.all(b.max_mm - b.min_mm + 2 * m > 0)] if m < 0 else core_boxes


@dataclass
class InferenceResult:
    region: RegionDefinition
    heatmap: Heatmap
    transforms: list
    failures: list  # (pair index, message)


def infer_region_report(pairs, atlas, name, threshold=None, margin_mm=DEFAULT_MARGIN_MM, jobs=1):
    """Register every (segmentation, ROI) pair, average the warped ROIs and extract boxes."""
    if threshold is None:
        threshold = DEFAULT_THRESHOLDS.get(name, 0.0)
    pairs = list(pairs)
    if not pairs:
        raise InvalidArgumentError("infer_region needs at least one (segmentation, ROI) pair")

    def one(pair):
        try:
            return register(pair[0], atlas).transform, None
        except AtlasCropError as exc:
            return None, f"{type(exc).__name__}: {exc}"

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, pairs))
    else:
        results = [one(p) for p in pairs]

    # sequential accumulation in pair order keeps the mean bit-stable
    h = Heatmap.empty_like(atlas)
    transforms, failures = [], []
    for k, ((seg, roi), (tf, err)) in enumerate(zip(pairs, results)):
        if err is not None:
            failures.append((k, err))
            log.warning("pair %d skipped: %s", k, err)
            transforms.append(None)
            continue
        h = accumulate_heatmap(h, roi, tf)
        transforms.append(tf)
    if h.count == 0:
        raise EmptyRegionError(f"all {len(pairs)} pairs failed: {failures}")
    region = boxes_from_heatmap(h, threshold, margin_mm, name)
    return InferenceResult(region, h, transforms, failures)


def infer_region(pairs, atlas, name, threshold=None, margin_mm=DEFAULT_MARGIN_MM, jobs=1):
    return infer_region_report(pairs, atlas, name, threshold, margin_mm, jobs).region


# --- region files ---------------------------------------------------------------


def region_to_dict(region):
    return {
        "schema_version": REGION_SCHEMA_VERSION,
        "name": region.name,
        "boxes": [b.to_dict() for b in region.boxes],
        "threshold": region.threshold,
        "margin_mm": region.margin_mm,
        "n_examples": region.n_examples,
    }


def region_from_dict(d):
    if d.get("schema_version") != REGION_SCHEMA_VERSION:
        raise InvalidArgumentError(f"unsupported region schema_version {d.get('schema_version')!r}")
    return RegionDefinition(
        d["name"], tuple(BoundingBox.from_dict(b) for b in d["boxes"]),
        d.get("threshold", 0.0), d.get("margin_mm", DEFAULT_MARGIN_MM), d.get("n_examples"),
    )


def save_region(region, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(region_to_dict(region), fh, indent=2)


def load_region(path):
    with open(path, encoding="utf-8") as fh:
        return region_from_dict(json.load(fh))


def region_filename(name):
    return name.replace(" ", "_") + ".json"


def default_region(name):
    """One of the shipped region definitions (boxes in the phantom atlas frame)."""
    if name not in DEFAULT_THRESHOLDS:
        raise InvalidArgumentError(f"no shipped region {name!r}; choose from {sorted(DEFAULT_THRESHOLDS)}")
    ref = resources.files("atlascrop") / "data" / "regions" / region_filename(name)
    return region_from_dict(json.loads(ref.read_text(encoding="utf-8")))


def roi_volume(mask, like):
    """Wrap a boolean mask as a single-class label volume on ``like``'s grid."""
    return LabelVolume(np.asarray(mask, dtype=np.uint8), like.spacing_mm, like.origin_mm, 1)
