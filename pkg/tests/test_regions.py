import itertools

import numpy as np
import pytest

from atlascrop.errors import EmptyRegionError, OutsideFieldOfViewError
from atlascrop.model import BoundingBox, Heatmap, ImageVolume, LabelVolume, RestrictedAffine, RestrictedOrientation
from atlascrop.phantom import CaseConfig, canonical_structure, sample_case
from atlascrop.regions import (
    DEFAULT_THRESHOLDS,
    accumulate_heatmap,
    box_to_atlas_mm,
    box_to_scan_mm,
    boxes_from_heatmap,
    boxes_indicator,
    component_index_boxes,
    crop_region,
    default_region,
    finalize_boxes,
    fit_margin_to_volume,
    heatmap_core_boxes,
    infer_region,
    infer_region_report,
    load_region,
    map_box_to_voxels,
    orient_box,
    roi_volume,
    save_region,
)
from atlascrop.model import RegionDefinition
from atlascrop.volume import apply_orientation


def grid(dims=(40, 40, 40), spacing=3.0, origin=(0, 0, 0)):
    return LabelVolume(np.zeros(dims, np.uint8), (spacing,) * 3, origin, 1)


def test_map_box_identity():
    vb = map_box_to_voxels(BoundingBox([30] * 3, [60] * 3), RestrictedAffine(), grid())
    assert vb.lo == (10, 10, 10) and vb.hi == (20, 20, 20)
    assert vb.ranges == ((10, 21),) * 3
    assert vb.clipped_fraction == (0.0, 0.0, 0.0)


def test_map_box_translation_and_scale():
    bb = BoundingBox([30] * 3, [60] * 3)
    mm = box_to_scan_mm(bb, RestrictedAffine(translation_mm=[10, -5, 0]))
    assert np.allclose(mm.min_mm, [20, 35, 30])
    mm = box_to_scan_mm(bb, RestrictedAffine(scale=[2, 2, 2]))
    assert np.allclose(mm.min_mm, [15] * 3) and np.allclose(mm.max_mm, [30] * 3)


def test_map_box_clipping_and_fov():
    g = grid((10, 10, 10))
    vb = map_box_to_voxels(BoundingBox([-15, 0, 0], [15, 9, 9]), RestrictedAffine(), g)
    assert vb.lo[0] == 0 and vb.unclipped_lo[0] == -5
    assert vb.clipped_fraction[0] == pytest.approx(5 / 11)
    with pytest.raises(OutsideFieldOfViewError):
        map_box_to_voxels(BoundingBox([100, 0, 0], [120, 9, 9]), RestrictedAffine(), g)


def test_box_round_trip(rng):
    center = np.array([3.0, -7.0, 12.0])
    for o in RestrictedOrientation.all():
        for _ in range(10):
            tf = RestrictedAffine(o, rng.uniform(0.8, 1.25, 3), rng.normal(size=3) * 50)
            lo = rng.normal(size=3) * 60
            bb = BoundingBox(lo, lo + rng.uniform(5, 80, 3))
            # scan frame -> orientation-normalised frame -> atlas and back
            oriented = orient_box(bb, o, center)
            back = orient_box(box_to_scan_mm(box_to_atlas_mm(oriented, tf), tf), o.inverse(), center)
            assert back.allclose(bb, atol=1e-9)


def test_crop_region_identity_liver(phantom, atlas):
    liver = phantom.voxels == 15
    idx = np.argwhere(liver)
    lo, hi = phantom.index_to_mm(idx.min(axis=0)), phantom.index_to_mm(idx.max(axis=0))
    region = RegionDefinition("liver", (BoundingBox(lo, hi),), 0.0, 0.0)
    image = ImageVolume(phantom.voxels.astype(np.float32), phantom.spacing_mm, phantom.origin_mm)
    crops, report = crop_region(image, phantom, atlas, region)
    assert report.boxes[0]["status"] == "ok"
    assert int((crops[0].data == 15).sum()) == int(liver.sum())
    assert set(report.timings) == {"register", "crop", "total"}


def test_crop_values_are_not_interpolated(atlas):
    case = sample_case(41)
    crops, report = crop_region(case.image, case.seg, atlas, default_region("liver"))
    oriented = apply_orientation(case.image, report.transform.orientation)
    e = report.boxes[0]
    sl = tuple(slice(a, b + 1) for a, b in zip(e["index_min"], e["index_max"]))
    assert np.array_equal(crops[0].data, oriented.data[sl])


def test_crop_outside_fov(atlas):
    chest = sample_case(42, CaseConfig(fov_z_mm=(-40.0, 60.0)))
    with pytest.raises(OutsideFieldOfViewError):
        crop_region(chest.image, chest.seg, atlas, default_region("urinary bladder"))


def test_partial_fov_skips_boxes(atlas):
    region = RegionDefinition("two", (BoundingBox([-30, -30, -20], [30, 30, 20]), BoundingBox([-30, -30, -190], [30, 30, -150])))
    chest = sample_case(43, CaseConfig(fov_z_mm=(-60.0, 60.0), orientations=((0, False),)))
    crops, report = crop_region(chest.image, chest.seg, atlas, region)
    assert crops[0] is not None and crops[1] is None
    assert report.boxes[1]["status"] == "outside_fov"


def _box_roi(g, lo, hi):
    arr = np.zeros(g.dims, np.uint8)
    arr[tuple(slice(a, b) for a, b in zip(lo, hi))] = 1
    return LabelVolume(arr, g.spacing_mm, g.origin_mm, 1)


def test_heatmap_examples():
    g = grid((20, 20, 20))
    h = Heatmap.empty_like(g)
    roi = _box_roi(g, (2, 3, 4), (8, 9, 10))
    h1 = accumulate_heatmap(h, roi, RestrictedAffine())
    assert np.array_equal(h1.values, roi.voxels.astype(float)) and h1.count == 1
    h2 = accumulate_heatmap(h1, _box_roi(g, (12, 12, 12), (16, 16, 16)), RestrictedAffine())
    assert h2.values.max() == 0.5 and h2.count == 2


def test_heatmap_stays_in_unit_interval(rng):
    g = grid((16, 16, 16))
    h = Heatmap.empty_like(g)
    for _ in range(5):
        lo = rng.integers(0, 8, 3)
        tf = RestrictedAffine(RestrictedOrientation(int(rng.integers(4)), bool(rng.integers(2))), rng.uniform(0.8, 1.25, 3), rng.normal(size=3) * 5)
        h = accumulate_heatmap(h, _box_roi(g, lo, lo + rng.integers(2, 8, 3)), tf)
    assert h.values.min() >= 0 and h.values.max() <= 1


def test_boxes_from_single_box_heatmap():
    g = grid((30, 30, 30))
    roi = _box_roi(g, (5, 6, 7), (10, 12, 14))
    h = accumulate_heatmap(Heatmap.empty_like(g), roi, RestrictedAffine())
    region = boxes_from_heatmap(h, 0.0, 10.0, "box")
    assert len(region.boxes) == 1
    # voxel-extent tight box widened by exactly 10 mm
    assert np.allclose(region.boxes[0].min_mm, np.array([5, 6, 7]) * 3 - 1.5 - 10)
    assert np.allclose(region.boxes[0].max_mm, np.array([9, 11, 13]) * 3 + 1.5 + 10)
    assert region.n_examples == 1 and region.threshold == 0.0


def test_overlapping_boxes_merge_to_hull():
    mask = np.zeros((30, 30, 30), bool)
    mask[0:10, 0, 0] = True
    mask[0, 0, 0:5] = True  # L-shape, box (0..9, 0, 0..4)
    mask[5:12, 0, 3] = True  # not 6-connected to the L, but its box overlaps
    mask[25:28, 25:28, 25:28] = True
    boxes = component_index_boxes(mask)
    assert boxes == [((0, 0, 0), (11, 0, 4)), ((25, 25, 25), (27, 27, 27))]


def test_face_adjacent_boxes_merge():
    mask = np.zeros((10, 10, 10), bool)
    mask[0:3, 0, 0] = True
    mask[0, 0:3, 0] = True  # box (0..2, 0..2, 0)
    mask[2:4, 3, 0] = True  # touches that box across the y=2|3 face only
    assert component_index_boxes(mask) == [((0, 0, 0), (3, 3, 0))]


def test_margin_merges_nearby_boxes():
    g = grid((40, 40, 40))
    mask = np.zeros(g.dims, bool)
    mask[5:10, 5:10, 5:10] = True
    mask[14:18, 5:10, 5:10] = True
    h = Heatmap(mask.astype(float), g.spacing_mm, g.origin_mm, 1)
    assert len(boxes_from_heatmap(h, 0.0, 0.0).boxes) == 2
    merged = boxes_from_heatmap(h, 0.0, 10.0)
    assert len(merged.boxes) == 1


def test_boxes_are_clipped_to_atlas_extent():
    g = grid((20, 20, 20))
    mask = np.zeros(g.dims, bool)
    mask[0:3, 0:3, 0:3] = True
    region = boxes_from_heatmap(Heatmap(mask.astype(float), g.spacing_mm, g.origin_mm, 1), 0.0, 10.0)
    lo, _ = g.bounds_mm
    assert np.allclose(region.boxes[0].min_mm, lo)


def test_empty_heatmap():
    g = grid((5, 5, 5))
    with pytest.raises(EmptyRegionError):
        boxes_from_heatmap(Heatmap.empty_like(g), 0.0)


def test_boxes_idempotent(rng):
    g = grid((30, 30, 30))
    for _ in range(10):
        mask = np.zeros(g.dims, bool)
        for _ in range(6):
            lo = rng.integers(0, 25, 3)
            mask[tuple(slice(a, a + b) for a, b in zip(lo, rng.integers(1, 6, 3)))] = True
        h = Heatmap(mask.astype(float), g.spacing_mm, g.origin_mm, 1)
        first = boxes_from_heatmap(h, 0.0, 0.0)
        for a, b in itertools.combinations(first.boxes, 2):
            assert not a.overlaps(b)
        again = boxes_from_heatmap(Heatmap(boxes_indicator(first.boxes, g).astype(float), g.spacing_mm, g.origin_mm, 1), 0.0, 0.0)
        assert len(again.boxes) == len(first.boxes)
        assert all(a.allclose(b) for a, b in zip(first.boxes, again.boxes))


def test_fit_margin_to_volume():
    g = grid((60, 60, 60))
    core = [BoundingBox([30, 30, 30], [60, 60, 60])]
    m = fit_margin_to_volume(core, 50.0**3, g)
    assert m == pytest.approx(10.0, abs=1e-3)
    m = fit_margin_to_volume(core, 20.0**3, g)
    assert m == pytest.approx(-5.0, abs=1e-3)


def test_infer_region_single_pair(phantom, atlas):
    roi = roi_volume(phantom.voxels == 16, phantom)
    region = infer_region([(phantom, roi)], atlas, "spleen", threshold=0.0, margin_mm=10.0)
    idx = np.argwhere(phantom.voxels == 16)
    lo = phantom.index_to_mm(idx.min(axis=0)) - 1.5 - 10
    hi = phantom.index_to_mm(idx.max(axis=0)) + 1.5 + 10
    assert len(region.boxes) == 1
    assert np.allclose(region.boxes[0].min_mm, lo) and np.allclose(region.boxes[0].max_mm, hi)
    assert region.n_examples == 1


def test_infer_region_training_coverage(atlas):
    cases = [sample_case(s, CaseConfig(lesion_structure="kidneys")) for s in (51, 52, 53)]
    res = infer_region_report([(c.seg, c.roi) for c in cases], atlas, "kidneys", threshold=0.0, margin_mm=0.0)
    for c, tf in zip(cases, res.transforms):
        roi = apply_orientation(c.roi, tf.orientation)
        keep = np.zeros(roi.dims, bool)
        for bb in res.region.boxes:
            vb = map_box_to_voxels(bb, tf, roi)
            keep[tuple(slice(a, b) for a, b in vb.ranges)] = True
        assert np.all(keep[roi.voxels > 0])


def test_infer_region_reports_failures(atlas, phantom):
    bad = LabelVolume(np.zeros((5, 5, 5), np.uint8), (3, 3, 3))
    roi = roi_volume(phantom.voxels == 16, phantom)
    res = infer_region_report([(bad, roi_volume(np.zeros((5, 5, 5)), bad)), (phantom, roi)], atlas, "spleen", 0.0)
    assert res.failures[0][0] == 0 and res.region.n_examples == 1
    with pytest.raises(EmptyRegionError):
        infer_region([(bad, roi_volume(np.zeros((5, 5, 5)), bad))], atlas, "spleen", 0.0)


def test_region_file_round_trip(tmp_path):
    r = RegionDefinition("x", (BoundingBox([0, 0, 0], [1, 2, 3]), BoundingBox([5, 5, 5], [6, 6, 6])), 0.02, 7.0, 12)
    save_region(r, tmp_path / "x.json")
    back = load_region(tmp_path / "x.json")
    assert back.name == "x" and back.threshold == 0.02 and back.margin_mm == 7.0 and back.n_examples == 12
    assert all(a.allclose(b, atol=0) for a, b in zip(r.boxes, back.boxes))


def test_shipped_regions():
    expected = {"pancreas": 0.01, "liver": 0.035, "lungs": 0.04, "spine": 0.03, "brain": 0.01, "colon": 0.03}
    for name in DEFAULT_THRESHOLDS:
        r = default_region(name)
        assert r.name == name and r.margin_mm == 10.0
        if name in expected:
            assert r.threshold == expected[name]
    assert len(DEFAULT_THRESHOLDS) == 12


@pytest.mark.parametrize("name", ["liver", "kidneys", "pancreas", "urinary bladder"])
def test_shipped_region_covers_canonical_structure(name):
    mask = canonical_structure(name)
    pts = mask.index_to_mm(np.argwhere(mask.voxels > 0))
    inside = np.zeros(len(pts), bool)
    for bb in default_region(name).boxes:
        inside |= bb.contains(pts)
    assert inside.all()
