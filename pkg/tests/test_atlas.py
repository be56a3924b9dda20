import json
import os

import numpy as np
import pytest

from atlascrop.atlas import (
    build_atlas,
    build_atlas_report,
    channel_filename,
    load_atlas,
    save_atlas,
    atlas_summary,
)
from atlascrop.errors import CohortTooSmallError, CorruptFileError, MissingChannelError, TruncatedFileError, VersionMismatchError
from atlascrop.model import LabelVolume, RestrictedAffine
from atlascrop.phantom import CaseConfig, sample_case
from atlascrop.volume import to_soft_masks


def test_degenerate_cohort_is_exact(phantom):
    atlas = build_atlas([phantom] * 3)
    assert np.array_equal(atlas.prob, to_soft_masks(phantom, np.float32))
    assert np.array_equal(atlas.origin_mm, phantom.origin_mm)


def _balanced_cohort(n_pairs, seed):
    # each random pose is paired with its inverse so the cohort's mean pose is the canonical one
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n_pairs):
        s = rng.uniform(0.9, 1.1, 3)
        t = rng.uniform(-1, 1, 3) * 30 / np.sqrt(3)
        for tf in (RestrictedAffine(scale=s, translation_mm=t), RestrictedAffine(scale=1 / s, translation_mm=-t / s)):
            out.append(sample_case(seed * 100 + len(out), CaseConfig(truth=tf)).seg)
    return out


@pytest.mark.slow
def test_phantom_cohort_atlas_landmarks(atlas):
    cohort = _balanced_cohort(4, 7)
    built = build_atlas_report(cohort)
    assert built.report.rejected == []
    err = np.abs(built.atlas.landmarks_mm - atlas.landmarks_mm).max()
    assert err <= 6.0, err
    assert built.atlas.prob.min() >= 0 and built.atlas.prob.max() <= 1
    assert np.all(built.atlas.class_volumes > 0)


def test_cohort_order_invariance():
    cohort = [sample_case(900 + k, CaseConfig(orientations=((0, False),), scale_range=(0.95, 1.05), max_translation_frac=0.05)).seg for k in range(3)]
    a = build_atlas(cohort)
    b = build_atlas(cohort[::-1])
    assert np.abs(a.landmarks_mm - b.landmarks_mm).max() <= 1e-6


def test_scan_missing_class_is_rejected(phantom):
    vox = phantom.voxels.copy()
    vox[vox == 5] = 0
    partial = LabelVolume(vox, phantom.spacing_mm, phantom.origin_mm)
    built = build_atlas_report([phantom, phantom, partial])
    assert built.report.valid == [0, 1]
    assert built.report.rejected[0]["index"] == 2
    assert "sternum" in built.report.rejected[0]["reason"]
    with pytest.raises(CohortTooSmallError) as err:
        build_atlas_report([phantom, partial])
    assert err.value.n_valid == 1


def test_misoriented_scan_is_rejected(phantom):
    from atlascrop.model import RestrictedOrientation
    from atlascrop.volume import apply_orientation

    turned = apply_orientation(phantom, RestrictedOrientation(1, False))
    built = build_atlas_report([phantom, phantom, turned])
    assert [r["index"] for r in built.report.rejected] == [2]
    assert np.array_equal(built.atlas.prob, to_soft_masks(phantom, np.float32))


def test_cohort_too_small(phantom):
    with pytest.raises(CohortTooSmallError):
        build_atlas([phantom])


def test_save_load_round_trip(tmp_path, atlas):
    save_atlas(atlas, tmp_path)
    back = load_atlas(tmp_path)
    assert back.equals(atlas)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["schema_version"] == 1
    assert set(manifest) >= {"dims", "spacing_mm", "origin_mm", "classes", "landmarks_mm", "class_volumes", "checksums"}
    # x-fastest little-endian layout
    raw = np.fromfile(tmp_path / channel_filename(15, "liver"), dtype="<f4")
    assert np.array_equal(raw.reshape(atlas.dims, order="F"), atlas.prob[14])


def test_load_missing_channel(tmp_path, atlas):
    save_atlas(atlas, tmp_path)
    os.remove(tmp_path / channel_filename(16, "spleen"))
    with pytest.raises(MissingChannelError) as err:
        load_atlas(tmp_path)
    assert err.value.class_name == "spleen"


def test_load_version_mismatch(tmp_path, atlas):
    save_atlas(atlas, tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["schema_version"] = 2
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(VersionMismatchError):
        load_atlas(tmp_path)


def test_load_corrupt_and_truncated(tmp_path, atlas):
    save_atlas(atlas, tmp_path)
    f = tmp_path / channel_filename(1, "skull")
    data = bytearray(f.read_bytes())
    data[100] ^= 0xFF
    f.write_bytes(bytes(data))
    with pytest.raises(CorruptFileError):
        load_atlas(tmp_path)
    f.write_bytes(bytes(data[:-4]))
    with pytest.raises(TruncatedFileError):
        load_atlas(tmp_path)


def test_summary_lists_every_class(atlas):
    text = atlas_summary(atlas)
    assert len(text.splitlines()) == 20
    assert "urinary bladder" in text
