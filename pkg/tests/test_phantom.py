import numpy as np
import pytest

from atlascrop.errors import InvalidArgumentError
from atlascrop.model import DEFAULT_CLASS_NAMES, RestrictedAffine, RestrictedOrientation
from atlascrop.phantom import STRUCTURES, CaseConfig, canonical_phantom, canonical_structure, sample_case
from atlascrop.volume import apply_orientation, class_volumes


def test_canonical_has_every_class(phantom):
    assert phantom.num_classes == 19 == len(DEFAULT_CLASS_NAMES)
    assert np.all(class_volumes(phantom) > 0)
    assert np.all(phantom.extent_mm >= [256, 256, 400]) and np.all(phantom.extent_mm < [259, 259, 403])


def test_determinism():
    a, b = sample_case(5), sample_case(5)
    assert a.seg.equals(b.seg) and a.roi.equals(b.roi) and a.truth.equals(b.truth)
    assert not sample_case(6).truth.equals(a.truth)


def test_identity_truth_reproduces_canonical(phantom):
    case = sample_case(0, CaseConfig(truth=RestrictedAffine()))
    assert case.seg.equals(phantom)


def test_seg_independent_of_lesion_structure():
    a = sample_case(11, CaseConfig(lesion_structure="liver"))
    b = sample_case(11, CaseConfig(lesion_structure="kidneys"))
    assert a.seg.equals(b.seg) and not a.roi.equals(b.roi)


def test_orientation_and_ranges():
    for seed in range(20):
        c = sample_case(seed)
        assert np.all((c.truth.scale >= 0.8) & (c.truth.scale <= 1.25))
    cfg = CaseConfig(orientations=((2, True),))
    c = sample_case(3, cfg)
    assert c.truth.orientation == RestrictedOrientation(2, True)
    # undoing the orientation restores the upright frame: z is the long axis
    upright = apply_orientation(c.seg, c.truth.orientation)
    assert upright.extent_mm[2] > upright.extent_mm[0]


def test_dropout_removes_classes():
    c = sample_case(8, CaseConfig(dropout_classes=10))
    vols = class_volumes(c.seg)
    assert len(c.dropped) == 10
    assert all(vols[k - 1] == 0 for k in c.dropped)


def test_roi_contains_structure_and_lesion():
    c = sample_case(9, CaseConfig(truth=RestrictedAffine(), lesion_radius_mm=(9.0, 9.0)))
    liver = canonical_structure("liver")
    assert np.all(c.roi.voxels[liver.voxels > 0] == 1)
    assert c.roi.voxels.sum() > liver.voxels.sum()


def test_fov_crop():
    c = sample_case(10, CaseConfig(truth=RestrictedAffine(), fov_z_mm=(-40.0, 60.0)))
    lo, hi = c.seg.bounds_mm
    assert lo[2] >= -40 - 3 and hi[2] <= 60 + 3
    assert class_volumes(c.seg)[18] == 0  # bladder is out of view


@pytest.mark.parametrize(
    "kw",
    [
        {"scale_range": (0.7, 1.0)},
        {"max_translation_frac": 0.5},
        {"orientations": ()},
        {"orientations": ((5, False),)},
        {"dropout_classes": 19},
        {"boundary_noise_vox": 4},
        {"lesion_structure": "appendix"},
        {"fov_z_mm": (10.0, 0.0)},
    ],
)
def test_config_validation(kw):
    with pytest.raises(InvalidArgumentError):
        sample_case(1, CaseConfig(**kw))


def test_structures_nonempty():
    for name in STRUCTURES:
        assert canonical_structure(name).voxels.sum() > 0
