"""Immutable value types shared by all modules.

Coordinates are millimetres throughout. The physical position of voxel
``(i, j, k)`` is ``origin_mm + spacing_mm * (i, j, k)``, with no half-voxel
offset; a voxel is understood to extend half a spacing either side of that
point. Label 0 is background; classes are numbered ``1..num_classes``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from ._grid import as_vec3, frozen, grid_center, index_to_mm, marginal_centroid_index
from .errors import InvariantViolation

WORKING_SPACING_MM = 3.0

DEFAULT_CLASS_NAMES = (
    "skull",
    "C vertebrae",
    "left rips, scapula, clavicular",
    "right rips, scapula, clavicular",
    "sternum",
    "T vertebrae",
    "L vertebrae",
    "sacrum",
    "left hip",
    "right hip",
    "brain",
    "lung left",
    "lung right",
    "heart",
    "liver",
    "spleen",
    "left kidney",
    "right kidney",
    "urinary bladder",
)


def _check(cond, message):
    if not cond:
        raise InvariantViolation(message)


def _vec(values, name, positive=False):
    try:
        return as_vec3(values, name, positive=positive)
    except ValueError as exc:
        raise InvariantViolation(str(exc)) from None


class _GridMixin:
    """Geometry accessors for anything carrying ``spacing_mm``/``origin_mm``."""

    @property
    def dims(self):
        return tuple(int(n) for n in self._array.shape[-3:])

    @property
    def center_mm(self):
        return grid_center(self.dims, self.spacing_mm, self.origin_mm)

    @property
    def extent_mm(self):
        return np.asarray(self.dims) * self.spacing_mm

    @property
    def bounds_mm(self):
        """(lo, hi) corners of the voxel-box extent."""
        lo = self.origin_mm - self.spacing_mm / 2.0
        return lo, lo + self.extent_mm

    def index_to_mm(self, index):
        return index_to_mm(index, self.spacing_mm, self.origin_mm)

    def mm_to_index(self, point_mm):
        return (np.asarray(point_mm, dtype=np.float64) - self.origin_mm) / self.spacing_mm

    def same_geometry(self, other, atol=1e-9):
        return (
            self.dims == other.dims
            and np.allclose(self.spacing_mm, other.spacing_mm, rtol=0, atol=atol)
            and np.allclose(self.origin_mm, other.origin_mm, rtol=0, atol=atol)
        )


@dataclass(frozen=True, eq=False)
class LabelVolume(_GridMixin):
    """Integer class map on a regular grid."""

    voxels: np.ndarray
    spacing_mm: np.ndarray
    origin_mm: np.ndarray = field(default_factory=lambda: np.zeros(3))
    num_classes: int = len(DEFAULT_CLASS_NAMES)

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        _check(vox.ndim == 3, f"label volume must be 3D, got shape {vox.shape}")
        _check(
            np.issubdtype(vox.dtype, np.integer) or vox.dtype == np.bool_,
            f"label voxels must be integers, got {vox.dtype}",
        )
        _check(int(self.num_classes) >= 1, "num_classes must be >= 1")
        if vox.size:
            lo, hi = int(vox.min()), int(vox.max())
            _check(lo >= 0, f"negative label {lo}")
            _check(hi <= self.num_classes, f"label {hi} exceeds num_classes={self.num_classes}")
        object.__setattr__(self, "voxels", frozen(vox))
        object.__setattr__(self, "spacing_mm", _vec(self.spacing_mm, "spacing_mm", positive=True))
        object.__setattr__(self, "origin_mm", _vec(self.origin_mm, "origin_mm"))
        object.__setattr__(self, "num_classes", int(self.num_classes))

    @property
    def _array(self):
        return self.voxels

    def with_voxels(self, voxels, origin_mm=None, spacing_mm=None):
        return LabelVolume(
            voxels,
            self.spacing_mm if spacing_mm is None else spacing_mm,
            self.origin_mm if origin_mm is None else origin_mm,
            self.num_classes,
        )

    def equals(self, other):
        return (
            isinstance(other, LabelVolume)
            and self.num_classes == other.num_classes
            and np.array_equal(self.voxels, other.voxels)
            and np.array_equal(self.spacing_mm, other.spacing_mm)
            and np.array_equal(self.origin_mm, other.origin_mm)
        )


@dataclass(frozen=True, eq=False)
class ImageVolume(_GridMixin):
    """Real-valued volume (CT intensities, heatmaps, soft masks)."""

    data: np.ndarray
    spacing_mm: np.ndarray
    origin_mm: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        arr = np.asarray(self.data)
        _check(arr.ndim == 3, f"image volume must be 3D, got shape {arr.shape}")
        object.__setattr__(self, "data", frozen(arr))
        object.__setattr__(self, "spacing_mm", _vec(self.spacing_mm, "spacing_mm", positive=True))
        object.__setattr__(self, "origin_mm", _vec(self.origin_mm, "origin_mm"))

    @property
    def _array(self):
        return self.data

    def with_data(self, data, origin_mm=None, spacing_mm=None):
        return ImageVolume(
            data,
            self.spacing_mm if spacing_mm is None else spacing_mm,
            self.origin_mm if origin_mm is None else origin_mm,
        )

    def equals(self, other):
        return (
            isinstance(other, ImageVolume)
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
            and np.array_equal(self.spacing_mm, other.spacing_mm)
            and np.array_equal(self.origin_mm, other.origin_mm)
        )


@dataclass(frozen=True)
class LabelSchema:
    names: tuple = DEFAULT_CLASS_NAMES

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        _check(len(names) >= 1, "schema needs at least one class")
        _check(len(set(names)) == len(names), "class names must be unique")
        object.__setattr__(self, "names", names)

    @property
    def num_classes(self):
        return len(self.names)

    def class_id(self, name):
        return self.names.index(name) + 1


DEFAULT_SCHEMA = LabelSchema()


@dataclass(frozen=True, order=True)
class RestrictedOrientation:
    """One of the 8 axis-preserving orientations: ``k_rot`` quarter turns in
    the xy plane, optionally followed by reversing z.

    The set forms the abelian group Z4 x Z2, so composition order is
    irrelevant. A quarter turn maps (x, y, z) offsets from the volume centre
    to (y, -x, z).
    """

    k_rot: int = 0
    flip_z: bool = False

    def __post_init__(self):
        k = self.k_rot
        _check(isinstance(k, (int, np.integer)) and not isinstance(k, bool), "k_rot must be an int")
        _check(0 <= int(k) <= 3, f"k_rot must be in 0..3, got {k}")
        object.__setattr__(self, "k_rot", int(k))
        object.__setattr__(self, "flip_z", bool(self.flip_z))

    @classmethod
    def all(cls):
        return [cls(k, f) for k, f in product(range(4), (False, True))]

    @property
    def is_identity(self):
        return self.k_rot == 0 and not self.flip_z

    def compose(self, other):
        return RestrictedOrientation((self.k_rot + other.k_rot) % 4, self.flip_z != other.flip_z)

    def inverse(self):
        return RestrictedOrientation((-self.k_rot) % 4, self.flip_z)

    def rotate_offsets(self, offsets):
        """Apply the orientation to offsets from the rotation centre, shape (..., 3)."""
        r = np.array(offsets, dtype=np.float64, copy=True)
        for _ in range(self.k_rot):
            r[..., 0], r[..., 1] = r[..., 1].copy(), -r[..., 0]
        if self.flip_z:
            r[..., 2] = -r[..., 2]
        return r

    def map_points(self, points, center):
        center = np.asarray(center, dtype=np.float64)
        return center + self.rotate_offsets(np.asarray(points, dtype=np.float64) - center)

    def permute_axes(self, vec3):
        """Reorder a per-axis quantity (dims, spacing) the way the array axes move."""
        v = list(vec3)
        if self.k_rot % 2:
            v[0], v[1] = v[1], v[0]
        return tuple(v)


IDENTITY_ORIENTATION = RestrictedOrientation()


@dataclass(frozen=True, eq=False)
class RestrictedAffine:
    """Orientation, per-axis scale and translation.

    For a point ``x`` in the orientation-normalised moving grid the atlas point
    is ``scale * x + translation_mm``.
    """

    orientation: RestrictedOrientation = IDENTITY_ORIENTATION
    scale: np.ndarray = field(default_factory=lambda: np.ones(3))
    translation_mm: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        _check(isinstance(self.orientation, RestrictedOrientation), "orientation must be a RestrictedOrientation")
        object.__setattr__(self, "scale", _vec(self.scale, "scale", positive=True))
        object.__setattr__(self, "translation_mm", _vec(self.translation_mm, "translation_mm"))

    def forward(self, points):
        return np.asarray(points, dtype=np.float64) * self.scale + self.translation_mm

    def inverse(self, points):
        return (np.asarray(points, dtype=np.float64) - self.translation_mm) / self.scale

    def equals(self, other):
        return (
            self.orientation == other.orientation
            and np.array_equal(self.scale, other.scale)
            and np.array_equal(self.translation_mm, other.translation_mm)
        )


@dataclass(frozen=True, eq=False)
class AtlasSegmentation(_GridMixin):
    """Per-class probability volumes on an isotropic grid.

    ``prob`` has shape ``(C, nx, ny, nz)``; channel ``c - 1`` belongs to class ``c``.
    """

    prob: np.ndarray
    spacing_mm: np.ndarray
    origin_mm: np.ndarray
    landmarks_mm: np.ndarray = None
    class_volumes: np.ndarray = None
    names: tuple = DEFAULT_CLASS_NAMES

    def __post_init__(self):
        prob = np.asarray(self.prob, dtype=np.float32)
        _check(prob.ndim == 4, f"atlas prob must be (C, nx, ny, nz), got {prob.shape}")
        names = tuple(self.names)
        _check(len(names) == prob.shape[0], f"{len(names)} names for {prob.shape[0]} channels")
        _check(bool(np.all(np.isfinite(prob))), "atlas probabilities must be finite")
        _check(bool(prob.min() >= 0.0 and prob.max() <= 1.0), "atlas probabilities must lie in [0, 1]")
        spacing = _vec(self.spacing_mm, "spacing_mm", positive=True)
        _check(bool(np.all(spacing == spacing[0])), f"atlas grid must be isotropic, got {spacing.tolist()}")
        origin = _vec(self.origin_mm, "origin_mm")

        volumes = prob.sum(axis=(1, 2, 3), dtype=np.float64)
        bad = [names[i] for i in np.flatnonzero(volumes <= 0)]
        _check(not bad, f"atlas classes without support: {bad}")
        if self.class_volumes is not None:
            given = np.asarray(self.class_volumes, dtype=np.float64)
            _check(given.shape == volumes.shape, "class_volumes has the wrong length")
            _check(bool(np.allclose(given, volumes, rtol=1e-6, atol=1e-6)), "class_volumes disagree with prob sums")
            volumes = given

        landmarks = np.stack([index_to_mm(marginal_centroid_index(p), spacing, origin) for p in prob])
        if self.landmarks_mm is not None:
            given = np.asarray(self.landmarks_mm, dtype=np.float64)
            _check(given.shape == landmarks.shape, "landmarks_mm must be (C, 3)")
            err = float(np.abs(given - landmarks).max())
            _check(err <= 1e-6, f"landmarks differ from probability-weighted centroids by {err:.3g} mm")
            landmarks = given

        object.__setattr__(self, "prob", frozen(prob))
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "origin_mm", origin)
        object.__setattr__(self, "landmarks_mm", frozen(landmarks))
        object.__setattr__(self, "class_volumes", frozen(volumes))
        object.__setattr__(self, "names", names)

    @property
    def _array(self):
        return self.prob

    @property
    def num_classes(self):
        return self.prob.shape[0]

    @property
    def schema(self):
        return LabelSchema(self.names)

    def equals(self, other):
        return (
            np.array_equal(self.prob, other.prob)
            and np.array_equal(self.spacing_mm, other.spacing_mm)
            and np.array_equal(self.origin_mm, other.origin_mm)
            and np.array_equal(self.landmarks_mm, other.landmarks_mm)
            and np.array_equal(self.class_volumes, other.class_volumes)
            and self.names == other.names
        )


@dataclass(frozen=True, eq=False)
class BoundingBox:
    min_mm: np.ndarray
    max_mm: np.ndarray

    def __post_init__(self):
        lo = _vec(self.min_mm, "min_mm")
        hi = _vec(self.max_mm, "max_mm")
        _check(bool(np.all(lo < hi)), f"box min {lo.tolist()} must be < max {hi.tolist()}")
        object.__setattr__(self, "min_mm", lo)
        object.__setattr__(self, "max_mm", hi)

    @property
    def volume_mm3(self):
        return float(np.prod(self.max_mm - self.min_mm))

    def overlaps(self, other):
        """True when the intersection has positive volume."""
        return bool(np.all(self.min_mm < other.max_mm) and np.all(other.min_mm < self.max_mm))

    def hull(self, other):
        return BoundingBox(np.minimum(self.min_mm, other.min_mm), np.maximum(self.max_mm, other.max_mm))

    def inflate(self, margin_mm):
        return BoundingBox(self.min_mm - margin_mm, self.max_mm + margin_mm)

    def contains(self, points):
        p = np.asarray(points, dtype=np.float64)
        return np.all((p >= self.min_mm) & (p <= self.max_mm), axis=-1)

    def allclose(self, other, atol=1e-9):
        return bool(
            np.allclose(self.min_mm, other.min_mm, rtol=0, atol=atol)
            and np.allclose(self.max_mm, other.max_mm, rtol=0, atol=atol)
        )

    def to_dict(self):
        return {"min_mm": self.min_mm.tolist(), "max_mm": self.max_mm.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["min_mm"], d["max_mm"])


@dataclass(frozen=True, eq=False)
class RegionDefinition:
    name: str
    boxes: tuple
    threshold: float = 0.0
    margin_mm: float = 10.0
    n_examples: int = None

    def __post_init__(self):
        boxes = tuple(self.boxes)
        _check(len(boxes) >= 1, f"region {self.name!r} needs at least one box")
        _check(all(isinstance(b, BoundingBox) for b in boxes), "boxes must be BoundingBox instances")
        _check(float(self.threshold) >= 0, f"threshold must be >= 0, got {self.threshold}")
        for a in range(len(boxes)):
            for b in range(a + 1, len(boxes)):
                _check(not boxes[a].overlaps(boxes[b]), f"region {self.name!r}: boxes {a} and {b} overlap")
        object.__setattr__(self, "boxes", boxes)
        object.__setattr__(self, "threshold", float(self.threshold))
        object.__setattr__(self, "margin_mm", float(self.margin_mm))

    @property
    def volume_mm3(self):
        return sum(b.volume_mm3 for b in self.boxes)


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    """Per-class centres of mass; absent classes hold NaN."""

    points_mm: np.ndarray
    present: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points_mm, dtype=np.float64)
        present = np.asarray(self.present, dtype=bool)
        _check(pts.ndim == 2 and pts.shape[1] == 3, "points_mm must be (C, 3)")
        _check(present.shape == (pts.shape[0],), "present must have one flag per class")
        _check(bool(np.all(np.isfinite(pts[present]))), "present landmarks must be finite")
        pts[~present] = np.nan
        object.__setattr__(self, "points_mm", frozen(pts))
        object.__setattr__(self, "present", frozen(present))

    def __len__(self):
        return self.points_mm.shape[0]


@dataclass(frozen=True, eq=False)
class CoverageWeights:
    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        _check(bool(np.all(np.isfinite(w)) and np.all(w >= 0)), "weights must be finite and >= 0")
        _check(abs(w.sum() - 1.0) <= 1e-9, f"weights must sum to 1, got {w.sum()!r}")
        object.__setattr__(self, "w", frozen(w))

    def __len__(self):
        return self.w.shape[0]


@dataclass(frozen=True, eq=False)
class Heatmap(_GridMixin):
    """Running mean of warped ROI masks on the atlas grid."""

    values: np.ndarray
    spacing_mm: np.ndarray
    origin_mm: np.ndarray
    count: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        _check(v.ndim == 3, "heatmap must be 3D")
        _check(bool(np.all(np.isfinite(v)) and v.min(initial=0) >= 0 and v.max(initial=0) <= 1), "heatmap values must lie in [0, 1]")
        _check(int(self.count) >= 0, "count must be >= 0")
        object.__setattr__(self, "values", frozen(v))
        object.__setattr__(self, "spacing_mm", _vec(self.spacing_mm, "spacing_mm", positive=True))
        object.__setattr__(self, "origin_mm", _vec(self.origin_mm, "origin_mm"))
        object.__setattr__(self, "count", int(self.count))

    @property
    def _array(self):
        return self.values

    @classmethod
    def empty_like(cls, grid):
        return cls(np.zeros(grid.dims), grid.spacing_mm, grid.origin_mm, 0)
