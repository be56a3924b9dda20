"""Synthetic 19-class body phantom with known ground-truth transforms.

The canonical phantom lives on a grid centred on the physical origin
(x: towards patient left, y: towards posterior, z: towards head). Organs are
analytic ellipsoids, cylinders, boxes and shells, rasterised by evaluating the
shapes at voxel centres, so transformed copies are sampled exactly rather than
by resampling a resampled volume.

Randomness comes exclusively from ``numpy.random.PCG64`` seeded with a
64-bit integer that is stored on every generated case.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError
from .model import (
    DEFAULT_CLASS_NAMES,
    WORKING_SPACING_MM,
    ImageVolume,
    LabelVolume,
    RestrictedAffine,
    RestrictedOrientation,
)
from .volume import apply_orientation, crop

RNG_NAME = "PCG64"
PHANTOM_EXTENT_MM = (256.0, 256.0, 400.0)


def _ellipsoid(c, r):
    c, r = np.asarray(c, float), np.asarray(r, float)

    def f(x, y, z):
        return ((x - c[0]) / r[0]) ** 2 + ((y - c[1]) / r[1]) ** 2 + ((z - c[2]) / r[2]) ** 2 <= 1.0

    return f


def _shell(c, r_in, r_out):
    inner, outer = _ellipsoid(c, r_in), _ellipsoid(c, r_out)
    return lambda x, y, z: outer(x, y, z) & ~inner(x, y, z)


def _cylinder_z(cx, cy, radius, z0, z1):
    return lambda x, y, z: ((x - cx) ** 2 + (y - cy) ** 2 <= radius**2) & (z >= z0) & (z <= z1)


def _box(lo, hi):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    return lambda x, y, z: (
        (x >= lo[0]) & (x <= hi[0]) & (y >= lo[1]) & (y <= hi[1]) & (z >= lo[2]) & (z <= hi[2])
    )


def _rib_cage(x_side, z0, z1):
    # elliptic band around the thorax restricted to one side
    outer = (118.0, 95.0)
    inner = (104.0, 83.0)

    def f(x, y, z):
        q_out = (x / outer[0]) ** 2 + (y / outer[1]) ** 2
        q_in = (x / inner[0]) ** 2 + (y / inner[1]) ** 2
        side = x > 30.0 if x_side > 0 else x < -30.0
        return (q_out <= 1.0) & (q_in > 1.0) & side & (z >= z0) & (z <= z1)

    return f


# Drawing order matters: later shapes overwrite earlier ones.
_ORGANS = [
    (12, _ellipsoid((55, -3, 0), (42, 55, 55))),
    (13, _ellipsoid((-55, -3, 0), (40, 55, 58))),
    (14, _ellipsoid((25, -40, -25), (35, 30, 30))),
    (11, _ellipsoid((0, -3, 145), (58, 72, 38))),
    (1, _shell((0, -3, 145), (58, 72, 38), (66, 80, 46))),
    (3, _rib_cage(+1, -50, 50)),
    (4, _rib_cage(-1, -45, 50)),
    (5, _box((-8, -100, -30), (8, -82, 40))),
    (2, _cylinder_z(0, 45, 12, 55, 95)),
    (6, _cylinder_z(0, 58, 14, -70, 50)),
    (7, _cylinder_z(0, 55, 16, -125, -75)),
    (8, _ellipsoid((0, 60, -150), (25, 15, 18))),
    (15, _ellipsoid((-50, -15, -75), (55, 50, 30))),
    (16, _ellipsoid((70, 30, -70), (20, 28, 22))),
    (17, _ellipsoid((48, 55, -100), (16, 22, 28))),
    (18, _ellipsoid((-47, 57, -108), (16, 22, 28))),
    (9, _ellipsoid((75, 10, -155), (35, 40, 30))),
    (10, _ellipsoid((-75, 10, -155), (35, 40, 30))),
    (19, _ellipsoid((0, -50, -140), (25, 22, 20))),
]

# Target structures for region tasks. Class groups reuse the labelled
# anatomy; the rest are unlabelled soft-tissue organs, as in real scans.
_EXTRA_STRUCTURES = {
    "pancreas": _ellipsoid((5, 20, -95), (40, 10, 10)),
    "gallbladder": _ellipsoid((-40, -55, -100), (10, 10, 15)),
    "stomach": _ellipsoid((40, -30, -65), (28, 22, 25)),
    "colon": lambda x, y, z: (
        _box((-95, -30, -150), (-65, 0, -95))(x, y, z)
        | _box((-95, -60, -115), (95, -30, -90))(x, y, z)
        | _box((65, -30, -160), (95, 0, -95))(x, y, z)
    ),
}

STRUCTURE_CLASSES = {
    "kidneys": (17, 18),
    "brain": (11,),
    "heart": (14,),
    "liver": (15,),
    "lungs": (12, 13),
    "spine": (2, 6, 7),
    "spleen": (16,),
    "urinary bladder": (19,),
}

STRUCTURES = tuple(sorted(set(STRUCTURE_CLASSES) | set(_EXTRA_STRUCTURES)))


def _axis_coords(origin, spacing, dims):
    return [origin[a] + spacing[a] * np.arange(dims[a]) for a in range(3)]


def _eval_grid(coords):
    x, y, z = coords
    return x[:, None, None], y[None, :, None], z[None, None, :]


def labels_at(coords):
    """Phantom labels at the tensor grid spanned by per-axis canonical coordinates."""
    x, y, z = _eval_grid(coords)
    shape = (len(coords[0]), len(coords[1]), len(coords[2]))
    out = np.zeros(shape, dtype=np.uint8)
    for label, shape_fn in _ORGANS:
        out[np.broadcast_to(shape_fn(x, y, z), shape)] = label
    return out


def structure_at(name, coords):
    """Binary mask of a named target structure on a canonical tensor grid."""
    shape = (len(coords[0]), len(coords[1]), len(coords[2]))
    if name in STRUCTURE_CLASSES:
        return np.isin(labels_at(coords), STRUCTURE_CLASSES[name])
    if name in _EXTRA_STRUCTURES:
        x, y, z = _eval_grid(coords)
        return np.broadcast_to(_EXTRA_STRUCTURES[name](x, y, z), shape).copy()
    raise InvalidArgumentError(f"unknown structure {name!r}; choose from {STRUCTURES}")


def canonical_grid(spacing_mm=WORKING_SPACING_MM):
    spacing = np.full(3, float(spacing_mm))
    dims = np.ceil(np.asarray(PHANTOM_EXTENT_MM) / spacing).astype(int)
    origin = -spacing * (dims - 1) / 2.0
    return tuple(int(d) for d in dims), spacing, origin


def canonical_phantom(spacing_mm=WORKING_SPACING_MM):
    """The reference phantom in atlas pose, centred on the origin."""
    if spacing_mm <= 0:
        raise InvalidArgumentError("spacing_mm must be positive")
    dims, spacing, origin = canonical_grid(spacing_mm)
    return LabelVolume(labels_at(_axis_coords(origin, spacing, dims)), spacing, origin, len(DEFAULT_CLASS_NAMES))


def canonical_structure(name, spacing_mm=WORKING_SPACING_MM):
    dims, spacing, origin = canonical_grid(spacing_mm)
    mask = structure_at(name, _axis_coords(origin, spacing, dims))
    return LabelVolume(mask.astype(np.uint8), spacing, origin, 1)


@dataclass(frozen=True)
class CaseConfig:
    """Knobs for :func:`sample_case`.

    ``fov_z_mm`` keeps only the slices whose canonical z lies in the given
    range (e.g. a chest-only scan). ``truth`` bypasses the random transform.
    """

    orientations: tuple = tuple((o.k_rot, o.flip_z) for o in RestrictedOrientation.all())
    max_translation_frac: float = 0.4
    scale_range: tuple = (0.8, 1.25)
    fov_z_mm: tuple = None
    dropout_classes: int = 0
    boundary_noise_vox: int = 0
    lesion_structure: str = "liver"
    lesion_radius_mm: tuple = (5.0, 12.0)
    spacing_mm: float = WORKING_SPACING_MM
    truth: RestrictedAffine = field(default=None, compare=False)

    def validate(self):
        if not self.orientations:
            raise InvalidArgumentError("orientations must not be empty")
        for o in self.orientations:
            RestrictedOrientation(*o)
        if not 0 <= self.max_translation_frac <= 0.4:
            raise InvalidArgumentError("max_translation_frac must lie in [0, 0.4]")
        lo, hi = self.scale_range
        if not 0.8 <= lo <= hi <= 1.25:
            raise InvalidArgumentError("scale_range must lie within [0.8, 1.25]")
        if not 0 <= self.dropout_classes <= len(DEFAULT_CLASS_NAMES) - 1:
            raise InvalidArgumentError("dropout_classes must leave at least one class")
        if not 0 <= self.boundary_noise_vox <= 3:
            raise InvalidArgumentError("boundary_noise_vox must lie in [0, 3]")
        if self.lesion_structure not in STRUCTURES:
            raise InvalidArgumentError(f"unknown lesion structure {self.lesion_structure!r}")
        rlo, rhi = self.lesion_radius_mm
        if not 0 < rlo <= rhi:
            raise InvalidArgumentError("lesion_radius_mm must be a positive range")
        if self.fov_z_mm is not None and not self.fov_z_mm[0] < self.fov_z_mm[1]:
            raise InvalidArgumentError("fov_z_mm must be an increasing pair")
        if self.spacing_mm <= 0:
            raise InvalidArgumentError("spacing_mm must be positive")

    def to_dict(self):
        d = asdict(self)
        d.pop("truth")
        return d


@dataclass(frozen=True, eq=False)
class PhantomCase:
    seg: LabelVolume
    truth: RestrictedAffine
    roi: LabelVolume
    image: ImageVolume
    seed: int
    lesion_center_mm: np.ndarray
    lesion_radius_mm: float
    dropped: tuple
    rng: str = RNG_NAME


def _random_truth(rng, cfg):
    o = RestrictedOrientation(*cfg.orientations[rng.integers(len(cfg.orientations))])
    s = rng.uniform(cfg.scale_range[0], cfg.scale_range[1], size=3)
    t = rng.uniform(-1, 1, size=3) * cfg.max_translation_frac * np.asarray(PHANTOM_EXTENT_MM)
    return RestrictedAffine(o, s, t)


def _lesion(rng, cfg, canon_coords):
    mask = structure_at(cfg.lesion_structure, canon_coords)
    surface = mask & ~ndimage.binary_erosion(mask)
    idx = np.argwhere(surface)
    pick = idx[rng.integers(len(idx))]
    center = np.array([canon_coords[a][pick[a]] for a in range(3)])
    radius = float(rng.uniform(*cfg.lesion_radius_mm))
    return center, radius


def _boundary_noise(labels, k, rng):
    if k == 0:
        return labels
    out = labels.copy()
    for c in np.unique(labels):
        if c == 0:
            continue
        op = rng.integers(3)
        mask = labels == c
        if op == 1:
            grown = ndimage.binary_dilation(mask, iterations=k)
            out[grown & (out == 0)] = c
        elif op == 2:
            shrunk = ndimage.binary_erosion(mask, iterations=k)
            out[mask & ~shrunk] = 0
    return out


def sample_case(seed, config=None):
    """Draw a phantom scan whose registration to the canonical atlas should
    return ``case.truth``.

    The scan grid is laid out in the scan's own frame ``x`` with
    ``truth.forward(x)`` giving canonical coordinates; it is then re-oriented
    by the inverse of ``truth.orientation``.
    """
    cfg = config or CaseConfig()
    cfg.validate()
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    rng = np.random.Generator(np.random.PCG64(seed))
    truth = cfg.truth if cfg.truth is not None else _random_truth(rng, cfg)

    spacing = np.full(3, float(cfg.spacing_mm))
    dims_c, sp_c, origin_c = canonical_grid(cfg.spacing_mm)
    canon_coords = _axis_coords(origin_c, sp_c, dims_c)
    lesion_center, lesion_radius = _lesion(rng, cfg, canon_coords)

    # scan frame covering the transformed canonical extent
    lo = origin_c - sp_c / 2.0
    hi = lo + sp_c * np.asarray(dims_c)
    x_lo = (lo - truth.translation_mm) / truth.scale
    x_hi = (hi - truth.translation_mm) / truth.scale
    dims = np.ceil((x_hi - x_lo) / spacing).astype(int)
    origin = x_lo + spacing / 2.0
    scan_coords = _axis_coords(origin, spacing, dims)
    canon_at_scan = [truth.scale[a] * scan_coords[a] + truth.translation_mm[a] for a in range(3)]

    labels = labels_at(canon_at_scan)
    roi = structure_at(cfg.lesion_structure, canon_at_scan)
    gx, gy, gz = _eval_grid(canon_at_scan)
    roi |= (gx - lesion_center[0]) ** 2 + (gy - lesion_center[1]) ** 2 + (gz - lesion_center[2]) ** 2 <= lesion_radius**2

    dropped = ()
    if cfg.dropout_classes:
        dropped = tuple(sorted(int(c) for c in rng.choice(np.arange(1, 20), cfg.dropout_classes, replace=False)))
        labels[np.isin(labels, dropped)] = 0
    labels = _boundary_noise(labels, cfg.boundary_noise_vox, rng)

    seg = LabelVolume(labels, spacing, origin, len(DEFAULT_CLASS_NAMES))
    roi_vol = LabelVolume(roi.astype(np.uint8), spacing, origin, 1)
    image = ImageVolume((40.0 + 10.0 * labels).astype(np.float32), spacing, origin)

    if cfg.fov_z_mm is not None:
        z_lo = (cfg.fov_z_mm[0] - truth.translation_mm[2]) / truth.scale[2]
        z_hi = (cfg.fov_z_mm[1] - truth.translation_mm[2]) / truth.scale[2]
        k0 = int(np.ceil((z_lo - origin[2]) / spacing[2]))
        k1 = int(np.floor((z_hi - origin[2]) / spacing[2])) + 1
        rng_box = ((0, dims[0]), (0, dims[1]), (k0, k1))
        seg, roi_vol, image = (crop(v, rng_box) for v in (seg, roi_vol, image))

    inv = truth.orientation.inverse()
    return PhantomCase(
        seg=apply_orientation(seg, inv),
        truth=truth,
        roi=apply_orientation(roi_vol, inv),
        image=apply_orientation(image, inv),
        seed=seed,
        lesion_center_mm=lesion_center,
        lesion_radius_mm=lesion_radius,
        dropped=dropped,
    )
