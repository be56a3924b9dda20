"""Two-stage restricted-affine registration of a label map to an atlas.

Stage one fits a translation to per-class centres of mass with coverage
weights and picks the best of the 8 orientations. Stage two refines scale and
translation by gradient descent on a weighted soft-Dice loss.
"""

from __future__ import annotations

import json
import logging
import time
import weakref
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import (
    InternalConsistencyError,
    InvalidArgumentError,
    NoAnatomyFoundError,
    NumericalFailureError,
)
from .model import CoverageWeights, LandmarkSet, RestrictedAffine, RestrictedOrientation
from .volume import (
    SNAP_TOL,
    apply_orientation,
    axis_sample_indices,
    center_of_mass,
    class_volumes,
    resample_labels,
    warp_axis_aligned,
)

log = logging.getLogger(__name__)

TRANSFORM_SCHEMA_VERSION = 1

DICE_EPS = 1e-5
SCALE_BOUNDS = (0.5, 2.0)
INITIAL_STEP = 0.05
MIN_DECREASE = 0.005
MAX_STEP_REDUCTIONS = 4
MAX_ITERATIONS = 500
FD_STEP_VOXELS = 0.5
FD_STEP_SCALE = 1e-3
# translation normalisation; one unit of theta moves the volume this far
TRANSLATION_UNIT_MM = 50.0


def coverage_weights(moving_volumes, atlas_volumes):
    """Per-class weight proportional to moving/atlas volume ratio, summing to 1."""
    mv = np.asarray(moving_volumes, dtype=np.float64)
    av = np.asarray(atlas_volumes, dtype=np.float64)
    if mv.shape != av.shape:
        raise InvalidArgumentError(f"{mv.shape[0]} moving volumes for {av.shape[0]} atlas classes")
    if np.any(av <= 0):
        raise InvalidArgumentError("atlas volumes must be strictly positive")
    if np.any(mv < 0):
        raise InvalidArgumentError("moving volumes must be non-negative")
    ratio = mv / av
    total = ratio.sum()
    if total <= 0:
        raise NoAnatomyFoundError("no atlas class is present in the moving volume")
    return CoverageWeights(ratio / total)


def _weights_array(w):
    return w.w if isinstance(w, CoverageWeights) else np.asarray(w, dtype=np.float64)


def lsq_translation(x, y, w):
    """Weighted least-squares translation between landmark sets.

    Returns ``(t, residual)`` with ``t = sum_i w_i (y_i - x_i)`` and
    ``residual = sum_i w_i |x_i + t - y_i|^2``.
    """
    w = _weights_array(w)
    if isinstance(x, LandmarkSet):
        pts, present = x.points_mm, x.present
    else:
        pts = np.asarray(x, dtype=np.float64)
        present = np.all(np.isfinite(pts), axis=1)
    y = np.asarray(y, dtype=np.float64)
    used = w > 0
    if np.any(used & ~present):
        missing = (np.flatnonzero(used & ~present) + 1).tolist()
        raise InternalConsistencyError(f"positive weight on undefined landmarks for classes {missing}")
    d = y[used] - pts[used]
    wu = w[used]
    t = (wu[:, None] * d).sum(axis=0)
    residual = float((wu * ((d - t) ** 2).sum(axis=1)).sum())
    return t, residual


@dataclass(frozen=True)
class OrientationSearchResult:
    orientation: RestrictedOrientation
    translation_mm: np.ndarray
    residual: float
    residuals: dict
    weights: CoverageWeights
    landmarks: LandmarkSet = None  # moving landmarks after applying the chosen orientation


def orientation_search(seg_moving, atlas, weights=None, landmarks=None):
    """Try all 8 orientations of the moving landmarks; keep the lowest
    weighted residual. Ties resolve to the smallest ``(k_rot, flip_z)``.
    """
    if weights is None:
        weights = coverage_weights(_physical_volumes(seg_moving), _physical_volumes(atlas))
    lm = center_of_mass(seg_moving) if landmarks is None else landmarks
    center = seg_moving.center_mm
    best = None
    residuals = {}
    for o in RestrictedOrientation.all():
        pts = lm.points_mm.copy()
        pts[lm.present] = o.map_points(pts[lm.present], center)
        t, res = lsq_translation(LandmarkSet(pts, lm.present), atlas.landmarks_mm, weights)
        residuals[(o.k_rot, o.flip_z)] = res
        if best is None or res < best[2] or (res == best[2] and (o.k_rot, o.flip_z) < (best[0].k_rot, best[0].flip_z)):
            best = (o, t, res, pts)
    return OrientationSearchResult(best[0], best[1], best[2], residuals, weights, LandmarkSet(best[3], lm.present))


def _physical_volumes(vol):
    voxel_mm3 = float(np.prod(vol.spacing_mm))
    if hasattr(vol, "prob"):
        return np.asarray(vol.class_volumes) * voxel_mm3
    return class_volumes(vol) * voxel_mm3


def _dice_loss_from_terms(inter, moving_mass, atlas_mass, w):
    dice = (2.0 * inter + DICE_EPS) / (moving_mass + atlas_mass + DICE_EPS)
    return float(1.0 - np.dot(w, dice))


def soft_dice_loss(moving_soft, moving_grid, transform, atlas, w):
    """Weighted soft-Dice loss of soft moving masks warped onto the atlas grid.

    ``moving_soft`` is (C, nx, ny, nz) on ``moving_grid`` (anything with
    dims/spacing_mm/origin_mm); ``transform`` is ``(scale, translation_mm)`` or
    a :class:`RestrictedAffine`. Each channel is sampled trilinearly at
    ``(y - t) / s`` for every atlas node ``y``, zero outside its support.
    """
    if isinstance(transform, RestrictedAffine):
        scale, translation = transform.scale, transform.translation_mm
    else:
        scale, translation = transform
    warped = warp_axis_aligned(moving_soft, moving_grid, atlas, scale, translation)
    q = atlas.prob.astype(np.float64)
    inter = (warped * q).sum(axis=(1, 2, 3))
    return _dice_loss_from_terms(inter, warped.sum(axis=(1, 2, 3)), q.sum(axis=(1, 2, 3)), _weights_array(w))


_SUPPORT_CACHE = weakref.WeakKeyDictionary()


def _atlas_support(atlas):
    """Flattened (i, j, k, class, probability) lists of non-zero atlas entries."""
    try:
        return _SUPPORT_CACHE[atlas]
    except (KeyError, TypeError):
        pass
    nz = np.nonzero(atlas.prob)
    out = (
        np.ascontiguousarray(nz[1].astype(np.int64)),
        np.ascontiguousarray(nz[2].astype(np.int64)),
        np.ascontiguousarray(nz[3].astype(np.int64)),
        np.ascontiguousarray((nz[0] + 1).astype(np.int32)),
        np.ascontiguousarray(atlas.prob[nz].astype(np.float64)),
    )
    try:
        _SUPPORT_CACHE[atlas] = out
    except TypeError:
        pass
    return out


class LabelDiceObjective:
    """Fast evaluator of :func:`soft_dice_loss` for a one-hot label map.

    Only atlas nodes with non-zero probability contribute to the overlap
    term, and the moving mass of every class factorises over axes, so the
    loss is exact over the full atlas grid while touching only the supports.
    Classes with zero weight are skipped.
    """

    def __init__(self, seg_moving, atlas, w):
        self.grid = seg_moving
        self.atlas = atlas
        self.w = _weights_array(w)
        C = atlas.num_classes
        active = np.flatnonzero(self.w > 0) + 1
        self.labels = np.ascontiguousarray(seg_moving.voxels.astype(np.int32))

        support = _atlas_support(atlas)
        keep = np.isin(support[3], active)
        self._atlas_pts = tuple(np.ascontiguousarray(a[keep]) for a in support)

        fg = np.isin(self.labels, active)
        mi, mj, mk = (np.ascontiguousarray(a.astype(np.int64)) for a in np.nonzero(fg))
        self._moving_pts = (mi, mj, mk, np.ascontiguousarray(self.labels[fg]))
        self.atlas_mass = np.zeros(C + 1)
        self.atlas_mass[1:] = atlas.prob.sum(axis=(1, 2, 3), dtype=np.float64)
        self.n_evals = 0

    def terms(self, scale, translation_mm):
        tables = []
        for u, _n in axis_sample_indices(self.grid, self.atlas, scale, translation_mm):
            near = np.round(u)
            u = np.where(np.abs(u - near) < SNAP_TOL, near, u)
            i0 = np.floor(u)
            tables += [i0.astype(np.int64), u - i0]
        inter, mass = _kernels.dice_terms(self.labels, *self._atlas_pts, *self._moving_pts, *tables, self.atlas.num_classes)
        return inter, mass

    def __call__(self, scale, translation_mm):
        self.n_evals += 1
        inter, mass = self.terms(np.asarray(scale, float), np.asarray(translation_mm, float))
        return _dice_loss_from_terms(inter[1:], mass[1:], self.atlas_mass[1:], self.w)


def weighted_landmark_center(landmarks, w):
    """Coverage-weighted mean of the present landmarks (mm).

    ``landmarks`` is a :class:`LandmarkSet` or a label volume.
    """
    lm = landmarks if isinstance(landmarks, LandmarkSet) else center_of_mass(landmarks)
    w = _weights_array(w)
    used = (w > 0) & lm.present
    if not used.any():
        raise NoAnatomyFoundError("no weighted landmark is present")
    return (w[used, None] * lm.points_mm[used]).sum(axis=0) / w[used].sum()


class ScaleTranslationParams:
    """Normalised optimisation coordinates ``theta = (tau, s)``.

    Scaling acts about the moving landmark centre ``c``:
    ``T(x) = s * (x - c) + c + L * tau`` with translation unit ``L`` in mm,
    so at ``s = 1`` the translation is ``L * tau``.
    """

    def __init__(self, center_mm, unit_mm=TRANSLATION_UNIT_MM):
        self.c = np.asarray(center_mm, dtype=np.float64)
        self.L = np.broadcast_to(np.asarray(unit_mm, dtype=np.float64), (3,)).copy()

    def to_affine(self, theta):
        tau, s = theta[:3], theta[3:]
        return s, self.c + self.L * tau - s * self.c

    def from_affine(self, scale, translation_mm):
        s = np.asarray(scale, dtype=np.float64)
        tau = (np.asarray(translation_mm, dtype=np.float64) + s * self.c - self.c) / self.L
        return np.concatenate([tau, s])

    def from_translation(self, t0):
        return self.from_affine(np.ones(3), t0)


def central_difference_gradient(f, theta, steps):
    g = np.empty_like(theta)
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = steps[k]
        g[k] = (f(theta + e) - f(theta - e)) / (2.0 * steps[k])
    return g


@dataclass
class RefineResult:
    scale: np.ndarray
    translation_mm: np.ndarray
    loss_trace: list
    loss_init: float
    loss_final: float
    iterations: int
    step_reductions: int
    n_evals: int


def fd_steps(atlas, unit_mm=TRANSLATION_UNIT_MM):
    return np.concatenate([FD_STEP_VOXELS * atlas.spacing_mm / unit_mm, np.full(3, FD_STEP_SCALE)])


def refine_transform(
    seg_moving,
    atlas,
    t0,
    w,
    max_iterations=MAX_ITERATIONS,
    objective=None,
    *,
    center_mm=None,
    initial_step=INITIAL_STEP,
    min_decrease=MIN_DECREASE,
    max_step_reductions=MAX_STEP_REDUCTIONS,
    translation_unit_mm=TRANSLATION_UNIT_MM,
):
    """Gradient-descent refinement of scale and translation.

    ``seg_moving`` must already be orientation-normalised and on the atlas
    spacing. Each iteration moves ``theta`` by ``eta * g / max|g|`` with
    ``g`` from central differences; a candidate that lowers the loss is
    accepted, and whenever the loss falls by less than ``min_decrease`` the
    step is halved. The ``max_step_reductions``-th such event ends the
    descent, so the returned parameters are the best ones seen.
    """
    t0 = np.asarray(t0, dtype=np.float64)
    if not np.all(np.isfinite(t0)):
        raise InvalidArgumentError(f"initial translation must be finite, got {t0.tolist()}")
    if not np.any(seg_moving.voxels):
        raise InvalidArgumentError("moving segmentation is empty")
    f_obj = objective or LabelDiceObjective(seg_moving, atlas, w)
    if max_iterations < 0:
        raise InvalidArgumentError("max_iterations must be non-negative")
    if initial_step <= 0 or translation_unit_mm <= 0:
        raise InvalidArgumentError("initial_step and translation_unit_mm must be positive")
    if center_mm is None:
        center_mm = weighted_landmark_center(seg_moving, w)
    params = ScaleTranslationParams(center_mm, translation_unit_mm)
    steps = fd_steps(atlas, translation_unit_mm)

    def loss(theta):
        value = f_obj(*params.to_affine(theta))
        if not np.isfinite(value):
            s, t = params.to_affine(theta)
            raise NumericalFailureError("non-finite Dice loss", {"scale": s.tolist(), "translation_mm": t.tolist(), "loss": value})
        return value

    theta = params.from_translation(t0)
    current = loss(theta)
    loss_init = current
    trace = [current]
    eta = float(initial_step)
    reductions = 0
    iterations = 0
    grad = None
    lo, hi = SCALE_BOUNDS
    while iterations < max_iterations:
        if grad is None:
            grad = central_difference_gradient(loss, theta, steps)
        iterations += 1
        gmax = np.abs(grad).max()
        if gmax > 0:
            cand = theta - eta * grad / gmax
            cand[3:] = np.clip(cand[3:], lo, hi)
            cand_loss = loss(cand)
        else:
            cand, cand_loss = theta, current
        decrease = current - cand_loss
        if cand_loss < current:
            theta, current = cand, cand_loss
            trace.append(current)
            grad = None
        if decrease < min_decrease:
            reductions += 1
            if reductions >= max_step_reductions:
                break
            eta /= 2.0
    scale, translation = params.to_affine(theta)
    return RefineResult(
        scale=scale,
        translation_mm=translation,
        loss_trace=trace,
        loss_init=loss_init,
        loss_final=current,
        iterations=iterations,
        step_reductions=reductions,
        n_evals=f_obj.n_evals if hasattr(f_obj, "n_evals") else 0,
    )


@dataclass
class RegistrationReport:
    weights: np.ndarray
    residual_landmark: float
    residuals: dict
    translation_init_mm: np.ndarray
    loss_init: float
    loss_final: float
    iterations: int
    step_reductions: int
    loss_trace: list
    wall_time_s: float
    resampled: bool = False
    timings: dict = field(default_factory=dict)


@dataclass
class RegistrationResult:
    transform: RestrictedAffine
    report: RegistrationReport
    oriented: object = None  # orientation-normalised moving segmentation on the atlas spacing

    def to_json_dict(self):
        return transform_to_dict(self.transform, self.report)


def register(seg_moving, atlas):
    """Register a label map to the atlas; returns transform plus diagnostics."""
    t_start = time.perf_counter()
    timings = {}
    if seg_moving.num_classes != atlas.num_classes:
        raise InvalidArgumentError(
            f"moving volume has {seg_moving.num_classes} classes, atlas has {atlas.num_classes}"
        )
    seg = resample_labels(seg_moving, atlas.spacing_mm)
    resampled = seg is not seg_moving
    timings["resample"] = time.perf_counter() - t_start

    t = time.perf_counter()
    search = orientation_search(seg, atlas)
    timings["landmarks"] = time.perf_counter() - t
    oriented = apply_orientation(seg, search.orientation)

    t = time.perf_counter()
    center = weighted_landmark_center(search.landmarks, search.weights)
    ref = refine_transform(oriented, atlas, search.translation_mm, search.weights, center_mm=center)
    timings["refine"] = time.perf_counter() - t
    transform = RestrictedAffine(search.orientation, ref.scale, ref.translation_mm)
    wall = time.perf_counter() - t_start
    log.debug(
        "registered: orientation=%s scale=%s t=%s loss %.4f -> %.4f in %d iterations (%.3fs)",
        search.orientation, ref.scale, ref.translation_mm, ref.loss_init, ref.loss_final, ref.iterations, wall,
    )
    report = RegistrationReport(
        weights=search.weights.w,
        residual_landmark=search.residual,
        residuals=search.residuals,
        translation_init_mm=search.translation_mm,
        loss_init=ref.loss_init,
        loss_final=ref.loss_final,
        iterations=ref.iterations,
        step_reductions=ref.step_reductions,
        loss_trace=ref.loss_trace,
        wall_time_s=wall,
        resampled=resampled,
        timings=timings,
    )
    return RegistrationResult(transform, report, oriented)


def transform_to_dict(transform, report=None):
    d = {
        "schema_version": TRANSFORM_SCHEMA_VERSION,
        "k_rot": transform.orientation.k_rot,
        "flip_z": transform.orientation.flip_z,
        "scale": transform.scale.tolist(),
        "translation_mm": transform.translation_mm.tolist(),
        "weights": None,
        "loss_init": None,
        "loss_final": None,
        "residual_landmark": None,
    }
    if report is not None:
        d.update(
            weights=np.asarray(report.weights).tolist(),
            loss_init=report.loss_init,
            loss_final=report.loss_final,
            residual_landmark=report.residual_landmark,
        )
    return d


def transform_from_dict(d):
    version = d.get("schema_version")
    if version != TRANSFORM_SCHEMA_VERSION:
        raise InvalidArgumentError(f"unsupported transform schema_version {version!r}")
    return RestrictedAffine(RestrictedOrientation(int(d["k_rot"]), bool(d["flip_z"])), d["scale"], d["translation_mm"])


def save_transform(path, transform, report=None):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(transform_to_dict(transform, report), fh, indent=2)


def load_transform(path):
    with open(path, encoding="utf-8") as fh:
        return transform_from_dict(json.load(fh))
