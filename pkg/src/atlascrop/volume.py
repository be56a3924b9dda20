"""Grid-level operations on label and image volumes."""

from __future__ import annotations

import numpy as np

from ._grid import as_vec3, grid_center
from .errors import EmptyCropError, InvalidArgumentError
from .model import ImageVolume, LabelVolume, LandmarkSet, RestrictedOrientation

# sample positions closer than this (in voxels) to a grid node are snapped onto it
SNAP_TOL = 1e-9


def _target_spacing(target_spacing_mm):
    if np.isscalar(target_spacing_mm):
        target_spacing_mm = (target_spacing_mm,) * 3
    try:
        return as_vec3(target_spacing_mm, "target_spacing_mm", positive=True)
    except ValueError as exc:
        raise InvalidArgumentError(str(exc)) from None


def nearest_indices(coords, n):
    """Nearest grid node for continuous indices; ties go to the lower index."""
    idx = np.ceil(np.asarray(coords) - 0.5).astype(np.int64)
    return np.clip(idx, 0, n - 1)


def resample_labels(vol, target_spacing_mm):
    """Nearest-neighbour resampling of a label map onto a new spacing.

    The output grid keeps the physical centre of the input and as many voxels
    as fit the same extent (rounded), so extents agree within one output voxel.
    """
    target = _target_spacing(target_spacing_mm)
    if np.array_equal(target, vol.spacing_mm):
        return vol
    dims_in = np.asarray(vol.dims)
    dims_out = np.maximum(1, np.round(dims_in * vol.spacing_mm / target).astype(np.int64))
    center = vol.center_mm
    origin_out = center - target * (dims_out - 1) / 2.0
    idx = []
    for ax in range(3):
        pos = origin_out[ax] + target[ax] * np.arange(dims_out[ax])
        idx.append(nearest_indices((pos - vol.origin_mm[ax]) / vol.spacing_mm[ax], dims_in[ax]))
    out = vol.voxels[np.ix_(*idx)]
    return LabelVolume(out, target, origin_out, vol.num_classes)


def orient_array(arr, o):
    """Rotate the first two axes ``o.k_rot`` quarter turns, then reverse axis 2 if flipped.

    A quarter turn sends index (i, j) to (j, nx - 1 - i). Extra leading axes
    are not supported; pass channels one at a time or use ``orient_channels``.
    """
    out = arr
    for _ in range(o.k_rot):
        out = np.flip(out, axis=0).swapaxes(0, 1)
    if o.flip_z:
        out = np.flip(out, axis=2)
    return np.ascontiguousarray(out)


def orient_channels(arr, o):
    """``orient_array`` applied to the trailing three axes of a (C, nx, ny, nz) array."""
    return np.stack([orient_array(a, o) for a in arr]) if len(arr) else arr


def oriented_origin(vol, o):
    """Origin of the re-oriented grid; the physical centre stays fixed."""
    spacing = np.asarray(o.permute_axes(vol.spacing_mm))
    dims = np.asarray(o.permute_axes(vol.dims))
    return grid_center(vol.dims, vol.spacing_mm, vol.origin_mm) - spacing * (dims - 1) / 2.0


def apply_orientation(vol, o):
    """Re-orient a volume by pure axis permutation/reversal; no interpolation.

    Physical coordinates transform as ``o.map_points(p, vol.center_mm)``.
    """
    if o.is_identity:
        return vol
    spacing = np.asarray(o.permute_axes(vol.spacing_mm))
    origin = oriented_origin(vol, o)
    if isinstance(vol, LabelVolume):
        return LabelVolume(orient_array(vol.voxels, o), spacing, origin, vol.num_classes)
    if isinstance(vol, ImageVolume):
        return ImageVolume(orient_array(vol.data, o), spacing, origin)
    raise InvalidArgumentError(f"cannot orient {type(vol).__name__}")


def _label_index_sums(vol):
    # per-slice histograms give exact integer index sums without a coordinate grid
    C = vol.num_classes
    lab = vol.voxels
    counts = np.bincount(lab.ravel(), minlength=C + 1).astype(np.float64)
    sums = np.zeros((C + 1, 3))
    for ax in range(3):
        moved = np.moveaxis(lab, ax, 0)
        for i in range(1, moved.shape[0]):
            sums[:, ax] += i * np.bincount(moved[i].ravel(), minlength=C + 1)[: C + 1]
    return counts[: C + 1], sums


def center_of_mass(vol):
    """Unweighted centroid (mm) of every class; absent classes are marked not present."""
    counts, sums = _label_index_sums(vol)
    counts, sums = counts[1:], sums[1:]
    present = counts > 0
    pts = np.full((vol.num_classes, 3), np.nan)
    mean_idx = sums[present] / counts[present, None]
    pts[present] = vol.origin_mm + vol.spacing_mm * mean_idx
    return LandmarkSet(pts, present)


def class_volumes(vol):
    """Voxel count per class 1..C."""
    return np.bincount(vol.voxels.ravel(), minlength=vol.num_classes + 1)[1:].astype(np.float64)


def clip_ranges(ranges, dims):
    return tuple((max(0, int(lo)), min(int(n), int(hi))) for (lo, hi), n in zip(ranges, dims))


def crop(vol, box_vox):
    """Copy out the half-open index ranges ``((x0, x1), (y0, y1), (z0, z1))``."""
    ranges = clip_ranges(box_vox, vol.dims)
    if any(hi <= lo for lo, hi in ranges):
        raise EmptyCropError(ranges)
    sl = tuple(slice(lo, hi) for lo, hi in ranges)
    origin = vol.origin_mm + vol.spacing_mm * np.array([lo for lo, _ in ranges])
    if isinstance(vol, LabelVolume):
        return LabelVolume(vol.voxels[sl].copy(), vol.spacing_mm, origin, vol.num_classes)
    return ImageVolume(vol.data[sl].copy(), vol.spacing_mm, origin)


def to_soft_masks(vol, dtype=np.float64):
    """One float channel per class; shape (C, nx, ny, nz)."""
    classes = np.arange(1, vol.num_classes + 1, dtype=vol.voxels.dtype)
    return (vol.voxels[None] == classes[:, None, None, None]).astype(dtype)


def linear_interp_matrix(src_index):
    """Dense (len(src_index), n_src) matrix of 1D linear-interpolation weights.

    ``src_index`` are continuous source indices; the source is zero-padded,
    so a sample half a voxel outside the grid still sees half of the edge value.
    """
    u, n = src_index
    u = np.asarray(u, dtype=np.float64)
    near = np.round(u)
    u = np.where(np.abs(u - near) < SNAP_TOL, near, u)
    i0 = np.floor(u).astype(np.int64)
    f = u - i0
    M = np.zeros((u.size, n))
    rows = np.arange(u.size)
    for idx, wt in ((i0, 1.0 - f), (i0 + 1, f)):
        ok = (idx >= 0) & (idx < n) & (wt > 0)
        M[rows[ok], idx[ok]] = wt[ok]
    return M


def axis_sample_indices(src, dst, scale, translation_mm):
    """Per-axis continuous source indices for every destination node.

    Destination point ``y`` samples the source at ``(y - t) / s``.
    """
    out = []
    for ax in range(3):
        y = dst.origin_mm[ax] + dst.spacing_mm[ax] * np.arange(dst.dims[ax])
        x = (y - translation_mm[ax]) / scale[ax]
        out.append(((x - src.origin_mm[ax]) / src.spacing_mm[ax], src.dims[ax]))
    return out


def warp_axis_aligned(data, src, dst, scale, translation_mm):
    """Trilinear resampling of ``data`` (on ``src``'s grid) onto ``dst``'s grid.

    The map is axis-aligned, so the 3D interpolation factorises into three
    1D interpolation matrices applied in turn. ``data`` may carry a leading
    channel axis.
    """
    mats = [linear_interp_matrix(a) for a in axis_sample_indices(src, dst, np.asarray(scale), np.asarray(translation_mm))]
    arr = np.asarray(data, dtype=np.float64)
    lead = arr.ndim - 3
    for ax, M in enumerate(mats):
        arr = np.moveaxis(np.tensordot(M, arr, axes=([1], [lead + ax])), 0, lead + ax)
    return arr
