"""Low-level grid helpers shared by the value types and the volume ops."""

import numpy as np


def as_vec3(values, name, positive=False):
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise ValueError(f"{name} must have 3 components, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite, got {arr.tolist()}")
    if positive and np.any(arr <= 0):
        raise ValueError(f"{name} must be strictly positive, got {arr.tolist()}")
    arr.setflags(write=False)
    return arr


def frozen(arr):
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


def grid_center(dims, spacing, origin):
    # the centre of the voxel-box extent coincides with the mean voxel centre
    return np.asarray(origin) + np.asarray(spacing) * (np.asarray(dims) - 1) / 2.0


def marginal_centroid_index(weights):
    """Weighted mean voxel index of a 3D weight array, or None if it has no mass.

    Computed from per-axis marginals so that one-hot inputs (integer sums)
    give bit-identical results regardless of how the weights were produced.
    """
    w = np.asarray(weights, dtype=np.float64)
    mass = w.sum()
    if mass <= 0:
        return None
    out = np.empty(3)
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        marginal = w.sum(axis=other)
        out[axis] = np.dot(marginal, np.arange(w.shape[axis], dtype=np.float64)) / mass
    return out


def index_to_mm(index, spacing, origin):
    return np.asarray(origin) + np.asarray(spacing) * np.asarray(index, dtype=np.float64)
