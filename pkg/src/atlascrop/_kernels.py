"""Compiled inner loops for the label-map Dice objective."""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def _axis_mass(i0, f, n):
    # total interpolation weight each source index receives along one axis
    out = np.zeros(n)
    for i in range(i0.shape[0]):
        a = i0[i]
        if 0 <= a < n:
            out[a] += 1.0 - f[i]
        if 0 <= a + 1 < n:
            out[a + 1] += f[i]
    return out


@njit(cache=True, nogil=True)
def dice_terms(labels, ai, aj, ak, acls, aq, mi, mj, mk, mcls, i0x, fx, i0y, fy, i0z, fz, n_classes):
    """Soft-Dice sums for a one-hot moving label map sampled trilinearly.

    Returns ``(inter, moving_mass)`` indexed by class id (0 unused):
    ``inter[c] = sum_y q_c(y) p_c(y)`` over the listed atlas support points and
    ``moving_mass[c] = sum_y p_c(y)`` over the whole atlas grid.
    """
    nx, ny, nz = labels.shape
    inter = np.zeros(n_classes + 1)
    for p in range(ai.shape[0]):
        c = acls[p]
        x0 = i0x[ai[p]]
        y0 = i0y[aj[p]]
        z0 = i0z[ak[p]]
        wx1 = fx[ai[p]]
        wy1 = fy[aj[p]]
        wz1 = fz[ak[p]]
        acc = 0.0
        for dx in range(2):
            xx = x0 + dx
            if xx < 0 or xx >= nx:
                continue
            wx = wx1 if dx else 1.0 - wx1
            if wx == 0.0:
                continue
            for dy in range(2):
                yy = y0 + dy
                if yy < 0 or yy >= ny:
                    continue
                wy = wy1 if dy else 1.0 - wy1
                if wy == 0.0:
                    continue
                for dz in range(2):
                    zz = z0 + dz
                    if zz < 0 or zz >= nz:
                        continue
                    if labels[xx, yy, zz] == c:
                        acc += wx * wy * (wz1 if dz else 1.0 - wz1)
        inter[c] += aq[p] * acc

    cx = _axis_mass(i0x, fx, nx)
    cy = _axis_mass(i0y, fy, ny)
    cz = _axis_mass(i0z, fz, nz)
    mass = np.zeros(n_classes + 1)
    for v in range(mi.shape[0]):
        mass[mcls[v]] += cx[mi[v]] * cy[mj[v]] * cz[mk[v]]
    return inter, mass
