"""Evaluation metrics: overlap, correlation and crop statistics."""

from __future__ import annotations

import json

import numpy as np

from .errors import InvalidArgumentError, UndefinedNCCError


def _same_shape(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def dice_score(a, b):
    """2|a & b| / (|a| + |b|); 1.0 when both masks are empty."""
    a, b = _same_shape(a, b)
    a, b = a.astype(bool), b.astype(bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def ncc(a, b):
    """Pearson correlation of voxel values."""
    a, b = _same_shape(a, b)
    a = a.astype(np.float64).ravel()
    b = b.astype(np.float64).ravel()
    da, db = a - a.mean(), b - b.mean()
    na, nb = np.sqrt(np.dot(da, da)), np.sqrt(np.dot(db, db))
    if na == 0 or nb == 0:
        raise UndefinedNCCError("NCC is undefined for a constant volume")
    return float(np.clip(np.dot(da, db) / (na * nb), -1.0, 1.0))


def box_union_mask(shape, boxes):
    """Mask of the union of half-open index ranges ``((x0, x1), (y0, y1), (z0, z1))``."""
    mask = np.zeros(shape, dtype=bool)
    for box in boxes:
        for (lo, hi), n in zip(box, shape):
            if lo < 0 or hi > n or lo > hi:
                raise InvalidArgumentError(f"box {box} is not within volume of shape {shape}")
        mask[tuple(slice(lo, hi) for lo, hi in box)] = True
    return mask


def crop_metrics(fg, boxes):
    """Preserved foreground (%) and foreground fractions before/after cropping.

    ``boxes`` are half-open index ranges on ``fg``'s grid. Overlapping boxes
    are counted once.
    """
    fg = np.asarray(fg).astype(bool)
    inside = box_union_mask(fg.shape, boxes)
    n_fg = int(fg.sum())
    kept = int((fg & inside).sum())
    n_box = int(inside.sum())
    return {
        "preserved_pct": 100.0 if n_fg == 0 else 100.0 * kept / n_fg,
        "fg_fraction_before": n_fg / fg.size if fg.size else 0.0,
        "fg_fraction_after": kept / n_box if n_box else 0.0,
        "n_foreground": n_fg,
        "n_preserved": kept,
        "n_box_voxels": n_box,
    }


TABLE_ROWS = (
    ("preserved foreground", "preserved_pct"),
    ("foreground voxels before cropping", "fg_fraction_before"),
    ("foreground voxels after cropping", "fg_fraction_after"),
    ("correct orientation", "orientation_correct_pct"),
    ("exec. speed", "seconds_per_case"),
)


def summarize_cases(rows):
    """Aggregate per-case dicts into one table column (means; orientation as %)."""
    out = {}
    if not rows:
        return out
    for key in ("preserved_pct", "fg_fraction_before", "fg_fraction_after", "seconds_per_case"):
        vals = [r[key] for r in rows if r.get(key) is not None]
        if vals:
            out[key] = float(np.mean(vals))
    flags = [r["orientation_correct"] for r in rows if "orientation_correct" in r]
    if flags:
        out["orientation_correct_pct"] = 100.0 * float(np.mean(flags))
    out["n_cases"] = len(rows)
    return out


def table_rows(summary, task):
    """JSON-ready rows ``{row, task, value}`` in a fixed order."""
    return [{"row": row, "task": task, "value": summary.get(key)} for row, key in TABLE_ROWS if key in summary]


def write_json_rows(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")
