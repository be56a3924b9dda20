"""Regenerate the shipped region files from a phantom training family.

Each scan of the family is registered once to the canonical phantom atlas;
for every region, the scan's ROI (the structure plus an attached lesion) is
warped into atlas space and averaged into a heatmap, which is thresholded at
the region's default value and padded by 10 mm.

    python3 demos/make_default_regions.py [n_cases] [first_seed]
"""

import os
import sys
import time

from atlascrop.atlas import atlas_from_labels
from atlascrop.model import Heatmap
from atlascrop.phantom import CaseConfig, canonical_phantom, sample_case
from atlascrop.regions import (
    DEFAULT_MARGIN_MM,
    DEFAULT_THRESHOLDS,
    accumulate_heatmap,
    boxes_from_heatmap,
    region_filename,
    save_region,
)
from atlascrop.registration import register

OUT_DIR = os.path.join(os.path.dirname(__file__), "..", "src", "atlascrop", "data", "regions")


def main(n_cases=32, first_seed=500_000):
    atlas = atlas_from_labels(canonical_phantom())
    heatmaps = {name: Heatmap.empty_like(atlas) for name in DEFAULT_THRESHOLDS}
    t0 = time.perf_counter()
    for seed in range(first_seed, first_seed + n_cases):
        tf = None
        for name in DEFAULT_THRESHOLDS:
            case = sample_case(seed, CaseConfig(lesion_structure=name))
            if tf is None:
                tf = register(case.seg, atlas).transform
            heatmaps[name] = accumulate_heatmap(heatmaps[name], case.roi, tf)
        print(f"seed {seed}: registered ({time.perf_counter() - t0:.0f}s)")
    os.makedirs(OUT_DIR, exist_ok=True)
    for name, threshold in DEFAULT_THRESHOLDS.items():
        region = boxes_from_heatmap(heatmaps[name], threshold, DEFAULT_MARGIN_MM, name)
        path = os.path.join(OUT_DIR, region_filename(name))
        save_region(region, path)
        print(f"{name:16s} threshold {threshold:<6} {len(region.boxes)} box(es), {region.volume_mm3 / 1e3:8.1f} cm^3 -> {path}")


if __name__ == "__main__":
    args = [int(a) for a in sys.argv[1:]]
    main(*args)
