"""Crop a scan to anatomical regions and measure what survives.

A phantom scan carries a lesion attached to a chosen organ. The scan is
registered to the atlas, the shipped region boxes are mapped into it and
cropped; preserved foreground is the share of ROI voxels kept, and the
fraction ratio shows how much tighter the crop is than the whole scan.
A chest-only scan shows what happens to boxes outside the field of view.

    python3 demos/crop_regions.py
"""

import numpy as np

from atlascrop.atlas import atlas_from_labels
from atlascrop.errors import OutsideFieldOfViewError
from atlascrop.metrics import crop_metrics
from atlascrop.phantom import CaseConfig, canonical_phantom, sample_case
from atlascrop.regions import crop_region, default_region
from atlascrop.volume import apply_orientation

atlas = atlas_from_labels(canonical_phantom())

print(f"{'region':18s} {'boxes':>5s} {'preserved':>10s} {'fg before':>10s} {'fg after':>10s} {'crop voxels':>12s}")
for name in ("liver", "kidneys", "pancreas", "spleen", "urinary bladder", "lungs"):
    case = sample_case(4242, CaseConfig(lesion_structure=name))
    region = default_region(name)
    crops, report = crop_region(case.image, case.seg, atlas, region)
    roi = apply_orientation(case.roi, report.transform.orientation)
    ranges = [tuple((lo, hi + 1) for lo, hi in zip(e["index_min"], e["index_max"])) for e in report.boxes if e["status"] == "ok"]
    m = crop_metrics(roi.voxels > 0, ranges)
    n_vox = sum(int(np.prod(c.dims)) for c in crops if c is not None)
    print(f"{name:18s} {len(region.boxes):5d} {m['preserved_pct']:9.2f}% {m['fg_fraction_before']:10.4f} "
          f"{m['fg_fraction_after']:10.4f} {n_vox:12d}")

# a scan covering only the chest
chest = sample_case(4243, CaseConfig(fov_z_mm=(-40.0, 60.0)))
print(f"\nchest-only scan: {chest.seg.dims}")
for name in ("lungs", "urinary bladder"):
    try:
        crops, report = crop_region(chest.image, chest.seg, atlas, default_region(name))
        print(f"  {name}: " + ", ".join(f"{e['status']} clipped {np.round(e['clipped_fraction'], 2).tolist()}" for e in report.boxes))
    except OutsideFieldOfViewError as exc:
        print(f"  {name}: {exc}")
