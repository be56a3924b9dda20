"""Register a few synthetic scans to the canonical phantom atlas.

Each scan is a resampled, scaled, shifted and re-oriented copy of the
phantom, so the transform that registration should find is known. The
script prints the recovered transform next to the truth, then the loss
trace of the Dice refinement for the last case.

    python3 demos/register_phantom.py [n_cases]
"""

import sys
import time

import numpy as np

from atlascrop.atlas import atlas_from_labels
from atlascrop.phantom import canonical_phantom, sample_case
from atlascrop.registration import register


def main(n_cases=5):
    atlas = atlas_from_labels(canonical_phantom())
    print(f"atlas grid {atlas.dims}, spacing {atlas.spacing_mm[0]:g} mm, {atlas.num_classes} classes")
    register(sample_case(0).seg, atlas)  # compile the loss kernel once

    for seed in range(1, n_cases + 1):
        case = sample_case(seed)
        t = time.perf_counter()
        res = register(case.seg, atlas)
        dt = time.perf_counter() - t
        tf, truth = res.transform, case.truth
        print(f"\nseed {seed}: scan grid {case.seg.dims}  ({dt:.2f} s)")
        print(f"  orientation  found (k={tf.orientation.k_rot}, flip={tf.orientation.flip_z})"
              f"  truth (k={truth.orientation.k_rot}, flip={truth.orientation.flip_z})")
        print(f"  scale        found {np.round(tf.scale, 3)}  truth {np.round(truth.scale, 3)}")
        print(f"  translation  found {np.round(tf.translation_mm, 1)}  truth {np.round(truth.translation_mm, 1)} mm")
        print(f"  loss {res.report.loss_init:.4f} -> {res.report.loss_final:.4f} in {res.report.iterations} iterations")

    # how the refinement converged on the last case: the step halves every
    # time progress stalls and stops at the fourth halving
    print("\nloss trace:", " ".join(f"{v:.4f}" for v in res.report.loss_trace))


if __name__ == "__main__":
    main(*(int(a) for a in sys.argv[1:]))
