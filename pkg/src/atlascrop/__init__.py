"""Atlas-based anatomical region cropping for labelled CT volumes.

Label maps are registered to a probabilistic atlas under a restricted affine
model (quarter turns in the axial plane, z flips, per-axis scaling and
translation), so boxes defined in atlas space map back to axis-aligned crops.
"""

from .errors import AtlasCropError
from .model import (
    DEFAULT_CLASS_NAMES,
    DEFAULT_SCHEMA,
    AtlasSegmentation,
    BoundingBox,
    CoverageWeights,
    Heatmap,
    ImageVolume,
    LabelSchema,
    LabelVolume,
    LandmarkSet,
    RegionDefinition,
    RestrictedAffine,
    RestrictedOrientation,
)
from .registration import register
from .atlas import build_atlas, load_atlas, save_atlas
from .regions import boxes_from_heatmap, crop_region, infer_region, map_box_to_voxels

__version__ = "0.1.0"
