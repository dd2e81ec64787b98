"""Deformable image registration toolkit.

Dense displacement-field registration with differentiable n-linear warping,
intensity and overlap losses, a small encoder/decoder CNN that amortizes
registration across a dataset, per-pair optimization, and Dice / Jacobian
regularity evaluation.
"""

__version__ = "0.1.0"

from .grid import (
    DisplacementField,
    GridGeometry,
    GridImage,
    RegistrationPair,
    SegmentationMap,
    identity_displacement,
    onehot_from_labels,
)
from .losses import SEG_ONLY, LossWeights
from .warp import warp_image, warp_segmentation

__all__ = [
    "DisplacementField",
    "GridGeometry",
    "GridImage",
    "RegistrationPair",
    "SegmentationMap",
    "identity_displacement",
    "onehot_from_labels",
    "SEG_ONLY",
    "LossWeights",
    "warp_image",
    "warp_segmentation",
    "__version__",
]
