"""Gradient-based spectral clustering over sets of attention affinity graphs.

The engine optimizes a pseudo-eigenvector field against one or many affinity
graphs built from Q/K/V features, orthogonalizes it, decodes segmentations,
and evaluates them. Exact dense eigensolvers are included as oracles.
"""

from eigenfield.tensor_store import (
    EigenField,
    FeatureBundle,
    Manifest,
    SegmentationMap,
    TensorRecord,
    load_bundle,
    load_eigenfield,
    load_manifest,
    load_segmentation,
    load_tensor,
    save_eigenfield,
    save_segmentation,
)

__version__ = "0.1.0"

__all__ = [
    "EigenField",
    "FeatureBundle",
    "Manifest",
    "SegmentationMap",
    "TensorRecord",
    "load_bundle",
    "load_eigenfield",
    "load_manifest",
    "load_segmentation",
    "load_tensor",
    "save_eigenfield",
    "save_segmentation",
]
