"""Ensembling, post-processing and lesion-wise evaluation of brain tumor segmentations."""
from .core import (
    BinaryMask,
    LabelProbVolume,
    LabelSchema,
    LabelVolume,
    Region,
    RegionProbVolume,
    SingleRegionProb,
    VolumeGeometry,
    decode_labels,
    label_probs_to_region_probs,
    region_indicators,
    region_mask,
)
from .errors import (
    ConfigError,
    GeometryMismatchError,
    MissingInputError,
    NiftiFormatError,
    SchemaError,
    TumorPipeError,
)

__version__ = "0.1.0"

__all__ = [
    "BinaryMask",
    "ConfigError",
    "GeometryMismatchError",
    "LabelProbVolume",
    "LabelSchema",
    "LabelVolume",
    "MissingInputError",
    "NiftiFormatError",
    "Region",
    "RegionProbVolume",
    "SchemaError",
    "SingleRegionProb",
    "TumorPipeError",
    "VolumeGeometry",
    "decode_labels",
    "label_probs_to_region_probs",
    "region_indicators",
    "region_mask",
]
