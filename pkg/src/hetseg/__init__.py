"""Lesion segmentation trained on heterogeneously labelled MRI datasets.

A single four-head network predicts all-lesion maps at two timepoints plus
new and vanishing lesion maps. Datasets that label only some of these
targets still contribute, through masked Dice supervision and three
label-free constraint losses (longitudinal, volumetric, spatial).
"""

from .core import (
    ConfigError,
    ConsistencyError,
    DatasetManifest,
    FormatError,
    HetsegError,
    LabelSet,
    NumericalError,
    SubjectRecord,
    Timepoint,
    UnsupportedFormatError,
    ValidationError,
    Volume3D,
    load_manifest,
    load_volume,
    validate_label_consistency,
    write_volume,
)

__version__ = "0.1.0"
