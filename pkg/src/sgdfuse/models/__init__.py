"""Value types for sgdfuse."""

from sgdfuse.models.dataset import DatasetEntry, DatasetIndex, Split
from sgdfuse.models.image import (
    ConditionedSample,
    FusedImage,
    FusedStage,
    Image,
    ImagePair,
    MaskPair,
    MaskProvenance,
    ValueRange,
    normalize,
    split_conditioned_sample,
    to_conditioned_sample,
)
from sgdfuse.models.manifest import RunManifest
from sgdfuse.models.network import HFAHConfig, MSFEMConfig, Stage1Config, TBConfig, UNetConfig
from sgdfuse.models.report import METRIC_NAMES, ImageMetrics, MetricReport

__all__ = [
    "METRIC_NAMES",
    "ConditionedSample",
    "DatasetEntry",
    "DatasetIndex",
    "FusedImage",
    "FusedStage",
    "HFAHConfig",
    "Image",
    "ImageMetrics",
    "ImagePair",
    "MSFEMConfig",
    "MaskPair",
    "MaskProvenance",
    "MetricReport",
    "RunManifest",
    "Split",
    "Stage1Config",
    "TBConfig",
    "UNetConfig",
    "ValueRange",
    "normalize",
    "split_conditioned_sample",
    "to_conditioned_sample",
]
