"""Desk-scale unsupervised part-based video re-identification engine.

Operates on precomputed feature maps: stripe partitioning and pooling,
local/global-aware feature modules with analytic gradients, per-part
anchor-based association learning, and fused-feature retrieval evaluation.
"""

from .dataset import (
    DatasetManifest,
    ImageRecord,
    SynthSpec,
    Tracklet,
    TrainingView,
    generate_synthetic,
    load_manifest,
    read_feature_map,
    save_manifest,
    write_feature_map,
)
from .features import GAP, GMP, compact_features, normalize, partition, pool
from .trainer import TrainConfig, load_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "DatasetManifest",
    "GAP",
    "GMP",
    "ImageRecord",
    "SynthSpec",
    "Tracklet",
    "TrainConfig",
    "TrainingView",
    "compact_features",
    "generate_synthetic",
    "load_checkpoint",
    "load_manifest",
    "normalize",
    "partition",
    "pool",
    "read_feature_map",
    "save_manifest",
    "train",
    "write_feature_map",
]
