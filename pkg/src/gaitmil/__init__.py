"""Attention-guided multiple-instance learning over silhouette gait sequences."""

from .clustering import BagPartition, kmeans, partition_clip, partition_frames
from .data_io import (
    DatasetManifest,
    Label,
    ManifestEntry,
    SilhouetteSequence,
    SynthSpec,
    generate_synthetic,
    load_dataset,
    load_sequence,
    read_manifest,
    save_dataset,
)
from .errors import (
    ArgumentError,
    ConfigurationError,
    DatasetError,
    GaitMilError,
    NumericError,
    SchemaError,
)
from .evaluation import MetricsReport, compute_metrics, evaluate_split, predict
from .losses import LossBreakdown, ce_loss, total_loss, triplet_loss
from .network import GaitMILNet, ModelConfig, PartEmbeddingSet
from .sampling import (
    BatchPlan,
    ImbalanceSplit,
    SampledClip,
    build_imbalance_split,
    make_batch,
)
from .training import (
    TrainConfig,
    TrainState,
    fit,
    init_state,
    load_checkpoint,
    restore_state,
    save_checkpoint,
    train_step,
)

__version__ = "0.1.0"

__all__ = [
    "ArgumentError",
    "BagPartition",
    "BatchPlan",
    "ConfigurationError",
    "DatasetError",
    "DatasetManifest",
    "GaitMILNet",
    "GaitMilError",
    "ImbalanceSplit",
    "Label",
    "LossBreakdown",
    "ManifestEntry",
    "MetricsReport",
    "ModelConfig",
    "NumericError",
    "PartEmbeddingSet",
    "SampledClip",
    "SchemaError",
    "SilhouetteSequence",
    "SynthSpec",
    "TrainConfig",
    "TrainState",
    "build_imbalance_split",
    "ce_loss",
    "compute_metrics",
    "evaluate_split",
    "fit",
    "generate_synthetic",
    "init_state",
    "kmeans",
    "load_checkpoint",
    "load_dataset",
    "load_sequence",
    "make_batch",
    "partition_clip",
    "partition_frames",
    "predict",
    "read_manifest",
    "restore_state",
    "save_checkpoint",
    "save_dataset",
    "total_loss",
    "train_step",
    "triplet_loss",
]
