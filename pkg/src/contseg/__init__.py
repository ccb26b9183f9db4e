"""Desk-scale continual semantic segmentation.

A tiny differentiable segmentation network plus the machinery to keep it
learning across class-incremental steps without old data: channel-wise
feature decoupling, relevance-consistency between frozen and current
models, prototype matching, sample-specific feature preserving, and
uncertainty-aware pseudo-labelling — all validated by property tests and
directional desk-scale experiments.
"""

from .data import (
    BACKGROUND_ID,
    IGNORE_ID,
    UNKNOWN_ID,
    ClassPartition,
    LabeledImage,
    ShapeClass,
    SyntheticSceneSpec,
    TaskSchedule,
    default_universe,
    generate_dataset,
    load_dataset,
    partition_for_step,
    save_dataset,
    split_for_step,
)
from .decouple import ChannelSimilarity, DecoupledEmbedding, channel_similarity, rank_and_split
from .distill import PrototypeStore, TripletBatch, build_triplets, distillation_loss, feature_preserving_loss, prototype_matching_loss, update_prototypes
from .errors import (
    CapabilityError,
    ConfigurationError,
    ContractError,
    ContsegError,
    DivergenceError,
    ProtocolError,
    UndefinedMetricError,
)
from .harness import DatasetConfig, ExperimentConfig, SweepConfig, compare_runs, run_experiment, toy_config
from .metrics import ConfusionMatrix, MetricsGroup, class_order_summary, metrics_group, miou, per_class_iou
from .net import FeatureBundle, NetConfig, SegNetwork, extend_head, forward, predict, snapshot
from .pseudo import CertaintyMaps, FusedLabelMap, assign_unknown, certainty_maps, fuse_labels, pseudo_labels
from .relevance import RelevanceField, class_relevance, consistency_loss, propagate_relevance
from .trainer import StepConfig, StepReport, TrainState, evaluate, run_schedule, run_step

__version__ = "0.1.0"
