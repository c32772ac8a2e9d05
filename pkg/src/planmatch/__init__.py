"""Node-level matching of partial robot-built scene graphs to floor plans."""

__version__ = "0.1.0"

from .graphs import (
    EdgeType,
    FeatureStats,
    GraphError,
    NodeRecord,
    NodeType,
    SceneGraph,
    augment_edges,
    build_feature_vector,
    compute_feature_stats,
    load_graph,
    save_graph,
    standardize_features,
)
from .datagen import (
    Corpus,
    CorpusSample,
    DatagenError,
    GenParams,
    GroundTruth,
    NoiseParams,
    generate_corpus,
    generate_floorplan,
    load_corpus,
    perturb,
    save_corpus,
    stratified_split,
)
from .matching import (
    MatchResult,
    MatchingError,
    SoftAssignment,
    affinity,
    brute_force_assignment,
    hungarian,
    instance_normalize,
    match,
    pad_dummy_columns,
    sinkhorn,
    sinkhorn_backward,
)
from .nn import ArchConfig, EncoderParams, Mode, encoder_forward, load_weights, save_weights
from .training import TrainConfig, TrainResult, TrainingError, permutation_loss, train
from .evaluation import MetricsReport, evaluate_matcher, report_table, score, time_harness

__all__ = [
    "ArchConfig",
    "Corpus",
    "CorpusSample",
    "DatagenError",
    "EdgeType",
    "EncoderParams",
    "FeatureStats",
    "GenParams",
    "GraphError",
    "GroundTruth",
    "MatchResult",
    "MatchingError",
    "MetricsReport",
    "Mode",
    "NodeRecord",
    "NodeType",
    "NoiseParams",
    "SceneGraph",
    "SoftAssignment",
    "TrainConfig",
    "TrainResult",
    "TrainingError",
    "affinity",
    "augment_edges",
    "brute_force_assignment",
    "build_feature_vector",
    "compute_feature_stats",
    "encoder_forward",
    "evaluate_matcher",
    "generate_corpus",
    "generate_floorplan",
    "hungarian",
    "instance_normalize",
    "load_corpus",
    "load_graph",
    "load_weights",
    "match",
    "pad_dummy_columns",
    "permutation_loss",
    "perturb",
    "report_table",
    "save_corpus",
    "save_graph",
    "save_weights",
    "score",
    "sinkhorn",
    "sinkhorn_backward",
    "standardize_features",
    "stratified_split",
    "time_harness",
    "train",
]
