"""Prototypical networks with a softmax feature-selection layer and a sample-weighting net."""

from .data import (Episode, GenConfig, MetaDataset, NoiseConfig, TaskTable, corrupt_support,
                   filter_min_class, generate_synthetic, load_meta_csv, sample_episode,
                   split_classes)
from .errors import (CapacityError, CheckpointError, ContractError, DimensionError,
                     IngestionError, NumericError, SelectProtoError)
from .evaluation import (AccuracyReport, FeatureRanking, WeightSeparation, convergence_stats,
                         evaluate, rank_features, repeat_runs, weight_histogram)
from .kernels import BACKEND
from .model import (VARIANTS, ModelBundle, classify, embed, episode_loss, predict, sample_weight,
                    select_features, weighted_prototypes)
from .training import (Checkpoint, TrainConfig, TrainHistory, load_checkpoint, save_checkpoint,
                       train)

__version__ = "0.1.0"

__all__ = [
    "AccuracyReport", "BACKEND", "CapacityError", "Checkpoint", "CheckpointError", "ContractError",
    "DimensionError", "Episode", "FeatureRanking", "GenConfig", "IngestionError", "MetaDataset",
    "ModelBundle", "NoiseConfig", "NumericError", "SelectProtoError", "TaskTable", "TrainConfig",
    "TrainHistory", "VARIANTS", "WeightSeparation", "classify", "convergence_stats",
    "corrupt_support", "embed", "episode_loss", "evaluate", "filter_min_class",
    "generate_synthetic", "load_checkpoint", "load_meta_csv", "predict", "rank_features",
    "repeat_runs", "sample_episode", "sample_weight", "save_checkpoint", "select_features",
    "split_classes", "train", "weight_histogram", "weighted_prototypes",
]
