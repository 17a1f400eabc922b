"""Data collection, bucketed sampling, training and closed-loop evaluation."""

from .buckets import Bucket, WeightedSampler, assign_buckets, default_buckets, weighted_sampler
from .data import (CollectionError, Dataset, collect_dataset, load_dataset, rollout_expert,
                   save_dataset)
from .evaluate import (ABLATION_ROWS, AblationTable, EpisodeMetrics, EvalReport, eval_pipeline_config,
                       evaluate_closed_loop, evaluate_policy, route_completion, run_ablation_matrix)
from .train import (Adam, TrainConfig, TrainingDiverged, TrainResult, compute_losses,
                    load_checkpoint, lr_schedule, save_checkpoint, train)

__all__ = [
    "Bucket", "WeightedSampler", "assign_buckets", "default_buckets", "weighted_sampler",
    "CollectionError", "Dataset", "collect_dataset", "load_dataset", "rollout_expert", "save_dataset",
    "ABLATION_ROWS", "AblationTable", "EpisodeMetrics", "EvalReport", "eval_pipeline_config",
    "evaluate_closed_loop", "evaluate_policy", "route_completion", "run_ablation_matrix",
    "Adam", "TrainConfig", "TrainingDiverged", "TrainResult", "compute_losses", "load_checkpoint",
    "lr_schedule", "save_checkpoint", "train",
]
