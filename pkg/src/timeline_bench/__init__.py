"""Benchmark toolkit for grouping news videos into timeline nodes."""

from .data import Dataset, GenConfig, TimelineSample, Video, generate_synthetic, parse_dataset, write_dataset
from .metrics import MetricsReport, ScoreConfig, SampleScore, score_dataset, score_sample
from .models import ModelConfig
from .train import Checkpoint, TrainConfig, evaluate, grid_search, predict, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "Dataset",
    "GenConfig",
    "MetricsReport",
    "ModelConfig",
    "SampleScore",
    "ScoreConfig",
    "TimelineSample",
    "TrainConfig",
    "Video",
    "evaluate",
    "generate_synthetic",
    "grid_search",
    "parse_dataset",
    "predict",
    "score_dataset",
    "score_sample",
    "train",
    "write_dataset",
]
