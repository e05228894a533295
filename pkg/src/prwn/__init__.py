"""Prototypical networks trained with a prototypical random-walk loss."""

from .episodes import (Dataset, DatasetSplit, Episode, EpisodeSpec, generate_synthetic_dataset,
                       load_dataset, sample_episode, save_dataset, split_dataset)
from .prw import LossBreakdown, PRWConfig, WalkGraph, build_walk_graph
from .protonet import EmbeddingNet
from .trainer import TrainConfig, train

__version__ = "0.1.0"
