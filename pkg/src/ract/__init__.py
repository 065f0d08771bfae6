"""Ranking-critical training of VAE recommenders with a learned metric critic."""

from .actor import Actor, ActorConfig
from .critic import Critic
from .data import InteractionMatrix, SplitSpec, load_matrix, save_matrix, synthesize
from .estimator import RaCTRecommender
from .metrics import MetricSpec, ndcg_at_r, recall_at_r
from .trainer import Trainer, TrainSchedule, evaluate

__all__ = [
    "Actor",
    "ActorConfig",
    "Critic",
    "InteractionMatrix",
    "MetricSpec",
    "RaCTRecommender",
    "SplitSpec",
    "Trainer",
    "TrainSchedule",
    "evaluate",
    "load_matrix",
    "ndcg_at_r",
    "recall_at_r",
    "save_matrix",
    "synthesize",
]

__version__ = "0.1.0"
