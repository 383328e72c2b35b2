from .checkpoint import CheckpointError, load_model, save_model
from .config import ModelConfig
from .network import (
    CompletionTransformer,
    TrainingDivergedError,
    complete_group,
    farthest_point_sampling,
    seed_lattice,
)
from .train import TrainConfig, TrainResult, make_pair, train

__all__ = [
    "CheckpointError",
    "CompletionTransformer",
    "ModelConfig",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "complete_group",
    "farthest_point_sampling",
    "load_model",
    "make_pair",
    "save_model",
    "seed_lattice",
    "train",
]
