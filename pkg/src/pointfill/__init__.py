"""Iterative group-wise point-cloud completion of defective binary volumes."""

__version__ = "0.1.0"

from .cloud import PointCloud, cloud_from_volume, normalize
from .estimator import DefectCompleter
from .metrics import evaluate_case
from .pipeline import PipelineConfig, ReconstructionResult, complete_case
from .voxel import VoxelVolume, load_volume, save_volume

__all__ = [
    "DefectCompleter",
    "PipelineConfig",
    "PointCloud",
    "ReconstructionResult",
    "VoxelVolume",
    "cloud_from_volume",
    "complete_case",
    "evaluate_case",
    "load_volume",
    "normalize",
    "save_volume",
]
