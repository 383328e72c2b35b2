"""Input checks shared by the estimator, the pipeline and the CLI."""

from __future__ import annotations

import numpy as np

from .cloud import PointCloud
from .voxel import VoxelVolume, check_same_grid


def check_points(points, name: str = "points", min_points: int = 1) -> np.ndarray:
    """Coerce to a finite float64 ``(n, 3)`` array."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3), got {arr.shape}")
    if len(arr) < min_points:
        raise ValueError(f"{name} needs at least {min_points} points, got {len(arr)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return arr


def check_cloud(pc, frame: str | None = None) -> PointCloud:
    if not isinstance(pc, PointCloud):
        pc = PointCloud(check_points(pc))
    if frame is not None and pc.frame != frame:
        raise ValueError(f"expected a {frame} cloud, got {pc.frame}")
    return pc


def check_volume(v, allow_empty: bool = False, name: str = "volume") -> VoxelVolume:
    if isinstance(v, np.ndarray):
        v = VoxelVolume(v)
    if not isinstance(v, VoxelVolume):
        raise TypeError(f"{name} must be a VoxelVolume or a 3-D array, got {type(v).__name__}")
    if not allow_empty and v.count == 0:
        raise ValueError(f"{name} has no foreground voxels")
    return v


def check_volume_pairs(X, y=None) -> tuple[list[VoxelVolume], list[VoxelVolume] | None]:
    """Validate aligned sequences of defective volumes and their defects."""
    if isinstance(X, (VoxelVolume, np.ndarray)):
        X = [X]
    X = [check_volume(v, name=f"X[{i}]") for i, v in enumerate(X)]
    if not X:
        raise ValueError("X is empty")
    if y is None:
        return X, None
    if isinstance(y, (VoxelVolume, np.ndarray)):
        y = [y]
    if len(y) != len(X):
        raise ValueError(f"X has {len(X)} volumes but y has {len(y)}")
    y = [check_volume(v, name=f"y[{i}]") for i, v in enumerate(y)]
    for a, b in zip(X, y):
        check_same_grid(a, b)
    return X, y
