"""Point clouds built from volumes, normalization, group splitting and augmentation."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .voxel import VoxelVolume, _atomic_write

#: normalized coordinates may leave [0, 1] by this much (jitter slack)
SLACK = 0.1


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class NormTransform:
    """``normalized = (world - shift) / scale`` with one isotropic scale (mm)."""

    shift: tuple
    scale: float

    def __post_init__(self):
        object.__setattr__(self, "shift", tuple(float(s) for s in self.shift))
        object.__setattr__(self, "scale", float(self.scale))
        if len(self.shift) != 3:
            raise ValueError("shift must have 3 components")
        if not np.isfinite(self.scale) or self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.shift)) / self.scale

    def inverse(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.scale + np.asarray(self.shift)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An unordered set of 3-D points.

    ``frame`` is ``"world_mm"`` or ``"normalized"``; normalized clouds keep the
    transform that maps them back to millimetres.
    """

    points: np.ndarray
    transform: NormTransform | None = None
    frame: str = "world_mm"

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        if self.frame not in ("world_mm", "normalized"):
            raise ValueError(f"unknown frame {self.frame!r}")
        if self.frame == "normalized" and self.transform is None:
            raise ValueError("a normalized cloud needs its transform")

    def __len__(self) -> int:
        return len(self.points)

    def with_points(self, points: np.ndarray) -> PointCloud:
        return PointCloud(points, self.transform, self.frame)

    def subset(self, index: np.ndarray) -> PointCloud:
        return self.with_points(self.points[np.asarray(index)])


def cloud_from_volume(v: VoxelVolume) -> PointCloud:
    """One point per foreground voxel, at the voxel centre in mm."""
    idx = np.argwhere(v.data)
    if len(idx) == 0:
        raise ValueError("volume has no foreground voxels")
    points = np.asarray(v.origin) + idx * np.asarray(v.spacing)
    return PointCloud(points)


def normalize(pc: PointCloud) -> PointCloud:
    """Shift to the per-axis minima and divide by the longest extent."""
    if pc.frame != "world_mm":
        raise ValueError("cloud is already normalized")
    if len(pc) == 0:
        raise ValueError("cannot normalize an empty cloud")
    lo = pc.points.min(axis=0)
    extent = float((pc.points.max(axis=0) - lo).max())
    if extent <= 0:
        raise ValueError("degenerate cloud: all points coincide")
    tf = NormTransform(lo, extent)
    return PointCloud(tf.apply(pc.points), tf, "normalized")


def denormalize(pc: PointCloud) -> PointCloud:
    if pc.frame != "normalized":
        return pc
    return PointCloud(pc.transform.inverse(pc.points))


def check_normalized(pc: PointCloud) -> None:
    if pc.frame != "normalized":
        raise ValueError("expected a normalized cloud")
    if len(pc) and (pc.points.min() < -SLACK or pc.points.max() > 1 + SLACK):
        raise ValueError("normalized coordinates fall outside the allowed slack")


def _clamp(points: np.ndarray) -> np.ndarray:
    return np.clip(points, -SLACK, 1 + SLACK)


@dataclass(frozen=True, eq=False)
class GroupSplit:
    """Fixed-size groups of point indices (into the original cloud).

    The final group is topped up with indices resampled from the whole cloud;
    ``n_padded`` says how many of its trailing entries are such padding.
    """

    groups: list
    permutation: np.ndarray
    group_in: int
    group_out: int
    n_padded: int = 0

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def unpadded(self, g: int) -> np.ndarray:
        grp = self.groups[g]
        if g == self.n_groups - 1 and self.n_padded:
            return grp[: len(grp) - self.n_padded]
        return grp

    def __eq__(self, other):
        if not isinstance(other, GroupSplit):
            return NotImplemented
        return (
            self.group_in == other.group_in
            and self.group_out == other.group_out
            and self.n_padded == other.n_padded
            and np.array_equal(self.permutation, other.permutation)
            and len(self.groups) == len(other.groups)
            and all(np.array_equal(a, b) for a, b in zip(self.groups, other.groups))
        )


def split_groups(pc: PointCloud, group_in: int, seed, group_out: int | None = None) -> GroupSplit:
    """Randomly permute the cloud and cut it into ``ceil(P / group_in)`` groups."""
    if group_in < 1:
        raise ValueError("group_in must be >= 1")
    n = len(pc)
    if n == 0:
        raise ValueError("cannot split an empty cloud")
    rng = as_rng(seed)
    perm = rng.permutation(n)
    n_groups = -(-n // group_in)
    groups = [perm[g * group_in:(g + 1) * group_in] for g in range(n_groups)]
    pad = n_groups * group_in - n
    if pad:
        groups[-1] = np.concatenate([groups[-1], rng.integers(0, n, size=pad)])
    return GroupSplit(
        groups=groups,
        permutation=perm,
        group_in=int(group_in),
        group_out=int(group_out if group_out is not None else group_in // 2),
        n_padded=int(pad),
    )


def merge(clouds: list[PointCloud]) -> PointCloud:
    if not clouds:
        raise ValueError("nothing to merge")
    first = clouds[0]
    for c in clouds[1:]:
        if c.frame != first.frame or c.transform != first.transform:
            raise ValueError("cannot merge clouds with different transforms")
    if len(clouds) == 1:
        return first
    return first.with_points(np.concatenate([c.points for c in clouds]))


def jitter(pc: PointCloud, sigma: float, seed) -> PointCloud:
    """Add isotropic Gaussian noise (normalized units)."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return pc
    noisy = pc.points + as_rng(seed).normal(0.0, sigma, size=pc.points.shape)
    if pc.frame == "normalized":
        noisy = _clamp(noisy)
    return pc.with_points(noisy)


@dataclass
class AugmentConfig:
    max_crop_fraction: float = 0.0
    max_angle: float = 0.0  # radians
    max_shift: float = 0.0  # normalized units, per axis


def rotation_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


@dataclass
class _Draw:
    perm: np.ndarray
    keep: np.ndarray
    rotation: np.ndarray
    shift: np.ndarray
    centre: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))

    def rigid(self, points: np.ndarray) -> np.ndarray:
        return (points - self.centre) @ self.rotation.T + self.centre + self.shift


def _draw(n: int, points: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> _Draw:
    perm = rng.permutation(n)
    keep = perm
    if cfg.max_crop_fraction > 0:
        frac = rng.uniform(0, cfg.max_crop_fraction)
        axis = int(rng.integers(3))
        high_side = bool(rng.integers(2))
        n_drop = int(np.floor(frac * n))
        if n - n_drop < 2:
            raise ValueError("crop would leave fewer than 2 points")
        if n_drop:
            coord = points[perm, axis]
            order = np.argsort(-coord if high_side else coord, kind="stable")
            keep = perm[np.sort(order[n_drop:])]
    rot = np.eye(3)
    if cfg.max_angle > 0:
        axis = rng.normal(size=3)
        rot = rotation_matrix(axis, rng.uniform(-cfg.max_angle, cfg.max_angle))
    shift = np.zeros(3)
    if cfg.max_shift > 0:
        shift = rng.uniform(-cfg.max_shift, cfg.max_shift, size=3)
    return _Draw(perm, keep, rot, shift)


def augment(pc: PointCloud, cfg: AugmentConfig, seed) -> PointCloud:
    """Permutation, axis-aligned crop, rotation about the unit-cube centre, shift."""
    if pc.frame != "normalized":
        raise ValueError("augmentation expects a normalized cloud")
    d = _draw(len(pc), pc.points, cfg, as_rng(seed))
    return pc.with_points(_clamp(d.rigid(pc.points[d.keep])))


def augment_pair(pc: PointCloud, target: PointCloud, cfg: AugmentConfig, seed):
    """Augment ``pc`` and move ``target`` by the same rigid motion (no crop)."""
    if pc.frame != "normalized" or target.frame != "normalized":
        raise ValueError("augmentation expects normalized clouds")
    d = _draw(len(pc), pc.points, cfg, as_rng(seed))
    return (
        pc.with_points(_clamp(d.rigid(pc.points[d.keep]))),
        target.with_points(_clamp(d.rigid(target.points))),
    )


# --------------------------------------------------------------------------
# PLY


def write_ply(pc: PointCloud, path: str | os.PathLike, binary: bool = False) -> None:
    """Write x, y, z as float32; normalized clouds get a ``norm`` comment."""
    pts = np.asarray(pc.points, dtype="<f4")
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0"]
    header.append(f"comment frame {pc.frame}")
    if pc.transform is not None:
        sx, sy, sz = pc.transform.shift
        header.append(f"comment norm {sx!r} {sy!r} {sz!r} {pc.transform.scale!r}")
    header += [
        f"element vertex {len(pts)}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    head = ("\n".join(header) + "\n").encode()
    if binary:
        body = pts.tobytes()
    else:
        body = "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in pts.tolist()).encode()
    _atomic_write(Path(path), head + body)


def read_ply(path: str | os.PathLike) -> PointCloud:
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    body_start = raw.index(b"\n", end) + 1
    header = raw[:end].decode("ascii").splitlines()
    fmt, n, props, transform, frame = None, None, [], None, None
    in_vertex = False
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "comment" and len(parts) >= 2 and parts[1] == "norm":
            vals = [float(p) for p in parts[2:6]]
            transform = NormTransform(vals[:3], vals[3])
        elif parts[0] == "comment" and len(parts) >= 3 and parts[1] == "frame":
            frame = parts[2]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            props.append((parts[1], parts[-1]))
    if n is None or [p[1] for p in props[:3]] != ["x", "y", "z"]:
        raise ValueError(f"{path}: expected vertex properties x, y, z")
    if any(p[0] not in ("float", "float32") for p in props):
        raise ValueError(f"{path}: only float32 vertex properties are supported")
    if fmt == "binary_little_endian":
        pts = np.frombuffer(raw[body_start:body_start + 4 * len(props) * n], dtype="<f4")
        pts = pts.reshape(n, len(props))[:, :3]
    elif fmt == "ascii":
        rows = raw[body_start:].decode("ascii").split("\n")[:n]
        pts = np.array([[float(t) for t in r.split()[:3]] for r in rows], dtype=np.float32)
    else:
        raise ValueError(f"{path}: unsupported PLY format {fmt!r}")
    pts = pts.astype(np.float64).reshape(-1, 3)
    if frame is None:
        frame = "normalized" if transform is not None else "world_mm"
    return PointCloud(pts, transform if frame == "normalized" else None, frame)
