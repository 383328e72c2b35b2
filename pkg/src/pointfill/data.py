"""Dataset discovery, spacing resampling and synthetic shell phantoms.

Supported directory layouts (volumes may be ``.nrrd`` or sidecar ``.json``):

``skullbreak``::

    <root>/training/defective_skull/<class>/<id>.nrrd
    <root>/training/implant/<class>/<id>.nrrd        (ground-truth defect)
    <root>/training/complete_skull/<id>.nrrd         (optional)
    <root>/testing/...                               (same structure)

``skullfix``::

    <root>/training_set/defective_skull/<id>.nrrd
    <root>/training_set/implant/<id>.nrrd
    <root>/training_set/complete_skull/<id>.nrrd     (optional)
    <root>/test_set/...                              (same structure)

SkullFix volumes are ``512 x 512 x Z``; the axial extent is read from each
file header, never assumed.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .voxel import VoxelVolume, save_volume

log = logging.getLogger(__name__)

SKULLBREAK_CLASSES = ("bilateral", "frontoorbital", "parietotemporal", "random_1", "random_2")
_LAYOUT_SPLITS = {
    "skullbreak": {"train": "training", "test": "testing"},
    "skullfix": {"train": "training_set", "test": "test_set"},
}
_VOLUME_SUFFIXES = (".nrrd", ".json")


@dataclass(frozen=True)
class CaseRecord:
    id: str
    defective: Path
    defect: Path | None
    complete: Path | None = None
    defect_class: str | None = None
    split: str = "train"
    missing_ground_truth: bool = False


def _volumes(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        return {}
    found = {}
    for p in sorted(directory.iterdir()):
        if p.is_file() and p.suffix.lower() in _VOLUME_SUFFIXES:
            found.setdefault(p.stem, p)
    return found


def scan_dataset(root: str | os.PathLike, layout: str = "skullbreak") -> list[CaseRecord]:
    """Enumerate the cases under ``root``.

    Cases whose ground-truth defect file is absent are returned with
    ``missing_ground_truth=True`` rather than dropped.
    """
    if layout not in _LAYOUT_SPLITS:
        raise ValueError(f"unknown layout {layout!r}; choose skullbreak or skullfix")
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} is not a readable directory")
    records: list[CaseRecord] = []
    for split, dirname in _LAYOUT_SPLITS[layout].items():
        base = root / dirname
        complete = _volumes(base / "complete_skull")
        if layout == "skullbreak":
            defective_dir = base / "defective_skull"
            classes = sorted(p.name for p in defective_dir.iterdir() if p.is_dir()) if defective_dir.is_dir() else []
            groups = [(c, defective_dir / c, base / "implant" / c) for c in classes]
        else:
            groups = [(None, base / "defective_skull", base / "implant")]
        for cls, ddir, idir in groups:
            implants = _volumes(idir)
            for stem, path in _volumes(ddir).items():
                defect = implants.get(stem)
                records.append(
                    CaseRecord(
                        id=f"{cls}/{stem}" if cls else stem,
                        defective=path,
                        defect=defect,
                        complete=complete.get(stem),
                        defect_class=cls,
                        split=split,
                        missing_ground_truth=defect is None,
                    )
                )
    if not records:
        raise FileNotFoundError(f"no {layout} cases found under {root}")
    n_train = sum(r.split == "train" for r in records)
    n_missing = sum(r.missing_ground_truth for r in records)
    log.info("%s: %d train / %d test cases, %d without ground truth",
             root, n_train, len(records) - n_train, n_missing)
    return records


def resample_spacing(v: VoxelVolume, target_mm: float) -> VoxelVolume:
    """Nearest-neighbour resampling onto an isotropic grid of ``target_mm``.

    The new grid covers the same physical extent; each output voxel takes the
    value of the input voxel containing its centre.
    """
    if not target_mm > 0:
        raise ValueError("target spacing must be > 0")
    spacing = np.asarray(v.spacing)
    extent = np.asarray(v.shape) * spacing
    shape = np.maximum(np.rint(extent / target_mm).astype(int), 1)
    if np.all(spacing == target_mm) and np.all(shape == v.shape):
        return VoxelVolume(v.data, v.spacing, v.origin)
    if shape.min() < 2:
        raise ValueError(f"resampling to {target_mm} mm leaves shape {tuple(shape)}")
    # the first voxel's lower face stays put
    corner = np.asarray(v.origin) - spacing / 2
    origin = corner + target_mm / 2
    axes = []
    for a in range(3):
        centres = corner[a] + (np.arange(shape[a]) + 0.5) * target_mm
        src = np.floor((centres - corner[a]) / spacing[a]).astype(int)
        axes.append(np.clip(src, 0, v.shape[a] - 1))
    data = v.data[np.ix_(*axes)]
    return VoxelVolume(data, (float(target_mm),) * 3, tuple(origin))


@dataclass(frozen=True)
class PhantomSpec:
    """A thin shell with a conical cut-out standing in for a defective skull."""

    kind: str = "sphere_shell"
    grid: int = 64
    thickness: int = 3
    defect_fraction: float = 0.15
    seed: int = 0
    radius_fraction: float = 0.375

    def __post_init__(self):
        if self.kind not in ("sphere_shell", "ellipsoid_shell"):
            raise ValueError(f"unknown phantom kind {self.kind!r}")
        if self.thickness < 1:
            raise ValueError("thickness must be >= 1")
        if not 0 < self.defect_fraction < 0.5:
            raise ValueError("defect_fraction must lie in (0, 0.5)")
        if self.grid < 8:
            raise ValueError("grid must be at least 8 voxels")


def make_phantom(spec: PhantomSpec) -> tuple[VoxelVolume, VoxelVolume, VoxelVolume]:
    """Return ``(defective, defect, complete)`` on one ``grid**3`` lattice.

    The shell has outer radius ``radius_fraction * grid``; the defect is the
    part of the shell inside a cone from the centre whose solid angle is
    ``defect_fraction`` of the full sphere, pointing in a seeded direction.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.grid
    radius = spec.radius_fraction * n
    centre = (n - 1) / 2.0
    axes = np.array([1.0, 1.0, 1.0])
    if spec.kind == "ellipsoid_shell":
        axes = rng.uniform(0.75, 1.0, size=3)
        axes /= axes.max()
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)

    rel = np.indices((n, n, n), dtype=np.float64).transpose(1, 2, 3, 0) - centre
    scaled = np.linalg.norm(rel / axes, axis=-1)
    complete = (scaled <= radius) & (scaled > radius - spec.thickness)
    dist = np.linalg.norm(rel, axis=-1)
    cos_half = 1.0 - 2.0 * spec.defect_fraction
    in_cone = rel @ direction >= dist * cos_half
    defect = complete & in_cone
    if not defect.any():
        raise ValueError("phantom defect is empty for this fraction/thickness")
    defective = complete & ~defect
    meta = {"direction": direction.tolist()}
    return (
        VoxelVolume(defective, meta=meta),
        VoxelVolume(defect, meta=meta),
        VoxelVolume(complete, meta=meta),
    )


def shell_volume(radius: float, thickness: float) -> float:
    return 4.0 / 3.0 * np.pi * (radius**3 - (radius - thickness) ** 3)


def phantom_set(n: int, base_seed: int = 0, **spec_kwargs) -> list[tuple[VoxelVolume, VoxelVolume, VoxelVolume]]:
    return [make_phantom(PhantomSpec(seed=base_seed + i, **spec_kwargs)) for i in range(n)]


def write_phantom_set(out_dir, n: int, base_seed: int = 0, **spec_kwargs) -> Path:
    """Write ``n`` phantoms as sidecar files under ``<out_dir>/phantoms/<seed>/``."""
    root = Path(out_dir) / "phantoms" / str(base_seed)
    for i, (defective, defect, complete) in enumerate(phantom_set(n, base_seed, **spec_kwargs)):
        case = root / f"case_{i:03d}"
        case.mkdir(parents=True, exist_ok=True)
        save_volume(defective, case / "defective")
        save_volume(defect, case / "defect")
        save_volume(complete, case / "complete")
    return root


def cap_volume(n_voxels: int, grid: int = 64, thickness: int = 3, seed: int = 0) -> VoxelVolume:
    """A spherical-shell cap with exactly ``n_voxels`` foreground voxels.

    Voxels are taken in order of angular distance from a seeded direction,
    so the cap grows as one connected patch. Used to build inputs that split
    into a known number of groups.
    """
    _, _, shell = make_phantom(PhantomSpec(grid=grid, thickness=thickness, seed=seed))
    idx = np.argwhere(shell.data)
    if n_voxels > len(idx):
        raise ValueError(f"shell at grid {grid} has only {len(idx)} voxels, asked for {n_voxels}")
    direction = np.asarray(shell.meta["direction"])
    rel = idx - (grid - 1) / 2.0
    cosang = rel @ direction / np.linalg.norm(rel, axis=1)
    keep = idx[np.argsort(-cosang, kind="stable")[:n_voxels]]
    data = np.zeros(shell.shape, dtype=bool)
    data[tuple(keep.T)] = True
    return VoxelVolume(data)
