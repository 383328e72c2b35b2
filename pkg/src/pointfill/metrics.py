"""Volume overlap and surface-distance metrics (DSC, BDSC, HD95, CD)."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .voxel import StructuringElement, VoxelVolume, check_same_grid, dilate, erode

COLUMNS = ("dsc", "bdsc", "hd95_mm", "cd_mm")


class MissingMetricError(ValueError):
    """A distance metric is undefined because one of the surfaces is empty."""


def surface(v: VoxelVolume) -> np.ndarray:
    """Foreground voxels with at least one 6-neighbour in the background.

    Voxels on the grid border count as surface.
    """
    return v.data & ~erode(v, StructuringElement("cross6", 1)).data


def dice(pred: VoxelVolume, gt: VoxelVolume) -> float:
    check_same_grid(pred, gt)
    a, b = pred.count, gt.count
    if a + b == 0:
        return 1.0
    return 2.0 * np.count_nonzero(pred.data & gt.data) / (a + b)


def boundary_dice(pred: VoxelVolume, gt: VoxelVolume, tolerance_vox: int = 1) -> float:
    """Dice of the two boundary shells, each widened by ``tolerance_vox``
    (6-connected dilation) before the overlap is counted."""
    check_same_grid(pred, gt)
    bp, bg = pred.like(surface(pred)), gt.like(surface(gt))
    if tolerance_vox > 0:
        se = StructuringElement("cross6", tolerance_vox)
        bp, bg = dilate(bp, se), dilate(bg, se)
    n_p, n_g = bp.count, bg.count
    if n_p + n_g == 0:
        return 1.0
    return 2.0 * np.count_nonzero(bp.data & bg.data) / (n_p + n_g)


def surface_points(v: VoxelVolume) -> np.ndarray:
    idx = np.argwhere(surface(v))
    return np.asarray(v.origin) + idx * np.asarray(v.spacing)


def directed_distances(pred: VoxelVolume, gt: VoxelVolume) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-surface distances (mm) from pred's surface to gt's and back."""
    check_same_grid(pred, gt)
    sp, sg = surface_points(pred), surface_points(gt)
    if len(sp) == 0 or len(sg) == 0:
        raise MissingMetricError("surface distance undefined for an empty volume")
    d_pg = cKDTree(sg).query(sp, k=1)[0]
    d_gp = cKDTree(sp).query(sg, k=1)[0]
    return d_pg, d_gp


def hausdorff95(pred: VoxelVolume, gt: VoxelVolume) -> float:
    """95th percentile of the pooled symmetric surface distances (mm)."""
    d_pg, d_gp = directed_distances(pred, gt)
    return float(np.percentile(np.concatenate([d_pg, d_gp]), 95))


def chamfer_mm(pred: VoxelVolume, gt: VoxelVolume) -> float:
    """Average of the two mean nearest-surface distances (mm, unsquared)."""
    d_pg, d_gp = directed_distances(pred, gt)
    return float(0.5 * (d_pg.mean() + d_gp.mean()))


@dataclass
class MetricsReport:
    case_id: str
    dsc: float
    bdsc: float
    hd95_mm: float | None
    cd_mm: float | None
    shape: tuple = ()
    spacing: tuple = ()
    errors: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {"id": self.case_id, **{c: getattr(self, c) for c in COLUMNS}}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape"], d["spacing"] = list(self.shape), list(self.spacing)
        return d


def evaluate_case(result, gt: VoxelVolume, case_id: str = "case") -> MetricsReport:
    """All four metrics for a reconstruction (a result object or a volume)."""
    pred = getattr(result, "defect_volume", result)
    check_same_grid(pred, gt)
    errors = {}
    hd95 = cd = None
    try:
        hd95 = hausdorff95(pred, gt)
        cd = chamfer_mm(pred, gt)
    except MissingMetricError as exc:
        errors["hd95_mm"] = errors["cd_mm"] = str(exc)
    return MetricsReport(
        case_id,
        dice(pred, gt),
        boundary_dice(pred, gt),
        hd95,
        cd,
        shape=tuple(gt.shape),
        spacing=tuple(gt.spacing),
        errors=errors,
    )


def aggregate(reports: list[MetricsReport]) -> dict:
    """Per-column means over the cases where the metric is defined."""
    out = {}
    for col in COLUMNS:
        vals = [getattr(r, col) for r in reports if getattr(r, col) is not None]
        out[col] = float(np.mean(vals)) if vals else math.nan
    return out


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return f"{v:.6g}"


def to_csv(reports: list[MetricsReport], with_mean: bool = True) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("id",) + COLUMNS)
    for r in reports:
        writer.writerow([r.case_id] + [_fmt(getattr(r, c)) for c in COLUMNS])
    if with_mean:
        means = aggregate(reports)
        writer.writerow(["mean"] + [_fmt(means[c]) for c in COLUMNS])
    return buf.getvalue()


def table_row(means: dict, label: str = "mean") -> str:
    """``label & DSC & BDSC & HD95 & CD`` rounded to two decimals."""
    return " & ".join([label] + [f"{means[c]:.2f}" for c in COLUMNS])
