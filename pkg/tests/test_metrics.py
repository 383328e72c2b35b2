import csv
import io

import numpy as np
import pytest
from oracles import bdsc_ref, cd_mm_ref, dice_ref, hd95_ref

from pointfill.metrics import (
    COLUMNS,
    MissingMetricError,
    aggregate,
    boundary_dice,
    chamfer_mm,
    dice,
    evaluate_case,
    hausdorff95,
    table_row,
    to_csv,
)
from pointfill.voxel import GridMismatchError, StructuringElement, VoxelVolume, erode


def _random_pair(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(6, 33, size=3))
    a = rng.random(shape) < rng.uniform(0.02, 0.3)
    b = rng.random(shape) < rng.uniform(0.02, 0.3)
    a.flat[0] = b.flat[-1] = True
    spacing = tuple(rng.uniform(0.3, 2.0, size=3))
    return VoxelVolume(a, spacing), VoxelVolume(b, spacing)


def _cube(n=12, lo=2, hi=9):
    d = np.zeros((n, n, n), bool)
    d[lo:hi, lo:hi, lo:hi] = True
    return VoxelVolume(d)


@pytest.mark.parametrize("seed", range(5))
def test_agree_with_brute_force(seed):
    a, b = _random_pair(seed)
    assert dice(a, b) == pytest.approx(dice_ref(a.data, b.data), abs=1e-12)
    assert boundary_dice(a, b) == pytest.approx(bdsc_ref(a.data, b.data), abs=1e-12)
    assert hausdorff95(a, b) == pytest.approx(hd95_ref(a.data, b.data, a.spacing), abs=1e-9)
    assert chamfer_mm(a, b) == pytest.approx(cd_mm_ref(a.data, b.data, a.spacing), abs=1e-9)


def test_dice_fixtures():
    p = np.zeros((8, 8, 8), bool)
    g = np.zeros((8, 8, 8), bool)
    p[0, 0, 0:4] = True
    g[0, 0, 2:6] = True
    assert dice(VoxelVolume(p), VoxelVolume(g)) == 0.5
    assert dice(VoxelVolume(p), VoxelVolume(p)) == 1.0
    assert dice(VoxelVolume(p), VoxelVolume(np.roll(p, 4, axis=0))) == 0.0
    empty = VoxelVolume(np.zeros((8, 8, 8)))
    assert dice(empty, empty) == 1.0 and boundary_dice(empty, empty) == 1.0


def test_single_voxel_distances():
    a = np.zeros((10, 10, 10), bool)
    b = np.zeros((10, 10, 10), bool)
    a[1, 2, 3] = True
    b[6, 2, 3] = True
    assert hausdorff95(VoxelVolume(a), VoxelVolume(b)) == 5.0
    b2 = np.zeros_like(a)
    b2[1, 2, 5] = True
    assert chamfer_mm(VoxelVolume(a), VoxelVolume(b2)) == 2.0


def test_shifted_cube_bdsc():
    a = _cube()
    b = VoxelVolume(np.roll(a.data, 1, axis=0))
    v = boundary_dice(a, b, 1)
    assert 0 < v < 1
    assert v == pytest.approx(bdsc_ref(a.data, b.data, 1), abs=1e-12)


def test_far_blobs_bdsc_zero():
    d = np.zeros((20, 20, 20), bool)
    e = np.zeros((20, 20, 20), bool)
    d[1:4, 1:4, 1:4] = True
    e[14:18, 14:18, 14:18] = True
    assert boundary_dice(VoxelVolume(d), VoxelVolume(e)) == 0.0


def test_symmetry_and_identity():
    a, b = _random_pair(9)
    assert dice(a, b) == dice(b, a)
    assert boundary_dice(a, b) == boundary_dice(b, a)
    assert hausdorff95(a, b) == hausdorff95(b, a)
    assert chamfer_mm(a, b) == chamfer_mm(b, a)
    rep = evaluate_case(a, a)
    assert (rep.dsc, rep.bdsc, rep.hd95_mm, rep.cd_mm) == (1.0, 1.0, 0.0, 0.0)


def test_erosion_degrades():
    gt = _cube(16, 2, 13)
    pred = erode(gt, StructuringElement("cross6", 1))
    assert dice(pred, gt) < 1.0
    assert hausdorff95(pred, gt) > hausdorff95(gt, gt)


def test_spacing_scales_distances():
    a, b = _random_pair(2)
    a2 = VoxelVolume(a.data, tuple(2 * s for s in a.spacing))
    b2 = VoxelVolume(b.data, a2.spacing)
    assert hausdorff95(a2, b2) == 2 * hausdorff95(a, b)
    assert chamfer_mm(a2, b2) == 2 * chamfer_mm(a, b)


def test_empty_and_mismatch():
    a = _cube()
    empty = a.empty_like()
    with pytest.raises(MissingMetricError):
        hausdorff95(a, empty)
    rep = evaluate_case(empty, a, "x")
    assert rep.hd95_mm is None and "hd95_mm" in rep.errors
    with pytest.raises(GridMismatchError):
        dice(a, VoxelVolume(a.data, spacing=(2, 2, 2)))


def test_csv_and_table_row():
    a = _cube()
    reports = [evaluate_case(a, a, "c0"), evaluate_case(erode(a, StructuringElement()), a, "c1")]
    rows = list(csv.reader(io.StringIO(to_csv(reports))))
    assert rows[0] == ["id", *COLUMNS]
    assert rows[-1][0] == "mean" and len(rows) == 4
    assert float(rows[-1][1]) == pytest.approx(aggregate(reports)["dsc"], rel=1e-5)
    fixture = {"dsc": 0.87, "bdsc": 0.85, "hd95_mm": 1.91, "cd_mm": 0.31}
    assert table_row(fixture, "Ours") == "Ours & 0.87 & 0.85 & 1.91 & 0.31"
