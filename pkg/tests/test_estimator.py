import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from pointfill.cloud import NormTransform, PointCloud
from pointfill.data import phantom_set
from pointfill.estimator import DefectCompleter
from pointfill.validation import check_cloud, check_points, check_volume, check_volume_pairs
from pointfill.voxel import VoxelVolume

SMALL = dict(group_in=128, group_out=32, n_queries=4, fold_seed=2, feat_dim=16, steps=3, batch_size=2,
             refinements=1)


@pytest.fixture(scope="module")
def data():
    cases = phantom_set(2, grid=24, thickness=2)
    return [d for d, _, _ in cases], [t for _, t, _ in cases]


@pytest.fixture(scope="module")
def fitted(data):
    X, y = data
    return DefectCompleter(**SMALL).fit(X, y)


def test_params_and_clone():
    est = DefectCompleter(**SMALL)
    assert est.get_params()["group_in"] == 128
    twin = clone(est)
    assert twin.get_params() == est.get_params() and twin is not est
    est.set_params(lr=5e-4)
    assert est.lr == 5e-4


def test_fit_sets_attributes(fitted):
    assert fitted.n_iter_ == 3 and len(fitted.loss_curve_) == 3
    assert fitted.model_.config.group_out == 32


def test_predict_disjoint_and_deterministic(fitted, data):
    X, _ = data
    a, b = fitted.predict(X), fitted.predict(X)
    assert all(p == q for p, q in zip(a, b))
    for p, x in zip(a, X):
        assert p.shape == x.shape and not np.any(p.data & x.data)
    assert 0.0 <= fitted.score(X, data[1]) <= 1.0


def test_not_fitted(data):
    with pytest.raises(NotFittedError):
        DefectCompleter().predict(data[0])


def test_save_load(fitted, data, tmp_path):
    fitted.save(tmp_path / "e.pfck")
    back = DefectCompleter.load(tmp_path / "e.pfck")
    assert back.get_params() == fitted.get_params()
    assert all(p == q for p, q in zip(back.predict(data[0]), fitted.predict(data[0])))


def test_fit_validation(data):
    X, y = data
    with pytest.raises(ValueError):
        DefectCompleter(**SMALL).fit(X, y[:1])
    with pytest.raises(ValueError):
        DefectCompleter(**SMALL).fit(X, [VoxelVolume(np.zeros((5, 5, 5)))] * 2)


def test_validation_helpers():
    pts = check_points([[0, 0, 0], [1, 1, 1]])
    assert pts.dtype == np.float64 and pts.shape == (2, 3)
    with pytest.raises(ValueError):
        check_points(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        check_points([[np.nan, 0, 0]])
    with pytest.raises(ValueError):
        check_points(np.zeros((1, 3)), min_points=2)
    pc = PointCloud(np.zeros((2, 3)), NormTransform((0, 0, 0), 1.0), "normalized")
    assert check_cloud(pc, "normalized") is pc
    with pytest.raises(ValueError):
        check_cloud(pc, "world_mm")
    assert check_volume(np.ones((2, 2, 2))).count == 8
    with pytest.raises(ValueError):
        check_volume(np.zeros((2, 2, 2)))
    assert check_volume(np.zeros((2, 2, 2)), allow_empty=True).count == 0
    X, y = check_volume_pairs([np.ones((3, 3, 3))], [np.ones((3, 3, 3))])
    assert len(X) == len(y) == 1
    with pytest.raises(ValueError):
        check_volume_pairs([np.ones((3, 3, 3))], [np.ones((4, 4, 4))])
