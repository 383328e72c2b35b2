import numpy as np
import pytest
import torch

from pointfill.cloud import NormTransform, PointCloud
from pointfill.data import phantom_set
from pointfill.model import (
    CheckpointError,
    CompletionTransformer,
    ModelConfig,
    TrainConfig,
    complete_group,
    farthest_point_sampling,
    load_model,
    make_pair,
    save_model,
    seed_lattice,
    train,
)
from pointfill.model.train import objective_loss
from pointfill.objective import ObjectiveConfig


def _tiny(**kw):
    base = dict(group_in=64, group_out=16, n_proxies=16, feat_dim=16, n_heads=2, knn_k=4,
                n_queries=2, fold_seed=2, n_enc_blocks=1, n_dec_blocks=1)
    base.update(kw)
    return ModelConfig(**base)


def _fps_loop(points, m, start):
    picked = [start]
    while len(picked) < m:
        best, best_d = None, -1.0
        for i, p in enumerate(points):
            if i in picked:
                continue
            d = min(float(((p - points[j]) ** 2).sum()) for j in picked)
            if d > best_d:
                best, best_d = i, d
        picked.append(best)
    return picked


@pytest.fixture(scope="module")
def tiny_data():
    pairs = [make_pair(d, t) for d, t, _ in phantom_set(2, grid=24, thickness=2)]
    return pairs


def test_fps_corner_fixture():
    corners = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], float)
    idx = farthest_point_sampling(corners, 2, 0)
    assert idx.tolist() == [0, 7]


@pytest.mark.parametrize("seed", range(3))
def test_fps_matches_loop(seed):
    pts = np.random.default_rng(seed).random((60, 3))
    assert farthest_point_sampling(pts, 12, 5).tolist() == _fps_loop(pts, 12, 5)
    assert sorted(farthest_point_sampling(pts, 60, 0).tolist()) == list(range(60))


def test_seed_lattice_corners():
    s = seed_lattice(2, 0.1)
    assert s.shape == (8, 3)
    assert torch.allclose(s.abs(), torch.full((8, 3), 0.1))


def test_one_query_fold_gives_lattice_corners():
    torch.manual_seed(0)
    model = CompletionTransformer(_tiny(n_queries=1, group_out=8, fold_radius=0.1))
    model.zero_fold_offsets()
    with torch.no_grad():
        out = model.fold3d(torch.zeros(1, 1, 3), torch.randn(1, 1, 16))[0]
    expect = {(a, b, c) for a in (-0.1, 0.1) for b in (-0.1, 0.1) for c in (-0.1, 0.1)}
    got = {tuple(round(float(v), 6) for v in p) for p in out}
    assert got == {tuple(round(v, 6) for v in p) for p in expect}


def test_zero_residual_branches_make_encoder_identity():
    torch.manual_seed(1)
    model = CompletionTransformer(_tiny(n_enc_blocks=3))
    model.zero_residual_branches()
    pts = torch.rand(2, 64, 3)
    centers, feats, nbrs = model.extract_proxies(pts, [0, 3])
    with torch.no_grad():
        assert torch.equal(model.encode(centers, feats, nbrs), feats)


@pytest.mark.parametrize(
    "group_in,n_queries,fold_seed,n_proxies",
    [(32, 1, 2, 8), (64, 2, 2, 16), (64, 1, 3, 16), (40, 4, 2, 8), (100, 3, 2, 20), (64, 1, 4, 32),
     (17, 2, 3, 5), (128, 8, 2, 32), (50, 5, 1, 10), (64, 2, 3, 64), (33, 1, 1, 4), (80, 6, 2, 16)],
)
def test_output_count_sweep(group_in, n_queries, fold_seed, n_proxies):
    cfg = _tiny(group_in=group_in, n_queries=n_queries, fold_seed=fold_seed,
                group_out=n_queries * fold_seed**3, n_proxies=n_proxies)
    model = CompletionTransformer(cfg).eval()
    with torch.no_grad():
        out = model(torch.rand(2, group_in, 3))
    assert out.shape == (2, cfg.group_out, 3)
    assert torch.isfinite(out).all()


def test_config_validation():
    with pytest.raises(ValueError):
        _tiny(group_out=17)
    with pytest.raises(ValueError):
        _tiny(feat_dim=15)
    with pytest.raises(ValueError):
        _tiny(n_proxies=100)
    with pytest.raises(ValueError):
        _tiny(fold_radius=0)
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"bogus": 1})


def test_wrong_group_size_rejected():
    model = CompletionTransformer(_tiny())
    with pytest.raises(ValueError):
        model(torch.rand(1, 63, 3))
    with pytest.raises(ValueError):
        complete_group(PointCloud(np.zeros((5, 3)), NormTransform((0, 0, 0), 1.0), "normalized"), model)


def test_forward_is_deterministic_and_permutation_equivariant():
    torch.manual_seed(2)
    model = CompletionTransformer(_tiny()).eval()
    pts = torch.rand(64, 3, generator=torch.Generator().manual_seed(3))
    with torch.no_grad():
        a = model(pts[None], [5])[0]
        b = model(pts[None], [5])[0]
        perm = torch.randperm(64, generator=torch.Generator().manual_seed(4))
        inv = torch.argsort(perm)
        c = model(pts[perm][None], [int(inv[5])])[0]
    assert torch.equal(a, b)
    # same proxies in a different order: the output set is unchanged
    assert torch.allclose(a, c, atol=1e-5)


def test_complete_group_seeded():
    model = CompletionTransformer(_tiny()).eval()
    g = PointCloud(np.random.default_rng(0).random((64, 3)), NormTransform((0, 0, 0), 1.0), "normalized")
    a, b = complete_group(g, model, seed=7), complete_group(g, model, seed=7)
    assert len(a) == 16 and a.frame == "normalized"
    np.testing.assert_array_equal(a.points, b.points)


def test_finite_over_random_draws():
    cfg = _tiny(group_in=32, n_proxies=8, group_out=8, n_queries=1)
    pts = torch.rand(4, 32, 3, generator=torch.Generator().manual_seed(0))
    model = CompletionTransformer(cfg).eval()
    gen = torch.Generator().manual_seed(1)
    with torch.no_grad():
        for _ in range(1000):
            for p in model.parameters():
                p.copy_(torch.randn(p.shape, generator=gen) * 0.3)
            assert torch.isfinite(model(pts)).all()


def test_end_to_end_directional_derivative():
    torch.manual_seed(5)
    model = CompletionTransformer(_tiny()).double().eval()
    rng = np.random.default_rng(6)
    pts = torch.from_numpy(rng.random((1, 64, 3)))
    target = [rng.random((16, 3))]
    cfg = ObjectiveConfig(kind="cd", alpha=0.0)
    w = model.fold.stage1[-1].weight
    direction = torch.from_numpy(rng.normal(size=tuple(w.shape)))

    def f():
        return objective_loss(model(pts, [0]), target, cfg)

    loss = f()
    loss.backward()
    analytic = float((w.grad * direction).sum())
    h = 1e-6
    with torch.no_grad():
        w += h * direction
        up = float(f())
        w -= 2 * h * direction
        down = float(f())
        w += h * direction
    numeric = (up - down) / (2 * h)
    assert abs(analytic - numeric) / abs(numeric) < 1e-2


def test_checkpoint_round_trip(tmp_path):
    model = CompletionTransformer(_tiny()).eval()
    save_model(model, tmp_path / "m.pfck", extra={"note": "x"})
    back, opt, extra = load_model(tmp_path / "m.pfck")
    assert opt is None and extra == {"note": "x"}
    assert back.config == model.config
    for (k, v), (k2, v2) in zip(model.state_dict().items(), back.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)
    pts = torch.rand(1, 64, 3)
    with torch.no_grad():
        assert torch.equal(model(pts), back.eval()(pts))


def test_checkpoint_errors(tmp_path):
    p = tmp_path / "m.pfck"
    save_model(CompletionTransformer(_tiny()), p)
    raw = p.read_bytes()
    (tmp_path / "bad.pfck").write_bytes(b"NOPE" + raw[4:])
    (tmp_path / "cut.pfck").write_bytes(raw[: len(raw) // 2])
    for name in ("bad.pfck", "cut.pfck"):
        with pytest.raises(CheckpointError):
            load_model(tmp_path / name)
    with pytest.raises(OSError):
        load_model(tmp_path / "missing.pfck")


def test_zero_lr_keeps_parameters(tiny_data):
    torch.manual_seed(0)
    ref = CompletionTransformer(_tiny()).state_dict()
    res = train(tiny_data, _tiny(), TrainConfig(steps=3, batch_size=2, lr=0.0, seed=0))
    for k, v in res.model.state_dict().items():
        assert torch.equal(v, ref[k]), k


def test_same_seed_same_curve_and_decrease(tiny_data):
    cfg = TrainConfig(steps=40, batch_size=2, lr=3e-3, warmup=5, seed=3,
                      objective=ObjectiveConfig(kind="cd", alpha=0.0))
    a = train(tiny_data, _tiny(), cfg).losses
    b = train(tiny_data, _tiny(), cfg).losses
    assert a == b and len(a) == 40
    assert np.mean(a[-5:]) < np.mean(a[:5])


def test_resume_matches_uninterrupted(tiny_data, tmp_path):
    cfg = TrainConfig(steps=6, batch_size=2, seed=1)
    full = train(tiny_data, _tiny(), cfg).losses
    half = TrainConfig(steps=3, batch_size=2, seed=1)
    train(tiny_data, _tiny(), half, checkpoint=tmp_path / "h.pfck")
    resumed = train(tiny_data, None, cfg, resume=tmp_path / "h.pfck")
    assert len(resumed.losses) == 6
    np.testing.assert_allclose(resumed.losses, full, rtol=1e-5)


def test_train_rejects_empty():
    with pytest.raises(ValueError):
        train([], _tiny())
