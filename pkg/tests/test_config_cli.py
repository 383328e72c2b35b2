import csv
import json

import numpy as np
import pytest

from pointfill.cli import BenchAssertionError, check_bench, main
from pointfill.cloud import read_ply
from pointfill.config import ConfigError, load_config, parse_override
from pointfill.data import PhantomSpec, make_phantom
from pointfill.voxel import VoxelVolume, load_volume, save_volume

TINY = [
    "--set", "model.group_in=64", "--set", "model.group_out=16", "--set", "model.n_proxies=16",
    "--set", "model.feat_dim=16", "--set", "model.n_heads=2", "--set", "model.knn_k=4",
    "--set", "model.n_queries=2", "--set", "model.fold_seed=2", "--set", "model.n_enc_blocks=1",
    "--set", "model.n_dec_blocks=1", "--set", "phantom.grid=24", "--set", "phantom.thickness=2",
    "--set", "train.batch_size=2",
]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--phantoms", "2", "--steps", "6", "--out", str(out), *TINY]) == 0
    return out


@pytest.fixture
def phantom(tmp_path):
    d, t, _ = make_phantom(PhantomSpec(grid=24, thickness=2, seed=0))
    save_volume(d, tmp_path / "in" / "case0")
    save_volume(t, tmp_path / "gt" / "case0")
    return d, t, tmp_path


def test_parse_override():
    assert parse_override("objective.alpha=0.2") == (["objective", "alpha"], 0.2)
    assert parse_override("pipeline.closing_kind=cube26") == (["pipeline", "closing_kind"], "cube26")
    assert parse_override("pipeline.mesh=true") == (["pipeline", "mesh"], True)
    with pytest.raises(ConfigError):
        parse_override("novalue")


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError):
        load_config(None, ["model.bogus=1"])
    with pytest.raises(ConfigError):
        load_config(None, ["nosection.x=1"])
    cfg_file = tmp_path / "c.toml"
    cfg_file.write_text("[train]\nsteps = 5\nwhatever = 1\n")
    with pytest.raises(ConfigError):
        load_config(cfg_file)


def test_config_snapshot_round_trip(tmp_path):
    cfg = load_config(None, ["objective.alpha=0.3", "seed=9", "train.steps=12"])
    (tmp_path / "c.toml").write_text(cfg.dump())
    back = load_config(tmp_path / "c.toml")
    assert back.to_dict() == cfg.to_dict()
    assert back.objective.alpha == 0.3 and back.seed == 9 and back.train_config().steps == 12


def test_convert_count(phantom, capsys):
    d, _, root = phantom
    out = root / "ply"
    assert main(["convert", str(root / "in" / "case0.json"), "--out", str(out)]) == 0
    assert int(capsys.readouterr().out.strip()) == d.count
    pc = read_ply(out / "case0.ply")
    assert len(pc) == d.count and pc.frame == "normalized"
    assert (out / "config.toml").exists()


def test_convert_spacing_and_missing(phantom, capsys):
    _, _, root = phantom
    assert main(["convert", str(root / "in" / "case0.json"), "--spacing", "2", "--world",
                 "--out", str(root / "w.ply")]) == 0
    assert read_ply(root / "w.ply").frame == "world_mm"
    assert main(["convert", str(root / "nope.json"), "--out", str(root / "x")]) == 2


def test_train_outputs(trained):
    assert (trained / "model.pfck").exists() and (trained / "config.toml").exists()
    rows = list(csv.reader((trained / "loss.csv").open()))
    assert rows[0] == ["step", "loss"] and len(rows) == 7
    assert [int(r[0]) for r in rows[1:]] == list(range(6))


def test_train_resume(trained, tmp_path):
    out = tmp_path / "more"
    assert main(["train", "--phantoms", "2", "--steps", "8", "--resume", str(trained / "model.pfck"),
                 "--out", str(out), *TINY]) == 0
    first = [float(r[1]) for r in list(csv.reader((trained / "loss.csv").open()))[1:]]
    rows = [float(r[1]) for r in list(csv.reader((out / "loss.csv").open()))[1:]]
    assert len(rows) == 8 and rows[:6] == first
    # the continuation tracks an uninterrupted run rather than restarting
    full = tmp_path / "full"
    assert main(["train", "--phantoms", "2", "--steps", "8", "--out", str(full), *TINY]) == 0
    ref = [float(r[1]) for r in list(csv.reader((full / "loss.csv").open()))[1:]]
    assert max(abs(a - b) / b for a, b in zip(rows[6:], ref[6:])) < 0.05


def test_train_validation_and_divergence(tmp_path):
    assert main(["train", "--phantoms", "1", "--steps", "1", "--out", str(tmp_path),
                 "--set", "objective.kind=emd", *TINY]) == 3
    code = main(["train", "--phantoms", "1", "--steps", "5", "--out", str(tmp_path / "d"),
                 "--set", "train.lr=1e30", "--set", "train.grad_clip=0", "--set", "train.warmup=1", *TINY])
    assert code == 4


def test_complete_and_evaluate(trained, phantom, tmp_path):
    d, _, root = phantom
    out = tmp_path / "pred"
    args = ["complete", "--checkpoint", str(trained / "model.pfck"), str(root / "in" / "case0.json"),
            "--refinements", "2", "--out", str(out), *TINY]
    assert main(args) == 0
    vol = load_volume(out / "case0" / "defect.json")
    assert not np.any(vol.data & d.data)
    prov = json.loads((out / "case0" / "provenance.json").read_text())
    assert prov["refinements"] == 2 and (out / "case0" / "defect.ply").exists()
    # same seed, different --jobs: identical bytes
    out2 = tmp_path / "pred2"
    assert main([*args[:-len(TINY) - 2], "--out", str(out2), "--jobs", "3", *TINY]) == 0
    assert (out / "case0" / "defect.raw").read_bytes() == (out2 / "case0" / "defect.raw").read_bytes()


def test_complete_budget_mismatch(trained, phantom):
    _, _, root = phantom
    assert main(["complete", "--checkpoint", str(trained / "model.pfck"), str(root / "in" / "case0.json"),
                 "--set", "pipeline.group_in=32", "--out", str(root / "o")]) == 3
    assert main(["complete", "--checkpoint", str(root / "missing.pfck"),
                 str(root / "in" / "case0.json"), "--out", str(root / "o")]) == 2


def test_evaluate_identity_mean_row(phantom, capsys):
    _, _, root = phantom
    out = root / "ev"
    assert main(["evaluate", "--pred", str(root / "gt"), "--gt", str(root / "gt"), "--out", str(out)]) == 0
    rows = list(csv.reader((out / "metrics.csv").open()))
    assert rows[0] == ["id", "dsc", "bdsc", "hd95_mm", "cd_mm"]
    assert rows[-1][0] == "mean"
    assert [float(v) for v in rows[-1][1:]] == [1.0, 1.0, 0.0, 0.0]
    assert json.loads((out / "cases" / "case0.json").read_text())["dsc"] == 1.0
    assert "1.00 & 1.00 & 0.00 & 0.00" in capsys.readouterr().out


def test_evaluate_missing_gt(phantom, capsys):
    _, t, root = phantom
    save_volume(t, root / "pred" / "case0")
    save_volume(t, root / "pred" / "case1")
    out = root / "ev"
    code = main(["evaluate", "--pred", str(root / "pred"), "--gt", str(root / "gt"), "--out", str(out)])
    assert code == 2
    assert "case1" in capsys.readouterr().err
    assert "error" in json.loads((out / "cases" / "case1.json").read_text())


def test_evaluate_grid_mismatch(phantom):
    _, t, root = phantom
    save_volume(VoxelVolume(t.data, (2.0, 2.0, 2.0)), root / "p.json")
    code = main(["evaluate", "--pred", str(root / "p.json"), "--gt", str(root / "gt" / "case0.json"),
                 "--out", str(root / "ev")])
    assert code == 3


def test_ablate(trained, tmp_path):
    out = tmp_path / "ab"
    assert main(["ablate", "--checkpoint", str(trained / "model.pfck"), "--sweep", "pipeline.refinements=1,2",
                 "--phantoms", "2", "--out", str(out), *TINY]) == 0
    rows = list(csv.DictReader((out / "ablation.csv").open()))
    assert [r["refinements"] for r in rows] == ["1", "2"]
    assert main(["ablate", "--checkpoint", str(trained / "model.pfck"), "--sweep", "model.x=1",
                 "--out", str(out)]) == 3


def test_bench_csv_and_missing_checkpoint(trained, tmp_path):
    out = tmp_path / "b"
    assert main(["bench", "--checkpoint", str(trained / "model.pfck"), "--groups", "1,2", "--repeats", "1",
                 "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "bench.csv").open()))
    assert [int(r["groups"]) for r in rows] == [1, 2]
    assert all(int(r["peak_tracked_bytes"]) > 0 for r in rows)
    assert main(["bench", "--checkpoint", str(tmp_path / "none.pfck"), "--out", str(out)]) == 2


def test_check_bench_rules():
    ok = [{"groups": 1, "peak_tracked_bytes": 100, "time_s": 1.0},
          {"groups": 10, "peak_tracked_bytes": 105, "time_s": 9.0}]
    assert check_bench(ok) == []
    bad = [dict(ok[0]), dict(ok[1], peak_tracked_bytes=150, time_s=20.0)]
    assert len(check_bench(bad)) == 2
    assert issubclass(BenchAssertionError, AssertionError)


def test_phantoms_command(tmp_path):
    assert main(["phantoms", "--count", "2", "--out", str(tmp_path), "--set", "phantom.grid=16"]) == 0
    assert (tmp_path / "phantoms" / "0" / "case_001" / "defect.json").exists()
