"""Command-line interface: convert, train, complete, evaluate, ablate, bench.

Exit codes: 0 ok, 2 I/O, 3 validation, 4 training divergence, 5 failed
assertion. Every run writes the resolved configuration to
``<out>/config.toml``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import statistics
import sys
import time
from pathlib import Path

from . import __version__
from .cloud import cloud_from_volume, normalize, write_ply
from .config import RunConfig, load_config
from .data import cap_volume, phantom_set, resample_spacing, scan_dataset, write_phantom_set
from .metrics import MetricsReport, aggregate, evaluate_case, table_row, to_csv
from .model import TrainingDivergedError, load_model, make_pair, save_model, train
from .pipeline import CaseFailure, PipelineConfig, complete_batch, complete_case
from .voxel import _atomic_write, load_volume, save_volume, write_stl

log = logging.getLogger("pointfill")

EXIT_OK, EXIT_IO, EXIT_VALIDATION, EXIT_DIVERGED, EXIT_ASSERT = 0, 2, 3, 4, 5


class BenchAssertionError(AssertionError):
    pass


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, text.encode())


def _snapshot(cfg: RunConfig, out: Path) -> None:
    _write_text(out / "config.toml", cfg.dump())


def _names(paths: list[Path]) -> list[str]:
    stems = [p.stem for p in paths]
    if len(set(stems)) == len(stems):
        return stems
    return [f"{p.parent.name}_{p.stem}" for p in paths]


def _is_volume(p: Path) -> bool:
    if p.suffix.lower() == ".nrrd":
        return True
    return p.suffix.lower() == ".json" and p.with_suffix(".raw").exists()


def _volume_index(root: Path) -> dict[str, Path]:
    """Volumes below ``root`` keyed by relative path without suffix."""
    return {
        p.relative_to(root).with_suffix("").as_posix(): p
        for p in sorted(root.rglob("*"))
        if p.is_file() and _is_volume(p)
    }


# --------------------------------------------------------------------------
# subcommands


def cmd_convert(args, cfg: RunConfig) -> int:
    vol = load_volume(args.input)
    if args.spacing is not None:
        vol = resample_spacing(vol, args.spacing)
    pc = cloud_from_volume(vol)
    if not args.world:
        pc = normalize(pc)
    out = Path(args.out)
    target = out if out.suffix.lower() == ".ply" else out / f"{Path(args.input).stem}.ply"
    target.parent.mkdir(parents=True, exist_ok=True)
    write_ply(pc, target, binary=args.binary)
    _snapshot(cfg, target.parent)
    print(len(pc))
    return EXIT_OK


def _training_pairs(args, cfg: RunConfig):
    if args.dataset:
        records = [r for r in scan_dataset(args.dataset, args.layout) if r.split == "train"]
        pairs = []
        for r in records:
            if r.missing_ground_truth:
                log.warning("skipping %s: no ground-truth defect", r.id)
                continue
            pairs.append(make_pair(load_volume(r.defective), load_volume(r.defect)))
        if not pairs:
            raise FileNotFoundError(f"no training cases with ground truth under {args.dataset}")
        return pairs
    pc = cfg.phantom
    n = args.phantoms if args.phantoms is not None else pc.count
    cases = phantom_set(
        n, pc.base_seed, kind=pc.kind, grid=pc.grid, thickness=pc.thickness,
        defect_fraction=pc.defect_fraction, radius_fraction=pc.radius_fraction,
    )
    return [make_pair(d, g) for d, g, _ in cases]


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.steps is not None:
        cfg.train["steps"] = args.steps
    tcfg = cfg.train_config()
    if args.resume:
        # the checkpoint fixes the architecture
        model_cfg = load_model(args.resume)[0].config
        cfg.model = model_cfg
    _snapshot(cfg, out)
    pairs = _training_pairs(args, cfg)
    ckpt = out / "model.pfck"
    t0 = time.perf_counter()

    def progress(step, value):
        if step % 50 == 0:
            log.info("step %d loss %.5f (%.1fs)", step, value, time.perf_counter() - t0)

    result = train(pairs, cfg.model, tcfg, checkpoint=ckpt, resume=args.resume, callback=progress)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("step", "loss"))
    for i, v in enumerate(result.losses):
        w.writerow((i, f"{v:.8g}"))
    _write_text(out / "loss.csv", buf.getvalue())
    print(f"trained {result.step} steps; final loss {result.losses[-1]:.5f}; checkpoint {ckpt}")
    return EXIT_OK


def _pipeline_config(args, cfg: RunConfig) -> PipelineConfig:
    if getattr(args, "refinements", None) is not None:
        cfg.pipeline["refinements"] = args.refinements
    if getattr(args, "mesh", False):
        cfg.pipeline["mesh"] = True
    return cfg.pipeline_config()


def cmd_complete(args, cfg: RunConfig) -> int:
    model = load_model(args.checkpoint)[0]
    pcfg = _pipeline_config(args, cfg)
    pcfg.check_model(model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _snapshot(cfg, out)
    paths = [Path(p) for p in args.inputs]
    missing = [p for p in paths if not p.exists()]
    if missing:
        raise FileNotFoundError(f"missing input volume(s): {', '.join(map(str, missing))}")
    results = complete_batch(paths, model, pcfg, parallelism=args.jobs)
    failures = []
    for name, path, res in zip(_names(paths), paths, results):
        if isinstance(res, CaseFailure):
            failures.append(f"{path}: {res.error}")
            continue
        case_dir = out / name
        case_dir.mkdir(parents=True, exist_ok=True)
        write_ply(res.defect_cloud, case_dir / "defect.ply")
        save_volume(res.defect_volume, case_dir / "defect")
        if res.mesh is not None:
            write_stl(res.mesh, case_dir / "defect.stl")
        prov = dict(res.provenance, input=str(path), checkpoint=str(args.checkpoint))
        _write_text(case_dir / "provenance.json", json.dumps(prov, indent=2))
        print(f"{name}: {res.defect_volume.count} voxels")
    for line in failures:
        print(f"FAILED {line}", file=sys.stderr)
    if failures:
        io_fail = any(("FileNotFoundError" in f) or ("OSError" in f) for f in failures)
        return EXIT_IO if io_fail else EXIT_VALIDATION
    return EXIT_OK


def _pairs_from_args(args) -> list[tuple[str, Path, Path | None]]:
    preds = [Path(p) for p in args.pred]
    gts = [Path(p) for p in args.gt]
    if len(preds) == 1 and preds[0].is_dir():
        if len(gts) != 1 or not gts[0].is_dir():
            raise ValueError("--pred directory needs a --gt directory")
        gt_index = _volume_index(gts[0])
        return [(key, p, gt_index.get(key)) for key, p in _volume_index(preds[0]).items()]
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions but {len(gts)} ground-truth files")
    return [(name, p, g if g.exists() else None) for name, p, g in zip(_names(preds), preds, gts)]


def cmd_evaluate(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _snapshot(cfg, out)
    pairs = _pairs_from_args(args)
    if not pairs:
        raise FileNotFoundError("no prediction volumes found")
    reports: list[MetricsReport] = []
    problems = []
    code = EXIT_OK
    for key, pred_path, gt_path in pairs:
        record: dict = {"id": key, "pred": str(pred_path), "gt": str(gt_path) if gt_path else None}
        try:
            if gt_path is None:
                raise FileNotFoundError(f"no ground truth for {key}")
            rep = evaluate_case(load_volume(pred_path), load_volume(gt_path), key)
            reports.append(rep)
            record.update(rep.to_dict())
        except (OSError, ValueError) as exc:
            record["error"] = f"{type(exc).__name__}: {exc}"
            problems.append(f"{key}: {record['error']}")
            code = max(code, EXIT_IO if isinstance(exc, OSError) else EXIT_VALIDATION)
        _write_text(out / "cases" / (key.replace("/", "__") + ".json"), json.dumps(record, indent=2))
    _write_text(out / "metrics.csv", to_csv(reports, with_mean=True))
    if reports:
        print("case & DSC & BDSC & HD95 & CD")
        print(table_row(aggregate(reports)))
    for line in problems:
        print(f"FAILED {line}", file=sys.stderr)
    return code


def cmd_ablate(args, cfg: RunConfig) -> int:
    """Sweep one pipeline key over a phantom set and report mean metrics per value."""
    model = load_model(args.checkpoint)[0]
    key, _, values = args.sweep.partition("=")
    section, _, field_name = key.partition(".")
    if section != "pipeline" or not field_name or not values:
        raise ValueError("--sweep must look like pipeline.<key>=v1,v2,...")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _snapshot(cfg, out)
    ph = cfg.phantom
    cases = phantom_set(
        args.phantoms, ph.base_seed, kind=ph.kind, grid=ph.grid, thickness=ph.thickness,
        defect_fraction=ph.defect_fraction, radius_fraction=ph.radius_fraction,
    )
    rows = []
    for raw in values.split(","):
        trial = load_config(None, [f"{key}={raw}"]).pipeline
        pcfg = PipelineConfig(seed=cfg.seed, objective=cfg.objective, **{**cfg.pipeline, **trial})
        results = complete_batch([d for d, _, _ in cases], model, pcfg, parallelism=args.jobs)
        reports = [
            evaluate_case(r, gt, f"case_{i:03d}")
            for i, (r, (_, gt, _)) in enumerate(zip(results, cases))
            if not isinstance(r, CaseFailure)
        ]
        means = aggregate(reports)
        rows.append({field_name: raw, **means})
        print(table_row(means, label=f"{field_name}={raw}"))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    _write_text(out / "ablation.csv", buf.getvalue())
    return EXIT_OK


def bench_cases(group_in: int, groups: list[int], grid: int = 64) -> dict[int, object]:
    """Input volumes that split into exactly ``g`` groups of ``group_in``."""
    return {g: cap_volume(g * group_in, grid=grid) for g in groups}


def run_bench(model, groups: list[int], repeats: int = 3, seed: int = 0, grid: int = 64) -> list[dict]:
    pcfg = PipelineConfig(refinements=1, seed=seed)
    rows = []
    for g, vol in bench_cases(model.config.group_in, groups, grid).items():
        complete_case(vol, model, pcfg)  # warm-up
        times, peaks = [], []
        for _ in range(repeats):
            t0 = time.perf_counter()
            res = complete_case(vol, model, pcfg)
            times.append(time.perf_counter() - t0)
            peaks.append(res.provenance["peak_tracked_bytes"])
        rows.append({
            "groups": g,
            "points": vol.count,
            "peak_tracked_bytes": max(peaks),
            "time_s": statistics.median(times),
        })
    return rows


def check_bench(rows: list[dict], mem_tol: float = 0.10, time_range=(6.0, 14.0)) -> list[str]:
    """Failed flatness/linearity checks, empty when all hold."""
    problems = []
    peaks = [r["peak_tracked_bytes"] for r in rows]
    spread = (max(peaks) - min(peaks)) / min(peaks)
    if spread >= mem_tol:
        problems.append(f"peak tracked bytes vary by {spread:.1%} (limit {mem_tol:.0%})")
    by_g = {r["groups"]: r for r in rows}
    if 1 in by_g and 10 in by_g:
        ratio = by_g[10]["time_s"] / by_g[1]["time_s"]
        if not time_range[0] <= ratio <= time_range[1]:
            problems.append(f"time(10)/time(1) = {ratio:.2f} outside {list(time_range)}")
    return problems


def cmd_bench(args, cfg: RunConfig) -> int:
    model = load_model(args.checkpoint)[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _snapshot(cfg, out)
    groups = [int(g) for g in args.groups.split(",")]
    rows = run_bench(model, groups, args.repeats, cfg.seed)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    _write_text(out / "bench.csv", buf.getvalue())
    sys.stdout.write(buf.getvalue())
    if args.assert_:
        problems = check_bench(rows)
        if problems:
            raise BenchAssertionError("; ".join(problems))
    return EXIT_OK


def cmd_phantoms(args, cfg: RunConfig) -> int:
    ph = cfg.phantom
    n = args.count if args.count is not None else ph.count
    root = write_phantom_set(
        args.out, n, ph.base_seed, kind=ph.kind, grid=ph.grid, thickness=ph.thickness,
        defect_fraction=ph.defect_fraction, radius_fraction=ph.radius_fraction,
    )
    _snapshot(cfg, Path(args.out))
    print(root)
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, e.g. objective.alpha=0.2 (repeatable)")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--jobs", type=int, default=1, help="cases processed in parallel")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="pointfill", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("convert", parents=[common], help="volume -> PLY point cloud")
    s.add_argument("input")
    s.add_argument("--spacing", type=float, help="resample to this isotropic spacing (mm) first")
    s.add_argument("--world", action="store_true", help="keep mm coordinates instead of normalizing")
    s.add_argument("--binary", action="store_true", help="binary little-endian PLY")
    s.set_defaults(func=cmd_convert)

    s = sub.add_parser("train", parents=[common], help="train the completion model")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--phantoms", type=int, help="train on N synthetic shell phantoms")
    src.add_argument("--dataset", help="dataset root")
    s.add_argument("--layout", default="skullbreak", choices=("skullbreak", "skullfix"))
    s.add_argument("--steps", type=int)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("complete", parents=[common], help="reconstruct defects")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("inputs", nargs="+", help="defective volumes (.nrrd or sidecar .json)")
    s.add_argument("--refinements", type=int)
    s.add_argument("--mesh", action="store_true", help="also write an STL surface")
    s.set_defaults(func=cmd_complete)

    s = sub.add_parser("evaluate", parents=[common], help="DSC, BDSC, HD95 and CD")
    s.add_argument("--pred", nargs="+", required=True, help="predicted volumes or one directory")
    s.add_argument("--gt", nargs="+", required=True, help="ground-truth volumes or one directory")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", parents=[common], help="sweep a pipeline key over phantoms")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--sweep", required=True, metavar="pipeline.KEY=V1,V2")
    s.add_argument("--phantoms", type=int, default=8)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("bench", parents=[common], help="memory and time versus group count")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--groups", default="1,4,10")
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--assert", dest="assert_", action="store_true",
                   help="fail (exit 5) unless memory is flat and time roughly linear")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("phantoms", parents=[common], help="write synthetic phantom volumes")
    s.add_argument("--count", type=int)
    s.set_defaults(func=cmd_phantoms)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config, args.overrides)
        if args.seed is not None:
            cfg.seed = args.seed
        return args.func(args, cfg)
    except TrainingDivergedError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except BenchAssertionError as exc:
        print(f"assertion failed: {exc}", file=sys.stderr)
        return EXIT_ASSERT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
