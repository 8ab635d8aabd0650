"""Command-line entry point: generate, train, decompose, render, prune, evaluate, export-masks."""

from __future__ import annotations

import argparse
import csv
import io as _io
import json
import sys
from pathlib import Path

import numpy as np

from .decomposition import compute_masks
from .density import prune
from .io import (CheckpointError, DatasetError, load_checkpoint, load_dataset, save_checkpoint,
                 write_bytes_atomic, write_gray_png, write_json_atomic, write_mask_png, write_png)
from .rasterizer import render
from .scene import Camera, InvalidParameterError
from .synthetic import SceneSpec, generate, load_spec
from .threads import configure_threads
from .trainer import ContractError, StageIsolationError, TrainConfig, Trainer


class CliError(Exception):
    pass


def _config(args) -> TrainConfig:
    base = json.loads(Path(args.config).read_text()) if getattr(args, "config", None) else {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise CliError(f"--set expects key=value, got {item!r}")
        base[key] = json.loads(value) if value[:1] in "[{0123456789-tfn" else value
    if getattr(args, "lite", False):
        base["lite"] = True
    if getattr(args, "seed", None) is not None:
        base["seed"] = args.seed
    return TrainConfig.from_dict(base)


def _trainer_from(args, config: TrainConfig, ckpt=None) -> Trainer:
    dataset = load_dataset(args.data)
    holdout = getattr(args, "holdout", None)
    if ckpt is None:
        return Trainer(dataset, config, holdout)
    grid, decoder = ckpt.grid, ckpt.decoder
    stages = ckpt.extra.get("stages", [])
    if grid is not None and 3 not in stages and grid.log2_size != config.normalized().log2_hash_size:
        grid = decoder = None  # untrained placeholder from another config; rebuild
    tr = Trainer(dataset, config, holdout, ckpt.cloud, grid, decoder)
    tr.stages_done = list(stages)
    return tr


def _save(trainer: Trainer, path) -> None:
    extra = {
        "zeta": trainer.config.zeta,
        "config": trainer.config.to_dict(),
        "stages": trainer.stages_done,
        "cameras": [c.to_dict() for c in trainer.dataset.cameras],
        "n_frames": trainer.dataset.n_frames,
    }
    save_checkpoint(path, trainer.cloud, trainer.grid, trainer.decoder, extra)


def _write_log(rows, path) -> None:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "stage", "loss", "psnr_holdout"])
    for r in rows:
        p = "" if r["psnr_holdout"] is None else repr(float(r["psnr_holdout"]))
        w.writerow([r["iteration"], r["stage"], repr(float(r["loss"])), p])
    write_bytes_atomic(path, buf.getvalue().encode())


def _sidecar(out, suffix) -> Path:
    out = Path(out)
    return out.with_name(out.stem + suffix)


def cmd_generate(args) -> int:
    spec = load_spec(args.spec) if args.spec else SceneSpec()
    scene = generate(spec, args.seed, args.out)
    print(f"wrote {len(scene.cameras)} cameras x {spec.n_frames} frames to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = _config(args)
    stages = {"all": [1, 2, 3], "1": [1], "2": [2], "3": [3]}[args.stage]
    ckpt = load_checkpoint(args.init) if args.init else None
    if ckpt is None and stages[0] != 1:
        raise CliError(f"--stage {args.stage} needs --init <checkpoint>")
    tr = _trainer_from(args, config, ckpt)
    tr.run(stages)
    _save(tr, args.out)
    _write_log(tr.log, _sidecar(args.out, ".loss.csv"))
    if tr.holdout_idx is not None:
        write_json_atomic(_sidecar(args.out, ".metrics.json"), tr.metrics())
    print(f"trained stages {stages}; {len(tr.cloud)} Gaussians, "
          f"{int(tr.cloud.dynamic_flags.sum())} dynamic -> {args.out}")
    return 0


def cmd_decompose(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    config = TrainConfig.from_dict(ckpt.extra["config"]) if "config" in ckpt.extra else TrainConfig()
    tr = _trainer_from(args, config, ckpt)
    tr.stage2()
    _save(tr, args.out)
    print(f"{int(tr.cloud.dynamic_flags.sum())} of {len(tr.cloud)} Gaussians dynamic -> {args.out}")
    return 0


def _cameras_for(args, ckpt) -> list[Camera]:
    src = Path(args.camera)
    if src.suffix == ".json" or src.exists():
        data = json.loads(src.read_text())
        return [Camera.from_dict(d) for d in (data if isinstance(data, list) else [data])]
    try:
        cam_id = int(args.camera)
    except ValueError:
        raise CliError(f"--camera must be an id or a pose file, got {args.camera!r}") from None
    cams = [Camera.from_dict(d) for d in ckpt.extra.get("cameras", [])]
    if args.data:
        cams = load_dataset(args.data).cameras
    for cam in cams:
        if cam.camera_id == cam_id:
            return [cam]
    raise CliError(f"camera {cam_id} not found (checkpoint has no such camera; pass --data)")


def _times(arg: str, n_frames: int) -> list[tuple[int, float]]:
    if arg == "all":
        n = max(n_frames, 1)
        return [(f, f / (n - 1) if n > 1 else 0.0) for f in range(n)]
    try:
        t = float(arg)
    except ValueError:
        raise CliError(f"--t must be a float or 'all', got {arg!r}") from None
    if not 0.0 <= t <= 1.0:
        raise CliError("--t must lie in [0, 1]")
    return [(None, t)]


def cmd_render(args) -> int:
    from .deform import deform

    ckpt = load_checkpoint(args.ckpt)
    cloud = ckpt.cloud
    bg = tuple(ckpt.extra.get("config", {}).get("background", (0.0, 0.0, 0.0)))
    times = _times(args.t, ckpt.extra.get("n_frames", 1))
    out_dir = Path(args.out)
    animate = cloud.classified and ckpt.grid is not None and ckpt.decoder is not None
    dyn = np.flatnonzero(cloud.dynamic_flags)
    n = 0
    for cam in _cameras_for(args, ckpt):
        for frame, t in times:
            scene = deform(cloud, dyn, ckpt.grid, ckpt.decoder, t)[0] if animate else cloud
            img = render(scene, cam, bg, "color", retain_records=False).color
            name = f"cam{cam.camera_id}_" + (f"frame_{frame:05d}" if frame is not None else f"t{t:.4f}")
            write_png(out_dir / f"{name}.png", img)
            n += 1
    print(f"wrote {n} frames to {out_dir}")
    return 0


def cmd_prune(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    config = TrainConfig.from_dict(ckpt.extra["config"]) if "config" in ckpt.extra else TrainConfig()
    if args.threshold is not None:
        config.prune_threshold = args.threshold
    tr = _trainer_from(args, config, ckpt)
    report = tr.importance(args.stride)
    tr.cloud, _ = prune(tr.cloud, report)
    _save(tr, args.out)
    write_json_atomic(_sidecar(args.out, ".report.json"), report.to_json())
    print(f"pruned {len(report.pruned)} of {len(report.weights)} Gaussians -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    config = TrainConfig.from_dict(ckpt.extra["config"]) if "config" in ckpt.extra else TrainConfig()
    tr = _trainer_from(args, config, ckpt)
    m = tr.metrics()
    print(f"{'frame':>6} {'psnr':>9} {'ssim':>8} {'dssim':>8}")
    for r in m["frames"]:
        print(f"{r['frame']:>6} {r['psnr']:>9.3f} {r['ssim']:>8.4f} {r['dssim']:>8.4f}")
    summary = {k: m[k] for k in ("holdout", "mean_psnr", "mean_ssim", "mean_dssim")}
    print(json.dumps(summary, sort_keys=True))
    if args.json:
        write_json_atomic(args.json, m)
    return 0


def cmd_export_masks(args) -> int:
    dataset = load_dataset(args.data)
    masks = compute_masks(dataset.videos(), args.gamma)
    out = Path(args.out)
    for cam, mask, var in zip(dataset.cameras, masks.masks, masks.variance_maps):
        write_mask_png(out / f"{cam.camera_id}.png", mask)
        write_gray_png(out / f"{cam.camera_id}_std.png", np.clip(np.sqrt(var) / args.gamma, 0, 1))
    print(f"wrote {len(dataset.cameras)} masks to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splat4d", description=__doc__)
    p.add_argument("--threads", type=int, default=None,
                   help="cap the worker pool (also read from $SWIFT4D_THREADS)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dynamic dataset")
    g.add_argument("--spec", help="JSON scene spec (defaults to the standard scene)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="run training stages")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="JSON file with TrainConfig fields")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
    t.add_argument("--lite", action="store_true")
    t.add_argument("--stage", choices=["1", "2", "3", "all"], default="all")
    t.add_argument("--init", help="checkpoint to resume from (needed for --stage 2/3)")
    t.add_argument("--holdout", type=int, default=None, help="camera id kept out of training")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("decompose", help="run only the dynamic-parameter stage")
    d.add_argument("--data", required=True)
    d.add_argument("--ckpt", required=True)
    d.add_argument("--holdout", type=int, default=None)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_decompose)

    r = sub.add_parser("render", help="render PNG frames from a checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--camera", required=True, help="camera id or JSON camera/pose file")
    r.add_argument("--t", default="0", help="normalized time in [0, 1] or 'all'")
    r.add_argument("--data", help="dataset to look camera ids up in")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    pr = sub.add_parser("prune", help="temporal-importance pruning")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--stride", type=int, default=10)
    pr.add_argument("--threshold", type=float, default=None)
    pr.add_argument("--holdout", type=int, default=None)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_prune)

    e = sub.add_parser("evaluate", help="held-out view metrics")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--holdout", type=int, required=True)
    e.add_argument("--json", help="also write the full metrics JSON here")
    e.set_defaults(func=cmd_evaluate)

    m = sub.add_parser("export-masks", help="write temporal-variance masks")
    m.add_argument("--data", required=True)
    m.add_argument("--gamma", type=float, default=0.02)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_export_masks)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        configure_threads(args.threads)
        if getattr(args, "stride", 1) < 1:
            raise CliError("--stride must be >= 1")
        return args.func(args)
    except (CliError, CheckpointError, DatasetError, ContractError, StageIsolationError,
            InvalidParameterError, ValueError, KeyError, OSError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"splat4d {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
