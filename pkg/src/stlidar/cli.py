"""Command-line interface: ``stlidar {synth,train,render,eval}``.

Errors are printed to stderr prefixed with ``stlidar: error:`` and give a
non-zero exit code.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import (
    PRESET_SPECS,
    CheckpointError,
    SceneLoadError,
    config_to_text,
    generate_synthetic,
    load_checkpoint,
    load_scene,
    load_spec,
    save_checkpoint,
    save_scene,
)
from .metrics import REPORT_KEYS, MetricsReport, evaluate_frame
from .plotting import loss_figure, save_scan_images, scan_figure
from .sensor import SensorPose, orthonormalize, range_to_pointcloud
from .trainer import TrainConfig, TrainingDiverged, load_model, predict, refine_stage, train

PROG = "stlidar"
logger = logging.getLogger(PROG)


class CliError(Exception):
    pass


def _echo_config(title: str, cfg: dict, path=None) -> None:
    text = json.dumps(cfg, indent=2, sort_keys=True)
    print(f"== {title} ==")
    print(text)
    if path is not None:
        Path(path).write_text(text + "\n")


# ------------------------------------------------------------------ synth


def cmd_synth(args) -> int:
    if args.spec in PRESET_SPECS:
        spec = PRESET_SPECS[args.spec]()
    else:
        try:
            spec = load_spec(args.spec)
        except (OSError, ValueError, TypeError, KeyError) as e:
            raise CliError(f"bad spec {args.spec}: {e}") from None
    if args.frames is not None:
        spec.n_frames = args.frames
    out = Path(args.out)
    resolved = {"spec": spec.to_dict(), "seed": args.seed}
    out.mkdir(parents=True, exist_ok=True)
    _echo_config("synth", resolved, out / "synth_config.json")
    ds, _ = generate_synthetic(spec, args.seed)
    save_scene(ds, out)
    print(f"wrote {len(ds)} frames to {out} (held out: {ds.heldout})")
    return 0


# ------------------------------------------------------------------ train


def resolve_train_config(args) -> TrainConfig:
    """Preset defaults, then the optional JSON config file, then flags."""
    cfg = TrainConfig.preset(args.preset)
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as e:
            raise CliError(f"cannot read config {args.config}: {e}") from None
        merged = cfg.to_dict()
        for k, v in file_cfg.items():
            if k not in merged:
                raise CliError(f"unknown config key {k!r} in {args.config}")
            if isinstance(v, dict) and isinstance(merged[k], dict):
                merged[k].update(v)
            else:
                merged[k] = v
        cfg = TrainConfig.from_dict(merged)
    if args.iters is not None:
        cfg.iterations = args.iters
    if args.rays_per_batch is not None:
        cfg.rays_per_batch = args.rays_per_batch
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.__post_init__()
    return cfg


def cmd_train(args) -> int:
    ds = load_scene(args.scene)
    cfg = resolve_train_config(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _echo_config("train", dict(cfg.to_dict(), refine=not args.no_refine), f"{out}.config.json")

    def log(it, parts):
        print(f"iter {it:6d} " + " ".join(f"{k}={v:.6f}" for k, v in parts.items()), flush=True)

    res = train(ds, cfg, progress=log)
    ckpt = res.checkpoint
    if not args.no_refine and cfg.refine_epochs > 0:
        ref = refine_stage(res.model, ckpt, ds, cfg, progress=lambda e, p: print(f"refine epoch {e:4d} bce={p['refine']:.6f}", flush=True))
        ckpt = ref.checkpoint
        print(f"refine bce {ref.bce[0]:.6f} -> {ref.bce[-1]:.6f}")
    save_checkpoint(ckpt, out)
    loss_figure(res.history, f"{out}.loss.png")
    print(f"wrote checkpoint {out}")
    return 0


# ----------------------------------------------------------------- render


def parse_pose(text: str) -> SensorPose:
    try:
        vals = np.array([float(v) for v in text.replace(",", " ").split()])
    except ValueError as e:
        raise CliError(f"cannot parse pose: {e}") from None
    if vals.size != 16:
        raise CliError(f"pose needs 16 numbers, got {vals.size}")
    try:
        return SensorPose(orthonormalize(vals.reshape(4, 4)))
    except ValueError as e:
        raise CliError(f"invalid pose: {e}") from None


def cmd_render(args) -> int:
    if not 0.0 <= args.time <= 1.0:
        raise CliError(f"--time must lie in [0, 1], got {args.time}")
    pose = parse_pose(args.pose)
    ckpt = load_checkpoint(args.ckpt)
    model, refiner = load_model(ckpt)
    overrides = {k: v for k, v in (("n_beams", args.beams), ("fov_up_deg", args.fov_up),
                                   ("fov_down_deg", args.fov_down), ("azimuth_count", args.azimuths))
                 if v is not None}
    try:
        config = ckpt.sensor.with_overrides(**overrides)
    except ValueError as e:
        raise CliError(str(e)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config("render", {"sensor": config.__dict__, "pose": pose.matrix.reshape(-1).tolist(),
                            "time": args.time, "refiner": refiner is not None}, out / "render_config.json")
    pred = predict(model, refiner, config, pose, args.time, ckpt.scale)
    scan = pred.scan
    (out / "sensor.cfg").write_text(config_to_text(config))
    scan.depth.astype("<f4").tofile(out / "depth.f32")
    scan.intensity.astype("<f4").tofile(out / "intensity.f32")
    (out / "pose.txt").write_text(" ".join(repr(float(v)) for v in pose.matrix.reshape(-1)) + "\n")
    pc = range_to_pointcloud(scan, config)
    np.savetxt(out / "points.txt", np.column_stack([pc.points, pc.intensity]), fmt="%.6f")
    save_scan_images(scan, out, config.max_range_m)
    print(f"rendered {config.n_beams}x{config.azimuth_count} scan with {int(scan.mask.sum())} returns to {out}")
    return 0


# ------------------------------------------------------------------- eval


def _format_table(rows: list[tuple[str, MetricsReport]]) -> str:
    head = "frame".ljust(8) + "".join(k.rjust(16) for k in REPORT_KEYS)
    lines = [head, "-" * len(head)]
    for name, rep in rows:
        lines.append(name.ljust(8) + "".join(f"{v:16.6f}" for _, v in rep.items()))
    return "\n".join(lines)


def cmd_eval(args) -> int:
    gt = load_scene(args.scene)
    frames = gt.heldout or list(range(len(gt)))
    preds = {}
    dense = {}
    if args.ckpt:
        ckpt = load_checkpoint(args.ckpt)
        if ckpt.sensor != gt.config:
            raise CliError(f"checkpoint sensor {ckpt.sensor} does not match scene sensor {gt.config}")
        model, refiner = load_model(ckpt)
        for i in frames:
            f = gt.frames[i]
            t = float(np.clip(ckpt.scale.time_to_unit(f.timestamp), 0.0, 1.0))
            p = predict(model, refiner, gt.config, f.pose, t, ckpt.scale)
            preds[i], dense[i] = p.scan, (p.rendered.depth, p.rendered.intensity)
    else:
        pred_ds = load_scene(args.pred)
        if pred_ds.config != gt.config or len(pred_ds) != len(gt):
            raise CliError("prediction and ground-truth scenes do not match")
        preds = {i: pred_ds.frames[i] for i in frames}
    rows = []
    for i in frames:
        rep = evaluate_frame(preds[i], gt.frames[i], gt.config, gt_mask=args.gt_mask, pred_dense=dense.get(i))
        rows.append((str(i), rep))
    mean = MetricsReport.mean(r for _, r in rows)
    print(f"== eval ({'gt-mask' if args.gt_mask else 'predicted mask'} protocol) ==")
    print(_format_table(rows + [("mean", mean)]))
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    report.write_text(mean.to_text())
    fig_path = report.with_suffix(".png")
    scans, labels = [], []
    for i in frames[:2]:
        scans += [gt.frames[i], preds[i]]
        labels += [f"gt {i}", f"pred {i}"]
    scan_figure(scans, labels, gt.config.max_range_m, fig_path)
    print(f"wrote report {report} and figure {fig_path}")
    return 0


# ------------------------------------------------------------------ main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog=PROG, description="Space-time LiDAR view synthesis with 4D hybrid neural fields.")
    p.add_argument("--version", action="version", version=f"{PROG} {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scene directory")
    s.add_argument("--spec", default="static",
                   help="JSON spec file or preset name (" + ", ".join(PRESET_SPECS) + ")")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frames", type=int, help="override the frame count")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="fit a field to a scene and write a checkpoint")
    t.add_argument("--scene", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--preset", choices=("desk", "paper"), default="paper")
    t.add_argument("--config", help="JSON file overriding preset values")
    t.add_argument("--iters", type=int)
    t.add_argument("--rays-per-batch", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--no-refine", action="store_true", help="skip the ray-drop refinement stage")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render a scan at a novel pose, time or sensor layout")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--pose", required=True, help="16 numbers, row-major sensor-to-world, metres")
    r.add_argument("--time", type=float, required=True, help="normalized time in [0, 1]")
    r.add_argument("--beams", type=int)
    r.add_argument("--fov-up", type=float)
    r.add_argument("--fov-down", type=float)
    r.add_argument("--azimuths", type=int)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="evaluate held-out frames")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--pred", help="scene directory of predicted scans")
    e.add_argument("--scene", required=True)
    e.add_argument("--gt-mask", action="store_true", help="evaluate range views under the ground-truth mask")
    e.add_argument("--report", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format=f"{PROG}: %(levelname)s: %(message)s")
    if getattr(args, "seed", None) is not None:
        torch.manual_seed(args.seed)
    try:
        return args.func(args)
    except (CliError, SceneLoadError, CheckpointError, TrainingDiverged, ValueError, OSError) as e:
        print(f"{PROG}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
