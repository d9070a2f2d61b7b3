"""Command-line surface: simulate | reconstruct-latent | estimate-motion |
train | render | eval-pose | eval-nvs | perturb-poses.

Every command is deterministic given its inputs and seed. Exit codes: 0 on
success, 1 on validation errors (including unknown commands or flags), 2 on
runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import cmax as cmax_mod
from . import metrics
from .egm import latent_image, to_grayscale
from .events import (
    EventModelError,
    accumulate,
    load_events,
    log_intensity,
    partition,
    save_events_binary,
    save_events_text,
    simulate_events,
)
from .formats import FormatError, load_bundle, load_image, save_image
from .geometry import (
    CameraIntrinsics,
    GeometryError,
    MotionField,
    Pose,
    flow_from_depth,
    interpolate_trajectory,
    load_tum,
    relative_pose,
    save_tum,
)
from .metrics import MetricsError, TrajectoryPair, evaluate_pair, upsample_then_eval
from .pba import PbaError
from .egm import EgmError
from .cmax import CmaxError
from .renderer import RendererError, load_cloud, render
from .trainer import (
    TrainConfig,
    TrainerError,
    perturb_poses,
    prepare_scene,
    save_checkpoint,
    state_with_poses,
    run_stage1_steps,
    train,
)

_VALIDATION_ERRORS = (
    EventModelError, GeometryError, RendererError, EgmError, CmaxError,
    PbaError, TrainerError, MetricsError, FormatError,
    FileNotFoundError, json.JSONDecodeError,
)


class _ArgumentError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _ArgumentError(message)


def load_intrinsics(path: str | Path) -> CameraIntrinsics:
    with open(path) as fh:
        d = json.load(fh)
    return CameraIntrinsics(
        fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
        width=int(d["width"]), height=int(d["height"]),
    )


def _load_frames_dir(path: Path) -> tuple[np.ndarray, list[np.ndarray]]:
    manifest = path / "frames.json"
    if not manifest.exists():
        manifest = path / "bundle.json"
    if not manifest.exists():
        raise FormatError(f"{path}: no frames.json or bundle.json manifest")
    with open(manifest) as fh:
        data = json.load(fh)
    entries = data["frames"] if isinstance(data, dict) else data
    times = []
    frames = []
    for e in entries:
        times.append(float(e["time"]))
        frames.append(load_image(path / e["file"]))
    return np.asarray(times), frames


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _cmd_simulate(args) -> int:
    times, frames = _load_frames_dir(Path(args.frames))
    grays = [f if f.ndim == 2 else to_grayscale(f) for f in frames]
    logs = [log_intensity(g) for g in grays]
    stream = simulate_events(
        logs, times, args.contrast, threshold_jitter=args.jitter, seed=args.seed
    )
    out = Path(args.out)
    if out.suffix in (".bin", ".evt"):
        save_events_binary(out, stream)
    else:
        save_events_text(out, stream)
    print(json.dumps({"events": len(stream), "out": str(out)}))
    return 0


def _cmd_reconstruct_latent(args) -> int:
    bundle = load_bundle(args.bundle)
    cfg = bundle.config
    grid = partition(bundle.frame_times, cfg.n_sub)
    times = grid.all_times()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for g in range(grid.n_times):
        i = grid.frame_index(g)
        window = [
            accumulate(bundle.events, times[m], times[m + 1]).counts
            for m in range(i * cfg.n_sub, g)
        ]
        base = to_grayscale(bundle.frames[i])
        lat = latent_image(base, window, cfg.contrast, timestamp=times[g])
        name = f"latent_{g:04d}.pgm"
        save_image(out / name, lat.intensity, maxval=65535)
        index.append({"index": g, "time": float(times[g]), "file": name})
    with open(out / "latents.json", "w") as fh:
        json.dump(index, fh, indent=2)
    print(json.dumps({"latents": len(index), "out": str(out)}))
    return 0


def _cmd_estimate_motion(args) -> int:
    k = load_intrinsics(args.intrinsics)
    stream = load_events(args.events)
    depth = load_image(args.depth) * args.depth_scale
    traj_times, traj_poses = load_tum(args.traj)
    dt = args.dt
    t_ref = args.t_ref
    window_times = [t_ref - m * dt for m in range(args.window, -1, -1)]
    poses = interpolate_trajectory(traj_times, traj_poses, window_times)
    ref_pose = poses[-1]
    frames = [
        accumulate(stream, tt, tt + dt, size=(k.width, k.height)).counts
        for tt in window_times
    ]
    flows: list[MotionField | None] = []
    for pose, tt in zip(poses, window_times):
        if tt == t_ref:
            flows.append(None)
        else:
            flows.append(flow_from_depth(k, depth, relative_pose(ref_pose, pose)))
    ipwe = cmax_mod.build_ipwe(frames, flows, timestamp=t_ref)
    loss, _ = cmax_mod.cmax_loss(ipwe)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    span = float(np.abs(ipwe.map).max())
    vis = 0.5 if span == 0 else 0.5 + ipwe.map / (2 * span)
    save_image(out / "ipwe.pgm", vis, maxval=65535)
    record = {"t_ref": t_ref, "window": args.window, "cmax_loss": loss,
              "variance": -loss}
    with open(out / "losses.jsonl", "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
    print(json.dumps(record, sort_keys=True))
    return 0


def _cmd_train(args) -> int:
    config = None
    if args.config:
        with open(args.config) as fh:
            config = TrainConfig.from_json_dict(json.load(fh))
    bundle = load_bundle(args.bundle, config)
    scene = prepare_scene(
        bundle.frames, bundle.frame_times, bundle.events, bundle.intrinsics,
        bundle.config,
    )
    state = train(scene, bundle.config, init_depth=bundle.init_depth, out_dir=args.out)
    summary = {
        "out": str(args.out),
        "stage1_steps": state.stage1_step,
        "stage2_steps": state.stage2_step,
        "gaussians": len(state.cloud),
        "poses": state.frontier + 1,
    }
    print(json.dumps(summary, sort_keys=True))
    return 0


def _cmd_render(args) -> int:
    cloud = load_cloud(args.cloud)
    k = load_intrinsics(args.intrinsics)
    times, poses = load_tum(args.traj)
    bg = tuple(float(v) for v in args.background.split(","))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, pose in enumerate(poses):
        view = render(cloud, k, pose, background=bg)
        save_image(out / f"render_{i:04d}.ppm", view.color, maxval=args.maxval)
    print(json.dumps({"rendered": len(poses), "out": str(out)}))
    return 0


def _cmd_eval_pose(args) -> int:
    est_times, est_poses = load_tum(args.estimate)
    gt_times, gt_poses = load_tum(args.ground_truth)
    if args.upsample_rate:
        result = upsample_then_eval(
            est_times, est_poses, gt_times, gt_poses,
            target_rate=args.upsample_rate, delta=args.delta,
        )
    else:
        pair = TrajectoryPair(est_times, est_poses, gt_times, gt_poses)
        result = evaluate_pair(pair, delta=args.delta)
    print(json.dumps(result, sort_keys=True))
    return 0


def _cmd_eval_nvs(args) -> int:
    dir_a = Path(args.rendered)
    dir_b = Path(args.reference)
    names = sorted(p.name for p in dir_a.iterdir() if p.suffix in (".pgm", ".ppm"))
    if not names:
        raise FormatError(f"{dir_a}: no PGM/PPM images found")
    per_image = []
    for name in names:
        ref_path = dir_b / name
        if not ref_path.exists():
            raise FormatError(f"{ref_path}: missing reference image")
        a = load_image(dir_a / name)
        b = load_image(ref_path)
        per_image.append(
            {"file": name, "psnr": metrics.psnr(a, b), "ssim": metrics.ssim(a, b)}
        )
    result = {
        "images": per_image,
        "mean_psnr": float(np.mean([r["psnr"] for r in per_image])),
        "mean_ssim": float(np.mean([r["ssim"] for r in per_image])),
    }
    print(json.dumps(result, sort_keys=True))
    return 0


def _cmd_perturb_poses(args) -> int:
    times, poses = load_tum(args.input)
    noisy = perturb_poses(poses, args.noise, args.seed)
    save_tum(args.out, times, noisy)
    print(json.dumps({"poses": len(noisy), "noise": args.noise, "out": args.out}))
    return 0


# ---------------------------------------------------------------------------
# Plot-data export and the pose-disturbance sweep harness
# ---------------------------------------------------------------------------

def emit_plot_data(run_dir: str | Path, out_dir: str | Path | None = None) -> dict[str, Path]:
    """Convert a run directory's logs into CSV series for external plotting.

    Produces ``losses.csv`` from the JSON-lines loss log (header only when the
    log is empty), ``trajectory.csv`` from the TUM file, and ``sweep.csv``
    when a noise-sweep summary is present.
    """
    run = Path(run_dir)
    if not run.is_dir():
        raise FormatError(f"{run}: not a run directory")
    out = Path(out_dir) if out_dir else run
    out.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}

    loss_path = run / "losses.jsonl"
    if loss_path.exists():
        entries = [json.loads(l) for l in loss_path.read_text().splitlines() if l.strip()]
        fields = ["step", "stage", "t_index", "t", "egm", "cmax", "grad", "pba",
                  "total", "color", "l1"]
        csv_path = out / "losses.csv"
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
            writer.writeheader()
            for e in entries:
                writer.writerow(e)
        written["losses"] = csv_path

    traj_path = run / "trajectory.tum"
    if traj_path.exists():
        times, poses = load_tum(traj_path)
        csv_path = out / "trajectory.csv"
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time", "tx", "ty", "tz", "qx", "qy", "qz", "qw"])
            for tt, pose in zip(times, poses):
                c2w = pose.inverse()
                w, x, y, z = c2w.q
                writer.writerow([tt, *c2w.t.tolist(), x, y, z, w])
        written["trajectory"] = csv_path

    sweep_path = run / "sweep.json"
    if sweep_path.exists():
        rows = json.loads(sweep_path.read_text())
        csv_path = out / "sweep.csv"
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["noise", "psnr", "ate"])
            for r in rows:
                writer.writerow([r["noise"], r["psnr"], r["ate"]])
        written["sweep"] = csv_path

    if not written:
        raise FormatError(f"{run}: no logs found to export")
    return written


def run_noise_sweep(
    scene,
    cloud,
    gt_poses: list[Pose],
    noise_levels: list[float],
    config: TrainConfig,
    steps: int,
    out_dir: str | Path | None = None,
) -> list[dict]:
    """Pose-disturbance robustness harness: perturb the ground-truth poses at
    each noise level, optimize stage 1, and report (noise, PSNR, ATE) rows."""
    frame_ids = [i * config.n_sub for i in range(scene.grid.n_frames)]
    gt_times = [scene.time_at(g) for g in frame_ids]
    rows = []
    for level in noise_levels:
        noisy = [gt_poses[0].copy()] + perturb_poses(gt_poses[1:], level, config.seed)
        state = state_with_poses(scene, config, cloud.copy(), noisy)
        run_stage1_steps(state, steps)
        est = [state.poses[g] for g in frame_ids]
        gt_frame = [gt_poses[g] for g in frame_ids]
        pair = TrajectoryPair(gt_times, est, gt_times, gt_frame)
        ate_val = metrics.ate(pair)
        psnrs = []
        for g, fi in zip(frame_ids, range(scene.grid.n_frames)):
            view = render(state.cloud, scene.intrinsics, state.poses[g],
                          background=config.background)
            psnrs.append(metrics.psnr(view.color, scene.frames_rgb[fi]))
        rows.append({"noise": level, "psnr": float(np.mean(psnrs)), "ate": ate_val})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "sweep.json", "w") as fh:
            json.dump(rows, fh, indent=2, sort_keys=True)
    return rows


# ---------------------------------------------------------------------------
# Dispatcher
# ---------------------------------------------------------------------------

def _build_parser() -> _Parser:
    parser = _Parser(prog="evsplat", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate events from a frame directory")
    p.add_argument("--frames", required=True)
    p.add_argument("--contrast", type=float, default=0.25)
    p.add_argument("--jitter", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("reconstruct-latent", help="emit latent frames as PGM")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_reconstruct_latent)

    p = sub.add_parser("estimate-motion", help="IPWE + contrast loss for a pose guess")
    p.add_argument("--events", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--depth-scale", type=float, default=1.0)
    p.add_argument("--traj", required=True)
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--t-ref", type=float, required=True)
    p.add_argument("--dt", type=float, required=True)
    p.add_argument("--window", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_estimate_motion)

    p = sub.add_parser("train", help="run the progressive training pipeline")
    p.add_argument("--bundle", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("render", help="render a cloud along a trajectory")
    p.add_argument("--cloud", required=True)
    p.add_argument("--traj", required=True)
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--background", default="0,0,0")
    p.add_argument("--maxval", type=int, default=255)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("eval-pose", help="trajectory metrics from two TUM files")
    p.add_argument("estimate")
    p.add_argument("ground_truth")
    p.add_argument("--delta", type=int, default=1)
    p.add_argument("--upsample-rate", type=float, default=None)
    p.set_defaults(func=_cmd_eval_pose)

    p = sub.add_parser("eval-nvs", help="PSNR/SSIM between two image directories")
    p.add_argument("rendered")
    p.add_argument("reference")
    p.set_defaults(func=_cmd_eval_nvs)

    p = sub.add_parser("perturb-poses", help="inject se(3) noise into a trajectory")
    p.add_argument("input")
    p.add_argument("out")
    p.add_argument("--noise", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_perturb_poses)

    return parser


def run_command(argv: list[str]) -> int:
    """Execute one CLI command; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _ArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except _VALIDATION_ERRORS as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 2
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
