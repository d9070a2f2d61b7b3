"""On-disk formats: portable gray/pixmaps, the scene-bundle manifest, and the
JSON config file. Byte-level layouts are documented in docs/formats.md."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .events import EventStream, load_events
from .geometry import CameraIntrinsics, Pose, load_tum
from .trainer import TrainConfig


class FormatError(ValueError):
    """Raised on malformed files or manifest inconsistencies."""


# ---------------------------------------------------------------------------
# Netpbm images (PGM/PPM, maxval 255 or 65535)
# ---------------------------------------------------------------------------

def save_image(path: str | Path, image: np.ndarray, maxval: int = 255) -> None:
    """Write a [0, 1] image as binary PGM (2D input) or PPM (HxWx3 input)."""
    if maxval not in (255, 65535):
        raise FormatError("maxval must be 255 or 65535")
    img = np.asarray(image, dtype=np.float64)
    quant = np.clip(np.rint(img * maxval), 0, maxval)
    color = img.ndim == 3
    if color and img.shape[2] != 3:
        raise FormatError("color images must have exactly 3 channels")
    magic = "P6" if color else "P5"
    h, w = img.shape[:2]
    dtype = ">u2" if maxval == 65535 else "u1"
    with open(path, "wb") as fh:
        fh.write(f"{magic}\n{w} {h}\n{maxval}\n".encode())
        fh.write(quant.astype(dtype).tobytes())


def load_image(path: str | Path) -> np.ndarray:
    """Read a PGM/PPM (P2/P3/P5/P6) into a float image in [0, 1]."""
    raw = Path(path).read_bytes()
    if raw[:1] != b"P" or raw[1:2] not in b"2356":
        raise FormatError(f"{path} is not a supported PGM/PPM file")
    magic = raw[:2].decode()
    tokens: list[int] = []
    pos = 2
    while len(tokens) < 3:
        m = re.match(rb"\s*(?:#[^\n]*\n\s*)*(\d+)", raw[pos:])
        if m is None:
            raise FormatError(f"truncated header in {path}")
        tokens.append(int(m.group(1)))
        pos += m.end()
    w, h, maxval = tokens
    channels = 3 if magic in ("P3", "P6") else 1
    count = w * h * channels
    if magic in ("P2", "P3"):
        vals = np.array(raw[pos:].split(), dtype=np.float64)
        if vals.shape[0] != count:
            raise FormatError(f"expected {count} samples in {path}")
        data = vals
    else:
        pos += 1  # single whitespace after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos).astype(np.float64)
    img = data.reshape((h, w, 3) if channels == 3 else (h, w))
    return img / maxval


# ---------------------------------------------------------------------------
# Scene bundle
# ---------------------------------------------------------------------------

@dataclass
class SceneBundle:
    """A loaded scene: frames with timestamps, events, and optional extras."""

    root: Path
    intrinsics: CameraIntrinsics
    frame_times: np.ndarray
    frames: list[np.ndarray]
    events: EventStream
    ground_truth: tuple[np.ndarray, list[Pose]] | None
    init_depth: np.ndarray | None
    config: TrainConfig


def _require(manifest: dict, key: str, where: str):
    if key not in manifest:
        raise FormatError(f"{where}: missing required field {key!r}")
    return manifest[key]


def load_bundle(path: str | Path, config: TrainConfig | None = None) -> SceneBundle:
    """Load and validate a scene directory against its ``bundle.json``.

    The manifest lists intrinsics, per-frame timestamps and files, the event
    file, and optional ground-truth trajectory / first-frame depth / config.
    Validation errors name the offending file or field.
    """
    root = Path(path)
    manifest_path = root / "bundle.json"
    if not manifest_path.exists():
        raise FormatError(f"{manifest_path}: manifest file not found")
    with open(manifest_path) as fh:
        manifest = json.load(fh)

    intr = _require(manifest, "intrinsics", "bundle.json")
    try:
        intrinsics = CameraIntrinsics(
            fx=float(intr["fx"]), fy=float(intr["fy"]),
            cx=float(intr["cx"]), cy=float(intr["cy"]),
            width=int(intr["width"]), height=int(intr["height"]),
        )
    except KeyError as exc:
        raise FormatError(f"bundle.json: intrinsics missing {exc}") from exc

    frame_list = _require(manifest, "frames", "bundle.json")
    if len(frame_list) < 2:
        raise FormatError("bundle.json: need at least two frames")
    times = []
    frames = []
    for entry in frame_list:
        fpath = root / _require(entry, "file", "bundle.json frames")
        if not fpath.exists():
            raise FormatError(f"{fpath}: frame file not found")
        img = load_image(fpath)
        if img.shape[:2] != (intrinsics.height, intrinsics.width):
            raise FormatError(f"{fpath}: frame size differs from intrinsics")
        frames.append(img if img.ndim == 3 else np.repeat(img[..., None], 3, axis=2))
        times.append(float(_require(entry, "time", "bundle.json frames")))
    times = np.asarray(times)
    if np.any(np.diff(times) <= 0):
        raise FormatError("bundle.json: frame timestamps must be strictly increasing")

    ev_path = root / _require(manifest, "events", "bundle.json")
    if not ev_path.exists():
        raise FormatError(f"{ev_path}: event file not found")
    stream = load_events(ev_path)
    if len(stream) and (stream.t[0] < times[0] or stream.t[-1] < times[-1] - 1e-9):
        raise FormatError(
            f"{ev_path}: events cover [{stream.t[0]}, {stream.t[-1]}] but frames "
            f"span [{times[0]}, {times[-1]}]"
        )

    gt = None
    if manifest.get("ground_truth"):
        gt_path = root / manifest["ground_truth"]
        if not gt_path.exists():
            raise FormatError(f"{gt_path}: ground-truth trajectory not found")
        gt = load_tum(gt_path)

    depth = None
    if manifest.get("init_depth"):
        d_path = root / manifest["init_depth"]
        if not d_path.exists():
            raise FormatError(f"{d_path}: init depth map not found")
        depth_img = load_image(d_path)
        scale = float(manifest.get("init_depth_scale", 1.0))
        depth = depth_img * scale

    if config is None:
        if manifest.get("config"):
            with open(root / manifest["config"]) as fh:
                config = TrainConfig.from_json_dict(json.load(fh))
        else:
            config = TrainConfig()

    return SceneBundle(
        root=root, intrinsics=intrinsics, frame_times=times, frames=frames,
        events=stream, ground_truth=gt, init_depth=depth, config=config,
    )


def save_bundle(
    path: str | Path,
    intrinsics: CameraIntrinsics,
    frame_times: np.ndarray,
    frames: list[np.ndarray],
    stream: EventStream,
    ground_truth: tuple[np.ndarray, list[Pose]] | None = None,
    init_depth: np.ndarray | None = None,
    depth_scale: float | None = None,
    config: TrainConfig | None = None,
    image_maxval: int = 65535,
) -> Path:
    """Write a bundle directory with its manifest; inverse of load_bundle."""
    from .events import save_events_binary
    from .geometry import save_tum

    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest: dict = {
        "version": 1,
        "intrinsics": {
            "fx": intrinsics.fx, "fy": intrinsics.fy,
            "cx": intrinsics.cx, "cy": intrinsics.cy,
            "width": intrinsics.width, "height": intrinsics.height,
        },
        "frames": [],
        "events": "events.bin",
    }
    for i, (tt, img) in enumerate(zip(frame_times, frames)):
        name = f"frame_{i:04d}.ppm"
        save_image(root / name, img, maxval=image_maxval)
        manifest["frames"].append({"time": float(tt), "file": name})
    save_events_binary(root / "events.bin", stream)
    if ground_truth is not None:
        save_tum(root / "ground_truth.tum", ground_truth[0], ground_truth[1])
        manifest["ground_truth"] = "ground_truth.tum"
    if init_depth is not None:
        scale = depth_scale if depth_scale is not None else float(init_depth.max()) * 1.25
        save_image(root / "init_depth.pgm", init_depth / scale, maxval=65535)
        manifest["init_depth"] = "init_depth.pgm"
        manifest["init_depth_scale"] = scale
    if config is not None:
        with open(root / "config.json", "w") as fh:
            json.dump(config.to_json_dict(), fh, indent=2, sort_keys=True)
        manifest["config"] = "config.json"
    with open(root / "bundle.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return root
