"""Progressive joint optimization of camera poses and Gaussians.

Stage 1 minimizes the event-driven total (event rendering loss, contrast and
gradient-domain terms, and weighted photometric bundle adjustment) over all
Gaussian parameters and the optimizable poses; stage 2 freezes everything but
the SH color coefficients and fits the RGB video frames. Poses live on the
subinterval grid; the first pose is pinned to the identity as the gauge.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import cmax as cmax_mod
from . import ops
from .egm import egm_loss_t, latent_image, to_grayscale
from .events import (
    DEFAULT_LOG_EPS,
    EventStream,
    SubintervalGrid,
    event_frames_on_grid,
    partition,
)
from .geometry import COVERAGE_MIN, CameraIntrinsics, Pose, se3_exp
from .pba import pba_loss_t, sample_pixels
from .renderer import (
    GaussianCloud,
    load_cloud,
    normalized_depth_t,
    render_core_t,
    save_cloud,
    sh_terms,
)
from .geometry import load_tum, save_tum


class TrainerError(ValueError):
    """Raised on invalid configuration or out-of-order training calls."""


CONFIG_VERSION = 1


@dataclass
class TrainConfig:
    """All loss weights, thresholds and schedules; defaults follow the
    published hyperparameters, with desk-scale knobs exposed."""

    contrast: float = 0.25
    n_sub: int = 6
    window: int = 3
    lambda_dssim: float = 0.2
    lambda_cm: float = 0.1
    lambda_grad: float = 0.2
    lambda_pba: float = 0.5
    stage_ratio: str = "4:1"
    pose_lr_start: float = 1e-5
    pose_lr_end: float = 1e-6
    pose_lr_decay_steps: int | None = None
    lr_position: float = 1.6e-4
    lr_opacity: float = 0.05
    lr_sh: float = 2.5e-3
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    iters_per_timestamp: int = 300
    warmup_steps: int = 50
    warmup_lr: float | None = None
    final_steps: int = 0
    pba_samples: int = 4096
    seed: int = 0
    sh_degree: int = 1
    init_stride: int = 2
    init_opacity: float = 0.9
    init_scale_factor: float = 0.6
    init_depth_default: float = 1.0
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    register_steps: int = 200
    register_lr: float = 2e-3
    frames_only: bool = False
    stage2_mode: str = "interleaved"
    detach_pba_depth: bool = False

    def __post_init__(self):
        for name in ("lambda_dssim", "lambda_cm", "lambda_grad", "lambda_pba"):
            if getattr(self, name) < 0:
                raise TrainerError(f"{name} must be non-negative")
        if not 0.0 <= self.lambda_dssim <= 1.0:
            raise TrainerError("lambda_dssim must lie in [0, 1]")
        self.ratio_pair()
        if self.stage2_mode not in ("interleaved", "end"):
            raise TrainerError("stage2_mode must be 'interleaved' or 'end'")
        if self.pose_lr_start <= 0 or self.pose_lr_end <= 0:
            raise TrainerError("pose learning rates must be positive")

    def ratio_pair(self) -> tuple[int, int]:
        parts = self.stage_ratio.split(":")
        try:
            a, b = (int(p) for p in parts)
        except ValueError as exc:
            raise TrainerError(f"bad stage ratio {self.stage_ratio!r}") from exc
        if a <= 0 or b <= 0:
            raise TrainerError("stage ratio parts must be positive")
        return a, b

    def to_json_dict(self) -> dict:
        out = {"version": CONFIG_VERSION}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_json_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        version = data.pop("version", None)
        if version != CONFIG_VERSION:
            raise TrainerError(f"unsupported config version {version!r}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise TrainerError(f"unknown config keys: {sorted(unknown)}")
        if "background" in data:
            data["background"] = tuple(data["background"])
        return cls(**data)


# ---------------------------------------------------------------------------
# Scene preparation
# ---------------------------------------------------------------------------

@dataclass
class Scene:
    """Prepared training inputs: frames, event-frame bank and latent targets."""

    intrinsics: CameraIntrinsics
    frame_times: np.ndarray
    frames_rgb: list[np.ndarray]
    grid: SubintervalGrid
    event_counts: list[np.ndarray]
    frames_gray: list[np.ndarray] = field(default_factory=list)
    latents: list[np.ndarray] = field(default_factory=list)
    contrast: float = 0.25

    @property
    def n_times(self) -> int:
        return self.grid.n_times

    def time_at(self, g: int) -> float:
        return self.grid.time_at(g)

    def frame_index_at(self, g: int) -> int:
        return self.grid.frame_index(g)


def prepare_scene(
    frames_rgb: Sequence[np.ndarray],
    frame_times: Sequence[float],
    stream: EventStream,
    intrinsics: CameraIntrinsics,
    config: TrainConfig,
) -> Scene:
    """Slice the event stream onto the subinterval grid and precompute the
    grayscale frames and latent images used as stage-1 targets."""
    grid = partition(frame_times, config.n_sub)
    bank = [ef.counts.astype(np.float64) for ef in event_frames_on_grid(stream, grid)]
    frames = [np.asarray(f, dtype=np.float64) for f in frames_rgb]
    grays = [to_grayscale(f) for f in frames]
    scene = Scene(
        intrinsics=intrinsics,
        frame_times=np.asarray(frame_times, dtype=np.float64),
        frames_rgb=frames,
        grid=grid,
        event_counts=bank,
        frames_gray=grays,
        contrast=config.contrast,
    )
    n = config.n_sub
    for g in range(grid.n_times):
        i = grid.frame_index(g)
        window = bank[i * n : g]
        lat = latent_image(grays[i], window, config.contrast, timestamp=grid.time_at(g))
        scene.latents.append(lat.intensity)
    return scene


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Minimal Adam with per-key moment buffers and step counters."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}

    def step(self, key: str, grad: np.ndarray, lr: float) -> np.ndarray:
        grad = np.asarray(grad, dtype=np.float64)
        if key not in self.m:
            self.m[key] = np.zeros_like(grad)
            self.v[key] = np.zeros_like(grad)
            self.steps[key] = 0
        self.steps[key] += 1
        t = self.steps[key]
        self.m[key] = self.beta1 * self.m[key] + (1 - self.beta1) * grad
        self.v[key] = self.beta2 * self.v[key] + (1 - self.beta2) * grad**2
        mhat = self.m[key] / (1 - self.beta1**t)
        vhat = self.v[key] / (1 - self.beta2**t)
        return -lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# Training state
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    scene: Scene
    config: TrainConfig
    cloud: GaussianCloud
    poses: list[Pose]
    optimizable: list[bool]
    frontier: int = 0
    stage1_step: int = 0
    stage2_step: int = 0
    scene_extent: float = 1.0
    optimizer: Adam = field(default_factory=Adam)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    loss_log: list[dict] = field(default_factory=list)

    @property
    def frontier_time(self) -> float:
        return self.scene.time_at(self.frontier)

    def pose_lr(self) -> float:
        cfg = self.config
        total = cfg.pose_lr_decay_steps or max(
            (self.scene.n_times - 1) * cfg.iters_per_timestamp, 1
        )
        frac = min(self.stage1_step / total, 1.0)
        return cfg.pose_lr_start * (cfg.pose_lr_end / cfg.pose_lr_start) ** frac


def init_cloud(
    first_frame: np.ndarray,
    intrinsics: CameraIntrinsics,
    init_depth: np.ndarray | None,
    config: TrainConfig,
) -> GaussianCloud:
    """Seed Gaussians by back-projecting a strided pixel grid of the first
    frame at the provided depth (or the configured constant)."""
    frame = np.asarray(first_frame, dtype=np.float64)
    h, w = frame.shape[:2]
    stride = config.init_stride
    ys, xs = np.meshgrid(
        np.arange(0, h, stride), np.arange(0, w, stride), indexing="ij"
    )
    ys = ys.ravel()
    xs = xs.ravel()
    if init_depth is not None:
        depths = np.asarray(init_depth, dtype=np.float64)[ys, xs]
        depths = np.maximum(depths, 1e-3)
    else:
        depths = np.full(ys.shape, config.init_depth_default)
    px = (xs - intrinsics.cx) / intrinsics.fx * depths
    py = (ys - intrinsics.cy) / intrinsics.fy * depths
    positions = np.stack([px, py, depths], axis=1)
    n = positions.shape[0]
    rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    sigma = config.init_scale_factor * stride * depths / intrinsics.fx
    log_scales = np.log(sigma)[:, None].repeat(3, axis=1)
    opacity = np.full(n, math.log(config.init_opacity / (1 - config.init_opacity)))
    colors = frame[ys, xs] if frame.ndim == 3 else np.repeat(frame[ys, xs, None], 3, 1)
    kterms = sh_terms(config.sh_degree)
    sh = np.zeros((n, 3, kterms))
    sh[:, :, 0] = (colors - 0.5) / 0.28209479177387814
    return GaussianCloud(positions, rotations, log_scales, opacity, sh, config.sh_degree)


def init_scene(
    scene: Scene, config: TrainConfig, init_depth: np.ndarray | None = None
) -> TrainState:
    """Initial training state: back-projected cloud, identity gauge pose."""
    cloud = init_cloud(scene.frames_rgb[0], scene.intrinsics, init_depth, config)
    centered = cloud.positions - cloud.positions.mean(axis=0)
    extent = float(np.max(np.linalg.norm(centered, axis=1)))
    return TrainState(
        scene=scene,
        config=config,
        cloud=cloud,
        poses=[Pose.identity()],
        optimizable=[False],
        scene_extent=max(extent, 1e-6),
        rng=np.random.default_rng(config.seed),
    )


def state_with_poses(
    scene: Scene,
    config: TrainConfig,
    cloud: GaussianCloud,
    poses: Sequence[Pose],
    first_optimizable: bool = False,
) -> TrainState:
    """State with a full pose table already in place (disturbance harnesses
    and checkpoint resume); the first pose stays the gauge unless requested."""
    if len(poses) != scene.n_times:
        raise TrainerError("need one pose per grid timestamp")
    centered = cloud.positions - cloud.positions.mean(axis=0)
    extent = float(np.max(np.linalg.norm(centered, axis=1))) if len(cloud) else 1.0
    flags = [first_optimizable] + [True] * (len(poses) - 1)
    return TrainState(
        scene=scene,
        config=config,
        cloud=cloud,
        poses=[p.copy() for p in poses],
        optimizable=flags,
        frontier=scene.n_times - 1,
        scene_extent=max(extent, 1e-6),
        rng=np.random.default_rng(config.seed),
    )


# ---------------------------------------------------------------------------
# Differentiable step internals
# ---------------------------------------------------------------------------

def _invert_se3_t(mat: torch.Tensor) -> torch.Tensor:
    rot = mat[:3, :3]
    trans = mat[:3, 3]
    top = torch.cat([rot.T, (-rot.T @ trans).reshape(3, 1)], dim=1)
    bottom = torch.tensor([[0.0, 0.0, 0.0, 1.0]], dtype=mat.dtype)
    return torch.cat([top, bottom], dim=0)


class _PoseLeaves:
    """Tangent leaves for the optimizable poses touched by one step."""

    def __init__(self, state: TrainState):
        self.state = state
        self.leaves: dict[int, torch.Tensor] = {}
        self.mats: dict[int, torch.Tensor] = {}

    def matrix(self, idx: int) -> torch.Tensor:
        if idx not in self.mats:
            base = ops.as_tensor(self.state.poses[idx].matrix)
            if self.state.optimizable[idx]:
                xi = torch.zeros(6, dtype=torch.float64, requires_grad=True)
                self.leaves[idx] = xi
                self.mats[idx] = ops.pose_with_tangent(base, xi)
            else:
                self.mats[idx] = base
        return self.mats[idx]

    def apply_grads(self, lr: float) -> None:
        for idx, xi in self.leaves.items():
            if xi.grad is None:
                continue
            delta = self.state.optimizer.step(f"pose/{idx}", xi.grad.numpy(), lr)
            self.state.poses[idx] = se3_exp(delta).compose(self.state.poses[idx])


def _gauss_lrs(state: TrainState) -> dict[str, float]:
    cfg = state.config
    return {
        "position": cfg.lr_position * state.scene_extent,
        "rotation": cfg.lr_rotation,
        "log_scale": cfg.lr_scale,
        "opacity_logit": cfg.lr_opacity,
        "sh": cfg.lr_sh,
    }


def _apply_gauss_grads(state: TrainState, params: dict[str, torch.Tensor]) -> None:
    lrs = _gauss_lrs(state)
    cloud = state.cloud
    targets = {
        "position": cloud.positions,
        "rotation": cloud.rotations,
        "log_scale": cloud.log_scales,
        "opacity_logit": cloud.opacity_logits,
        "sh": cloud.sh,
    }
    for name, tensor in params.items():
        if tensor.grad is None:
            continue
        delta = state.optimizer.step(name, tensor.grad.numpy(), lrs[name])
        targets[name] += delta
    cloud.rotations /= np.linalg.norm(cloud.rotations, axis=1, keepdims=True)


def _render_at(
    state: TrainState, params: dict[str, torch.Tensor], pose_mat: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    k = state.scene.intrinsics
    bg = torch.tensor(state.config.background, dtype=torch.float64)
    return render_core_t(params, state.cloud.sh_degree, k, pose_mat[:3, :3], pose_mat[:3, 3], bg)


def _stage1_graph(
    state: TrainState, g: int, params: dict[str, torch.Tensor], leaves: _PoseLeaves
) -> tuple[torch.Tensor, dict[str, float]]:
    """Build the stage-1 loss graph at grid index g; returns (total, parts)."""
    cfg = state.config
    scene = state.scene
    k = scene.intrinsics
    color, depth, coverage = _render_at(state, params, leaves.matrix(g))
    gray = ops.to_grayscale_t(color)
    latent = ops.as_tensor(scene.latents[g])
    l_egm = egm_loss_t(gray, latent, cfg.lambda_dssim)
    parts = {"egm": ops.scalar(l_egm)}
    total = l_egm

    use_events = not cfg.frames_only
    depth_n = normalized_depth_t(depth, coverage)
    cov_ok = coverage.detach() >= COVERAGE_MIN
    inv_g = _invert_se3_t(leaves.matrix(g))

    if use_events and (cfg.lambda_cm > 0 or cfg.lambda_grad > 0):
        n_bank = len(scene.event_counts)
        frame_ids = [g - m for m in range(cfg.window, -1, -1) if 0 <= g - m < n_bank]
        if frame_ids:
            frames_t = [ops.as_tensor(scene.event_counts[fi]) for fi in frame_ids]
            flows = []
            for fi in frame_ids:
                if fi == g:
                    flows.append(None)
                    continue
                rel = leaves.matrix(fi) @ inv_g
                fl, ok = ops.flow_from_depth_t(k, depth_n, rel)
                flows.append((fl, ok & cov_ok))
            ipwe = cmax_mod.build_ipwe_t(frames_t, flows)
            l_cm = cmax_mod.cmax_loss_t(ipwe)
            parts["cmax"] = ops.scalar(l_cm)
            total = total + cfg.lambda_cm * l_cm
            if cfg.lambda_grad > 0 and g >= 1:
                rel_next = leaves.matrix(g) @ _invert_se3_t(leaves.matrix(g - 1)) @ leaves.matrix(g)
                rel_next = rel_next @ inv_g
                fl_next, ok_next = ops.flow_from_depth_t(k, depth_n, rel_next)
                log_luma = torch.log(gray + DEFAULT_LOG_EPS)
                l_grad, _ = cmax_mod.grad_loss_t(
                    ipwe, log_luma, fl_next, ok_next & cov_ok, cfg.contrast
                )
                parts["grad"] = ops.scalar(l_grad)
                total = total + cfg.lambda_grad * l_grad

    if use_events and cfg.lambda_pba > 0:
        i = scene.frame_index_at(g)
        src = i if scene.time_at(g) > scene.frame_times[i] else i - 1
        if src >= 0:
            valid_np = coverage.detach().numpy() >= COVERAGE_MIN
            n_valid = int(valid_np.sum())
            if n_valid:
                n_samp = min(cfg.pba_samples, n_valid)
                seed = int(state.rng.integers(0, 2**31 - 1))
                samples = sample_pixels(k.width, k.height, n_samp, seed, valid_np)
                rel = leaves.matrix(src * cfg.n_sub) @ inv_g
                xy = torch.from_numpy(samples.coordinates)
                sample_valid = torch.ones(xy.shape[0], dtype=torch.bool)
                l_pba, _ = pba_loss_t(
                    color,
                    depth_n,
                    k,
                    rel,
                    ops.as_tensor(scene.frames_rgb[src]),
                    xy,
                    sample_valid,
                    cfg.detach_pba_depth,
                )
                parts["pba"] = ops.scalar(l_pba)
                total = total + cfg.lambda_pba * l_pba

    parts["total"] = ops.scalar(total)
    return total, parts


# ---------------------------------------------------------------------------
# Public training operations
# ---------------------------------------------------------------------------

def warmup_pose(
    state: TrainState, g: int, steps: int | None = None, lr: float | None = None
) -> dict[str, float]:
    """Pose-only descent on the event rendering loss at grid index g.

    Used when a new timestamp joins the frontier, and by the disturbance
    harness to pull badly initialized poses back into the photometric basin
    before joint optimization.
    """
    cfg = state.config
    if steps is None:
        steps = cfg.warmup_steps
    if lr is None:
        lr = cfg.warmup_lr if cfg.warmup_lr is not None else cfg.pose_lr_start
    params = state.cloud.torch_params(requires_grad=False)
    last = {"egm": 0.0}
    for _ in range(steps):
        leaves = _PoseLeaves(state)
        color, _, _ = _render_at(state, params, leaves.matrix(g))
        gray = ops.to_grayscale_t(color)
        loss = egm_loss_t(gray, ops.as_tensor(state.scene.latents[g]), cfg.lambda_dssim)
        loss.backward()
        leaves.apply_grads(lr)
        last = {"egm": ops.scalar(loss)}
    return last


def add_timestamp(state: TrainState, g: int) -> dict[str, float]:
    """Extend the frontier to grid index g: extrapolate the new pose from the
    two most recent ones and warm it up pose-only on the event rendering loss."""
    if g != state.frontier + 1:
        raise TrainerError(
            f"timestamp {g} is not the next grid index after frontier {state.frontier}"
        )
    if g >= 2:
        step = state.poses[g - 1].compose(state.poses[g - 2].inverse())
        new_pose = step.compose(state.poses[g - 1])
    else:
        new_pose = state.poses[g - 1].copy()
    state.poses.append(new_pose)
    state.optimizable.append(True)
    state.frontier = g
    return warmup_pose(state, g)


def train_step_stage1(state: TrainState, g: int) -> dict[str, float]:
    """One joint optimization step at grid index g (must be at or before the
    frontier). Returns the loss breakdown that was also appended to the log."""
    if g > state.frontier:
        raise TrainerError(f"timestamp index {g} is beyond the frontier")
    params = state.cloud.torch_params(requires_grad=True)
    leaves = _PoseLeaves(state)
    total, parts = _stage1_graph(state, g, params, leaves)
    total.backward()
    _apply_gauss_grads(state, params)
    leaves.apply_grads(state.pose_lr())
    state.stage1_step += 1
    entry = {"step": state.stage1_step, "stage": 1, "t_index": g,
             "t": state.scene.time_at(g)}
    entry.update({k: v for k, v in parts.items()})
    state.loss_log.append(entry)
    return parts


def train_step_stage2(state: TrainState, frame_i: int) -> dict[str, float]:
    """One SH-only color step against video frame ``frame_i``; every non-SH
    parameter and every pose is untouched (bit-identical)."""
    g = frame_i * state.config.n_sub
    if g > state.frontier:
        raise TrainerError(f"frame {frame_i} is beyond the frontier")
    cfg = state.config
    params = state.cloud.torch_params(requires_grad=False)
    params["sh"].requires_grad_(True)
    pose_mat = ops.as_tensor(state.poses[g].matrix)
    color, _, _ = _render_at(state, params, pose_mat)
    target = ops.as_tensor(state.scene.frames_rgb[frame_i])
    l1 = torch.mean(torch.abs(color - target))
    d = ops.dssim_t(ops.to_grayscale_t(color), ops.to_grayscale_t(target))
    loss = (1 - cfg.lambda_dssim) * l1 + cfg.lambda_dssim * d
    loss.backward()
    delta = state.optimizer.step("sh", params["sh"].grad.numpy(), cfg.lr_sh)
    state.cloud.sh += delta
    state.stage2_step += 1
    parts = {"color": ops.scalar(loss), "l1": ops.scalar(l1)}
    entry = {"step": state.stage2_step, "stage": 2, "t_index": g,
             "t": state.scene.time_at(g)}
    entry.update(parts)
    state.loss_log.append(entry)
    return parts


def run_stage1_steps(state: TrainState, steps: int) -> None:
    """Sample grid indices uniformly up to the frontier and step stage 1."""
    for _ in range(steps):
        g = int(state.rng.integers(0, state.frontier + 1))
        if state.config.frames_only:
            frames = _frame_grid_indices(state)
            g = int(frames[state.rng.integers(0, len(frames))])
        train_step_stage1(state, g)


def _frame_grid_indices(state: TrainState) -> list[int]:
    n = state.config.n_sub
    all_frames = [i * n for i in range(state.scene.grid.n_frames)]
    return [g for g in all_frames if g <= state.frontier]


def run_stage2_block(state: TrainState, steps: int) -> None:
    frames = [g // state.config.n_sub for g in _frame_grid_indices(state)]
    for _ in range(steps):
        fi = frames[int(state.rng.integers(0, len(frames)))]
        train_step_stage2(state, fi)


def train(
    scene: Scene,
    config: TrainConfig,
    init_depth: np.ndarray | None = None,
    out_dir: str | Path | None = None,
    callback: Callable[[TrainState], None] | None = None,
) -> TrainState:
    """Full progressive pipeline: grow the frontier one subinterval at a time,
    warm up the new pose, run the joint stage-1 window, and interleave the
    SH-only stage-2 block at the configured ratio."""
    state = init_scene(scene, config, init_depth)
    s1, s2 = config.ratio_pair()
    for g in range(1, scene.n_times):
        add_timestamp(state, g)
        run_stage1_steps(state, config.iters_per_timestamp)
        if config.stage2_mode == "interleaved":
            run_stage2_block(state, max(config.iters_per_timestamp * s2 // s1, 1))
        if callback is not None:
            callback(state)
    if config.final_steps:
        run_stage1_steps(state, config.final_steps)
    if config.stage2_mode == "end":
        run_stage2_block(state, max(state.stage1_step * s2 // s1, 1))
    if out_dir is not None:
        save_checkpoint(out_dir, state)
    return state


# ---------------------------------------------------------------------------
# Test-pose registration and pose perturbation
# ---------------------------------------------------------------------------

def register_test_pose(
    cloud: GaussianCloud,
    intrinsics: CameraIntrinsics,
    test_image: np.ndarray,
    init_pose: Pose,
    config: TrainConfig | None = None,
) -> tuple[Pose, bool]:
    """Optimize a 6-dof pose against a frozen cloud by photometric error.

    Returns the best-seen pose and a divergence flag (loss exceeded 10x its
    starting value at some iteration).
    """
    cfg = config or TrainConfig()
    target = ops.as_tensor(np.asarray(test_image, dtype=np.float64))
    params = cloud.torch_params(requires_grad=False)
    bg = torch.tensor(cfg.background, dtype=torch.float64)
    opt = Adam()
    pose = init_pose.copy()
    best_pose = pose.copy()
    best_loss = math.inf
    first_loss = None
    diverged = False
    gray_target = ops.to_grayscale_t(target) if target.ndim == 3 else target
    for step in range(cfg.register_steps):
        xi = torch.zeros(6, dtype=torch.float64, requires_grad=True)
        mat = ops.pose_with_tangent(ops.as_tensor(pose.matrix), xi)
        color, _, _ = render_core_t(
            params, cloud.sh_degree, intrinsics, mat[:3, :3], mat[:3, 3], bg
        )
        if target.ndim == 3:
            l1 = torch.mean(torch.abs(color - target))
            dss = ops.dssim_t(ops.to_grayscale_t(color), gray_target)
        else:
            gray = ops.to_grayscale_t(color)
            l1 = torch.mean(torch.abs(gray - target))
            dss = ops.dssim_t(gray, gray_target)
        loss = (1 - cfg.lambda_dssim) * l1 + cfg.lambda_dssim * dss
        loss.backward()
        val = ops.scalar(loss)
        if first_loss is None:
            first_loss = val if val > 0 else 1e-12
        if val < best_loss:
            best_loss = val
            best_pose = pose.copy()
        if val > 10.0 * first_loss:
            diverged = True
        delta = opt.step("pose", xi.grad.numpy(), cfg.register_lr)
        pose = se3_exp(delta).compose(pose)
    return best_pose, diverged


def perturb_poses(
    poses: Sequence[Pose], noise: float, seed: int
) -> list[Pose]:
    """Left-multiply each pose by exp of a Gaussian tangent draw (std ``noise``
    per axis); deterministic per seed."""
    if noise < 0:
        raise TrainerError("noise level must be non-negative")
    rng = np.random.default_rng(seed)
    out = []
    for pose in poses:
        xi = rng.normal(0.0, noise, 6) if noise > 0 else np.zeros(6)
        out.append(se3_exp(xi).compose(pose))
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(out_dir: str | Path, state: TrainState) -> None:
    """Cloud (GSC1), trajectory (TUM), config snapshot and loss log."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_cloud(out / "cloud.gsc", state.cloud)
    times = [state.scene.time_at(g) for g in range(state.frontier + 1)]
    save_tum(out / "trajectory.tum", times, state.poses)
    with open(out / "config.json", "w") as fh:
        json.dump(state.config.to_json_dict(), fh, indent=2, sort_keys=True)
    with open(out / "losses.jsonl", "w") as fh:
        for entry in state.loss_log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def load_checkpoint(run_dir: str | Path, scene: Scene) -> TrainState:
    """Rebuild a state from a run directory (optimizer moments restart)."""
    run = Path(run_dir)
    with open(run / "config.json") as fh:
        config = TrainConfig.from_json_dict(json.load(fh))
    cloud = load_cloud(run / "cloud.gsc")
    _, poses = load_tum(run / "trajectory.tum")
    if len(poses) != scene.n_times:
        raise TrainerError("checkpoint trajectory does not cover the scene grid")
    state = state_with_poses(scene, config, cloud, poses)
    log_path = run / "losses.jsonl"
    if log_path.exists():
        with open(log_path) as fh:
            state.loss_log = [json.loads(line) for line in fh if line.strip()]
        state.stage1_step = sum(1 for e in state.loss_log if e.get("stage") == 1)
        state.stage2_step = sum(1 for e in state.loss_log if e.get("stage") == 2)
    return state
