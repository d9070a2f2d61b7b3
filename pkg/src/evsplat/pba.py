"""Photometric bundle adjustment: squared reprojection error of sampled pixels
from the rendered view into the nearest previous video frame."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import ops
from .geometry import COVERAGE_MIN, DEPTH_MIN, CameraIntrinsics, Pose
from .renderer import RenderedView


class PbaError(ValueError):
    """Raised on invalid sampling requests or mismatched inputs."""


@dataclass(frozen=True)
class PixelSampleSet:
    """Unique in-bounds pixel coordinates, reproducible from the seed."""

    coordinates: np.ndarray
    seed: int

    @property
    def count(self) -> int:
        return self.coordinates.shape[0]


def sample_pixels(
    width: int,
    height: int,
    count: int,
    seed: int,
    validity_mask: np.ndarray | None = None,
) -> PixelSampleSet:
    """Uniform sample of distinct valid pixels, deterministic per seed."""
    if validity_mask is None:
        flat = np.arange(width * height)
    else:
        mask = np.asarray(validity_mask, dtype=bool)
        if mask.shape != (height, width):
            raise PbaError("validity mask shape mismatch")
        flat = np.nonzero(mask.ravel())[0]
    if count > flat.shape[0]:
        raise PbaError(f"requested {count} samples from {flat.shape[0]} valid pixels")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(flat, size=count, replace=False)
    chosen.sort()
    coords = np.stack([chosen % width, chosen // width], axis=1).astype(np.int64)
    return PixelSampleSet(coords, int(seed))


@dataclass(frozen=True)
class PbaResult:
    loss: float
    color_adjoint: np.ndarray
    depth_adjoint: np.ndarray
    pose_adjoint: np.ndarray
    used: int
    degenerate: bool


def pba_loss_t(
    color: torch.Tensor,
    depth: torch.Tensor,
    k: CameraIntrinsics,
    rel_matrix: torch.Tensor,
    source: torch.Tensor,
    sample_xy: torch.Tensor,
    sample_valid: torch.Tensor,
    detach_depth: bool = False,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable core; returns (loss, per-sample survivor mask).

    ``depth`` is the coverage-normalized depth; ``sample_valid`` marks samples
    whose rendered depth is trustworthy. Samples that reproject out of the
    source image are dropped from the mean.
    """
    xs = sample_xy[:, 0]
    ys = sample_xy[:, 1]
    d = depth[ys, xs]
    if detach_depth:
        d = d.detach()
    ok = sample_valid & (d > DEPTH_MIN)
    d_safe = torch.where(ok, d, torch.ones_like(d))
    px = xs.to(depth.dtype)
    py = ys.to(depth.dtype)
    x3 = (px - k.cx) / k.fx * d_safe
    y3 = (py - k.cy) / k.fy * d_safe
    pts = torch.stack([x3, y3, d_safe], dim=1)
    moved = pts @ rel_matrix[:3, :3].T + rel_matrix[:3, 3]
    z = moved[:, 2]
    ok = ok & (z > DEPTH_MIN)
    z_safe = torch.where(ok, z, torch.ones_like(z))
    u = k.fx * moved[:, 0] / z_safe + k.cx
    v = k.fy * moved[:, 1] / z_safe + k.cy
    sampled, inside = ops.bilinear_sample_t(source, u, v)
    ok = ok & inside
    rendered = color[ys, xs]
    residual = sampled - rendered
    mask = ok.to(color.dtype)
    count = mask.sum()
    safe = torch.where(count > 0, count, torch.ones_like(count))
    loss = ((residual * residual).sum(dim=1) * mask).sum() / safe
    return loss, ok


def pba_loss(
    rendered: RenderedView,
    source_frame: np.ndarray,
    k: CameraIntrinsics,
    t_rel: Pose,
    samples: PixelSampleSet,
    detach_depth: bool = False,
) -> PbaResult:
    """Photometric reprojection loss with adjoints on rendered color, rendered
    depth, and the relative pose (se(3) tangent).

    ``rendered.depth`` must be the coverage-normalized depth. ``t_rel`` maps
    the rendered view's camera frame into the source frame's camera.
    """
    src = np.asarray(source_frame, dtype=np.float64)
    if src.shape != rendered.color.shape:
        raise PbaError("source frame and rendered color dimensions differ")
    color_t = ops.as_tensor(rendered.color)
    color_t.requires_grad_(True)
    depth_t = ops.as_tensor(rendered.depth)
    depth_t.requires_grad_(True)
    xi = torch.zeros(6, dtype=torch.float64, requires_grad=True)
    rel = ops.pose_with_tangent(ops.as_tensor(t_rel.matrix), xi)
    xy = torch.from_numpy(samples.coordinates)
    valid_mask = (
        torch.from_numpy(
            np.ascontiguousarray(
                rendered.coverage[samples.coordinates[:, 1], samples.coordinates[:, 0]]
            )
        )
        >= COVERAGE_MIN
    )
    loss_t, ok = pba_loss_t(
        color_t, depth_t, k, rel, ops.as_tensor(src), xy, valid_mask, detach_depth
    )
    loss_t.backward()
    used = int(ok.sum())

    def grad_of(t: torch.Tensor) -> np.ndarray:
        return np.zeros(t.shape) if t.grad is None else t.grad.numpy().copy()

    return PbaResult(
        ops.scalar(loss_t),
        grad_of(color_t),
        grad_of(depth_t),
        grad_of(xi),
        used,
        used == 0,
    )
