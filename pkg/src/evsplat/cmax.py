"""Piece-wise event warping, IPWE construction, and the contrast and
gradient-domain losses.

Event frames from the trailing window are inverse-warped (bilinear) to the
reference subinterval with depth-and-pose induced flow and averaged into the
image of piece-wise warped events (IPWE). Sharpness is the IPWE variance; the
gradient-domain term ties the IPWE to log-brightness differences of the
rendered view along the forward flow.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from . import ops
from .events import EventFrame
from .geometry import MotionField


class CmaxError(ValueError):
    """Raised on inconsistent frame/flow dimensions."""


@dataclass(frozen=True)
class IPWE:
    """Average of r+1 warped event frames at a reference timestamp."""

    map: np.ndarray
    timestamp: float
    window: int


def _counts(frame: EventFrame | np.ndarray) -> np.ndarray:
    arr = frame.counts if isinstance(frame, EventFrame) else frame
    return np.asarray(arr, dtype=np.float64)


def warp_frame_t(
    frame: torch.Tensor, flow: torch.Tensor, valid: torch.Tensor
) -> torch.Tensor:
    """Inverse warp: out(u) = frame(u + flow(u)); zero out of bounds/invalid."""
    h, w = frame.shape
    grid = ops.pixel_grid_t(w, h)
    xs = grid[..., 0] + flow[..., 0]
    ys = grid[..., 1] + flow[..., 1]
    out, inside = ops.bilinear_sample_t(frame, xs, ys)
    return out * (inside & valid).to(frame.dtype)


def warp_event_frame(frame: EventFrame | np.ndarray, flow: MotionField) -> np.ndarray:
    """Warp an event-count grid along a motion field (bilinear inverse warp)."""
    counts = _counts(frame)
    if counts.shape != flow.flow.shape[:2]:
        raise CmaxError("event frame and flow dimensions differ")
    with torch.no_grad():
        out = warp_frame_t(
            ops.as_tensor(counts),
            ops.as_tensor(flow.flow),
            torch.from_numpy(np.ascontiguousarray(flow.valid)),
        )
    return out.numpy()


def build_ipwe_t(
    frames: Sequence[torch.Tensor],
    flows: Sequence[tuple[torch.Tensor, torch.Tensor] | None],
) -> torch.Tensor:
    """Mean of warped frames; a ``None`` flow means the identity warp."""
    acc = None
    for frame, fl in zip(frames, flows):
        warped = frame if fl is None else warp_frame_t(frame, fl[0], fl[1])
        acc = warped if acc is None else acc + warped
    return acc / len(frames)


def build_ipwe(
    frames: Sequence[EventFrame | np.ndarray],
    flows: Sequence[MotionField | None],
    timestamp: float = 0.0,
) -> IPWE:
    """Average the window's event frames warped to the reference timestamp.

    ``frames`` is ordered oldest to newest with the reference frame last; its
    flow entry should be ``None`` (identity). Truncated windows (fewer than
    r+1 frames near the sequence start) are the caller's responsibility.
    """
    if not frames:
        raise CmaxError("need at least one event frame")
    if len(frames) != len(flows):
        raise CmaxError("one flow per event frame required")
    frame_ts = [ops.as_tensor(_counts(f)) for f in frames]
    flow_ts = [
        None
        if fl is None
        else (ops.as_tensor(fl.flow), torch.from_numpy(np.ascontiguousarray(fl.valid)))
        for fl in flows
    ]
    with torch.no_grad():
        out = build_ipwe_t(frame_ts, flow_ts)
    return IPWE(out.numpy(), float(timestamp), len(frames) - 1)


def cmax_loss_t(ipwe: torch.Tensor) -> torch.Tensor:
    """Negative variance of the IPWE over all pixels."""
    return -torch.var(ipwe, unbiased=False)


def cmax_loss(ipwe: IPWE | np.ndarray) -> tuple[float, np.ndarray]:
    """Contrast loss -Var(IPWE) and its adjoints -2 (x - mean) / P."""
    grid = ipwe.map if isinstance(ipwe, IPWE) else np.asarray(ipwe, dtype=np.float64)
    if grid.size == 0:
        raise CmaxError("empty IPWE grid")
    mean = grid.mean()
    loss = -float(np.mean((grid - mean) ** 2))
    adj = -2.0 * (grid - mean) / grid.size
    return loss, adj


def grad_loss_t(
    ipwe: torch.Tensor,
    log_luma: torch.Tensor,
    flow_next: torch.Tensor,
    flow_valid: torch.Tensor,
    contrast: float,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Gradient-domain residual; returns (loss, any_valid flag tensor)."""
    h, w = log_luma.shape
    grid = ops.pixel_grid_t(w, h)
    xs = grid[..., 0] + flow_next[..., 0]
    ys = grid[..., 1] + flow_next[..., 1]
    sampled, inside = ops.bilinear_sample_t(log_luma, xs, ys)
    valid = inside & flow_valid
    residual = contrast * ipwe - (log_luma - sampled)
    mask = valid.to(log_luma.dtype)
    count = mask.sum()
    any_valid = count > 0
    safe = torch.where(any_valid, count, torch.ones_like(count))
    loss = (residual * residual * mask).sum() / safe
    return loss, any_valid


def grad_loss(
    ipwe: IPWE | np.ndarray,
    log_luma: np.ndarray,
    flow_next: MotionField,
    contrast: float,
) -> tuple[float, np.ndarray, bool]:
    """Mean squared Eq.-style residual over valid pixels plus adjoints on the
    log image; the returned flag is true when no pixel was valid (loss 0)."""
    if contrast <= 0:
        raise CmaxError("contrast threshold must be positive")
    grid = ipwe.map if isinstance(ipwe, IPWE) else np.asarray(ipwe, dtype=np.float64)
    if grid.shape != log_luma.shape or grid.shape != flow_next.flow.shape[:2]:
        raise CmaxError("ipwe, log image and flow dimensions differ")
    log_t = ops.as_tensor(np.asarray(log_luma, dtype=np.float64))
    log_t.requires_grad_(True)
    loss_t, any_valid = grad_loss_t(
        ops.as_tensor(grid),
        log_t,
        ops.as_tensor(flow_next.flow),
        torch.from_numpy(np.ascontiguousarray(flow_next.valid)),
        contrast,
    )
    loss_t.backward()
    degenerate = not bool(any_valid)
    return ops.scalar(loss_t), log_t.grad.numpy().copy(), degenerate


def legm_loss(
    cmax: float, grad: float, lambda_cm: float = 0.1, lambda_grad: float = 0.2
) -> float:
    """Weighted sum of the contrast and gradient-domain terms."""
    if lambda_cm < 0 or lambda_grad < 0:
        raise CmaxError("weights must be non-negative")
    return lambda_cm * cmax + lambda_grad * grad
