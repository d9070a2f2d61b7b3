"""Latent intensity reconstruction from events and the event rendering loss.

The latent image advances the most recent frame through the accumulated event
counts in the shifted log domain ``log(I + eps)``, the exact inverse of the
simulator's threshold model, so reconstruction error stays within one contrast
threshold per pixel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from . import ops
from .events import DEFAULT_LOG_EPS, EventFrame


class EgmError(ValueError):
    """Raised on inconsistent image dimensions or weights."""


@dataclass(frozen=True)
class LatentImage:
    """Grayscale intensity in [0, 1] reconstructed at a subinterval timestamp."""

    intensity: np.ndarray
    timestamp: float


def to_grayscale(rgb: np.ndarray) -> np.ndarray:
    """Rec. 601 luma: 0.299 R + 0.587 G + 0.114 B."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = ops.LUMA_WEIGHTS
    return r * rgb[..., 0] + g * rgb[..., 1] + b * rgb[..., 2]


def latent_image(
    base: np.ndarray,
    event_frames: Sequence[EventFrame | np.ndarray],
    contrast: float,
    timestamp: float = 0.0,
    eps: float = DEFAULT_LOG_EPS,
) -> LatentImage:
    """Advance a grayscale frame through accumulated event counts.

    With no event frames the base is returned unchanged. Otherwise the counts
    are summed, scaled by the contrast threshold and applied in the
    ``log(I + eps)`` domain (``(I + eps) * exp(C * sum) - eps``); the result is
    clipped to [0, 1].
    """
    img = np.asarray(base, dtype=np.float64)
    if contrast <= 0:
        raise EgmError("contrast threshold must be positive")
    if not event_frames:
        return LatentImage(np.clip(img, 0.0, 1.0), float(timestamp))
    total = np.zeros_like(img)
    for ef in event_frames:
        counts = ef.counts if isinstance(ef, EventFrame) else np.asarray(ef)
        if counts.shape != img.shape:
            raise EgmError("event frame and base dimensions differ")
        total = total + counts
    out = (img + eps) * np.exp(contrast * total) - eps
    return LatentImage(np.clip(out, 0.0, 1.0), float(timestamp))


def dssim(a: np.ndarray, b: np.ndarray) -> float:
    """Structural dissimilarity (1 - SSIM) / 2 for images in [0, 1]."""
    a_t = ops.as_tensor(np.asarray(a, dtype=np.float64))
    b_t = ops.as_tensor(np.asarray(b, dtype=np.float64))
    if a_t.shape != b_t.shape:
        raise EgmError("image shapes differ")
    with torch.no_grad():
        return float(ops.dssim_t(a_t, b_t))


def egm_loss_t(
    rendered: torch.Tensor, latent: torch.Tensor, lam: float
) -> torch.Tensor:
    """(1 - lam) L1 + lam DSSIM between a rendered grayscale and a latent image."""
    l1 = torch.mean(torch.abs(rendered - latent))
    if lam == 0.0:
        return l1
    return (1.0 - lam) * l1 + lam * ops.dssim_t(rendered, latent)


def egm_loss(
    rendered: np.ndarray, latent: LatentImage | np.ndarray, lam: float = 0.2
) -> tuple[float, np.ndarray]:
    """Event rendering loss and its exact per-pixel adjoints on ``rendered``."""
    if not 0.0 <= lam <= 1.0:
        raise EgmError("lambda must lie in [0, 1]")
    target = latent.intensity if isinstance(latent, LatentImage) else latent
    rend_t = ops.as_tensor(np.asarray(rendered, dtype=np.float64))
    rend_t.requires_grad_(True)
    tgt_t = ops.as_tensor(np.asarray(target, dtype=np.float64))
    if rend_t.shape != tgt_t.shape:
        raise EgmError("image shapes differ")
    loss = egm_loss_t(rend_t, tgt_t, lam)
    loss.backward()
    return ops.scalar(loss), rend_t.grad.numpy().copy()
