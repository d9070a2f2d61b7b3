"""Differentiable tensor kernels shared by the renderer and the losses.

Everything here works on float64 torch tensors and keeps gradients flowing to
every input, including pose matrices built from tangent-space leaves.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from .geometry import CameraIntrinsics

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def quat_to_rotmat_t(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrices (N, 3, 3) from raw quaternions (N, 4), normalized inside."""
    q = q / torch.linalg.norm(q, dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    row = torch.stack
    return torch.stack(
        [
            row([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            row([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            row([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        dim=-2,
    )


def _skew_t(w: torch.Tensor) -> torch.Tensor:
    zero = torch.zeros((), dtype=w.dtype)
    return torch.stack(
        [
            torch.stack([zero, -w[2], w[1]]),
            torch.stack([w[2], zero, -w[0]]),
            torch.stack([-w[1], w[0], zero]),
        ]
    )


def se3_exp_t(xi: torch.Tensor) -> torch.Tensor:
    """Differentiable se(3) exponential; returns a 4x4 matrix.

    Smooth at xi = 0 (the Taylor branch is selected under a cutoff and both
    branches are evaluated with safe denominators).
    """
    v, w = xi[:3], xi[3:]
    wx = _skew_t(w)
    wx2 = wx @ wx
    theta2 = (w * w).sum()
    small = theta2 < 1e-16
    theta2_safe = torch.where(small, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(theta2_safe)
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0, (1 - torch.cos(theta)) / theta2_safe)
    c = torch.where(small, 1.0 / 6.0 - theta2 / 120.0, (1 - a) / theta2_safe)
    eye = torch.eye(3, dtype=xi.dtype)
    rot = eye + a * wx + b * wx2
    vmat = eye + b * wx + c * wx2
    mat = torch.eye(4, dtype=xi.dtype)
    mat = torch.cat(
        [
            torch.cat([rot, (vmat @ v).reshape(3, 1)], dim=1),
            torch.tensor([[0.0, 0.0, 0.0, 1.0]], dtype=xi.dtype),
        ],
        dim=0,
    )
    return mat


def pose_with_tangent(base_matrix: torch.Tensor, xi: torch.Tensor) -> torch.Tensor:
    """Left-perturbed pose exp(xi) @ T, the differentiable pose parametrization."""
    return se3_exp_t(xi) @ base_matrix


def pixel_grid_t(width: int, height: int) -> torch.Tensor:
    """Pixel-center coordinates as an (H, W, 2) tensor of (x, y)."""
    ys, xs = torch.meshgrid(
        torch.arange(height, dtype=torch.float64),
        torch.arange(width, dtype=torch.float64),
        indexing="ij",
    )
    return torch.stack([xs, ys], dim=-1)


def flow_from_depth_t(
    k: CameraIntrinsics,
    depth: torch.Tensor,
    rel_matrix: torch.Tensor,
    depth_min: float = 1e-4,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Flow (H, W, 2) and validity (H, W) from depth and a relative pose matrix.

    Invalid pixels (shallow depth or points behind the target camera) get a
    flow computed from safe placeholders so gradients stay finite; callers
    must mask them out.
    """
    h, w = depth.shape
    grid = pixel_grid_t(w, h)
    valid = depth > depth_min
    d_safe = torch.where(valid, depth, torch.ones_like(depth))
    x = (grid[..., 0] - k.cx) / k.fx * d_safe
    y = (grid[..., 1] - k.cy) / k.fy * d_safe
    pts = torch.stack([x, y, d_safe], dim=-1)
    rot = rel_matrix[:3, :3]
    trans = rel_matrix[:3, 3]
    moved = pts @ rot.T + trans
    z = moved[..., 2]
    valid = valid & (z > depth_min)
    z_safe = torch.where(valid, z, torch.ones_like(z))
    u = k.fx * moved[..., 0] / z_safe + k.cx
    v = k.fy * moved[..., 1] / z_safe + k.cy
    flow = torch.stack([u, v], dim=-1) - grid
    return flow, valid


def bilinear_sample_t(
    image: torch.Tensor, x: torch.Tensor, y: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Bilinear samples of ``image`` at continuous (x, y); zero outside.

    Args:
        image: (H, W) or (H, W, C) tensor.
        x, y: equally-shaped sample coordinates.

    Returns:
        (samples, inside) where ``inside`` is true for positions within the
        fully supported interpolation domain [0, W-1] x [0, H-1].
    """
    h, w = image.shape[0], image.shape[1]
    chan = image.ndim == 3
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    wx = x - x0
    wy = y - y0
    x0i = x0.long()
    y0i = y0.long()

    def corner(xi, yi):
        ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        xc = xi.clamp(0, w - 1)
        yc = yi.clamp(0, h - 1)
        val = image[yc, xc]
        mask = ok.to(image.dtype)
        if chan:
            mask = mask.unsqueeze(-1)
        return val * mask, ok

    v00, _ = corner(x0i, y0i)
    v01, _ = corner(x0i + 1, y0i)
    v10, _ = corner(x0i, y0i + 1)
    v11, _ = corner(x0i + 1, y0i + 1)
    if chan:
        wx = wx.unsqueeze(-1)
        wy = wy.unsqueeze(-1)
    out = (
        v00 * (1 - wx) * (1 - wy)
        + v01 * wx * (1 - wy)
        + v10 * (1 - wx) * wy
        + v11 * wx * wy
    )
    return out, inside


def to_grayscale_t(rgb: torch.Tensor) -> torch.Tensor:
    """Rec. 601 luma of an (H, W, 3) image."""
    r, g, b = LUMA_WEIGHTS
    return r * rgb[..., 0] + g * rgb[..., 1] + b * rgb[..., 2]


# ---------------------------------------------------------------------------
# SSIM (Gaussian-weighted, matching the reference formulation)
# ---------------------------------------------------------------------------

_WINDOW_SIZE = 11
_WINDOW_SIGMA = 1.5


def gaussian_window(size: int = _WINDOW_SIZE, sigma: float = _WINDOW_SIGMA) -> torch.Tensor:
    """Normalized 2D Gaussian window used by SSIM."""
    r = size // 2
    xs = torch.arange(-r, r + 1, dtype=torch.float64)
    g = torch.exp(-0.5 * (xs / sigma) ** 2)
    g = g / g.sum()
    return torch.outer(g, g)


def _filter_valid(img: torch.Tensor, window: torch.Tensor) -> torch.Tensor:
    out = torch.nn.functional.conv2d(
        img.unsqueeze(0).unsqueeze(0), window.unsqueeze(0).unsqueeze(0)
    )
    return out[0, 0]


def ssim_t(
    a: torch.Tensor,
    b: torch.Tensor,
    data_range: float = 1.0,
    k1: float = 0.01,
    k2: float = 0.03,
) -> torch.Tensor:
    """Mean structural similarity of two single-channel images.

    Uses an 11x11 Gaussian window (sigma 1.5) and valid-window convolution,
    which matches reference implementations that crop the filter padding.
    """
    if a.shape != b.shape:
        raise ValueError("image shapes differ")
    if min(a.shape) < _WINDOW_SIZE:
        raise ValueError(f"image smaller than the {_WINDOW_SIZE}x{_WINDOW_SIZE} window")
    window = gaussian_window().to(a.dtype)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a = _filter_valid(a, window)
    mu_b = _filter_valid(b, window)
    ea2 = _filter_valid(a * a, window)
    eb2 = _filter_valid(b * b, window)
    eab = _filter_valid(a * b, window)
    var_a = ea2 - mu_a * mu_a
    var_b = eb2 - mu_b * mu_b
    cov = eab - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    return s.mean()


def dssim_t(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0) -> torch.Tensor:
    """Structural dissimilarity (1 - SSIM) / 2."""
    return (1.0 - ssim_t(a, b, data_range)) / 2.0


def as_tensor(arr: np.ndarray) -> torch.Tensor:
    """Float64 tensor view of a numpy array (copies to guarantee contiguity)."""
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float64))


def scalar(t: torch.Tensor) -> float:
    """Python float of a 0-dim tensor, detached from any graph."""
    return float(t.detach())
