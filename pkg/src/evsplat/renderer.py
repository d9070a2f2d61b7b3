"""CPU Gaussian-splat forward renderer with color, depth and coverage outputs.

Gaussians are projected EWA-style to 2D and alpha-blended front to back; depth
is the alpha-weighted blend of per-Gaussian camera-space z. Adjoints for every
Gaussian field and the camera pose (as an se(3) tangent) come from autograd on
the float64 forward pass, which is deterministic: the blend is evaluated in a
fixed chunk order and the depth sort breaks ties by Gaussian index.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import ops
from .geometry import CameraIntrinsics, Pose, quat_normalize, quat_to_matrix

NEAR_PLANE = 0.01
ALPHA_MAX = 0.99
COV2D_REG = 0.3
_BLEND_CHUNK = 256

_GSC_MAGIC = b"GSC1"

# Real SH basis constants, bands 0-3.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.4453057213202769,
    -0.5900435899266435,
)


class RendererError(ValueError):
    """Raised on malformed Gaussian clouds or render inputs."""


def sh_terms(degree: int) -> int:
    return (degree + 1) ** 2


@dataclass(frozen=True)
class Gaussian:
    """One splat: world position, orientation, log-scales, opacity logit, SH."""

    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    sh: np.ndarray


class GaussianCloud:
    """A scene as arrays of Gaussian parameters (all stored unconstrained).

    Scales are kept as logs and opacities as logits so optimizers can run
    unconstrained; rotations are raw quaternions normalized on use.
    """

    def __init__(
        self,
        positions: np.ndarray,
        rotations: np.ndarray,
        log_scales: np.ndarray,
        opacity_logits: np.ndarray,
        sh: np.ndarray,
        sh_degree: int,
    ):
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = self.positions.shape[0]
        self.rotations = np.asarray(rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(opacity_logits, dtype=np.float64).reshape(n)
        self.sh_degree = int(sh_degree)
        if not 0 <= self.sh_degree <= 3:
            raise RendererError("sh_degree must be in 0..3")
        k = sh_terms(self.sh_degree)
        self.sh = np.asarray(sh, dtype=np.float64).reshape(n, 3, k)
        if np.any(np.linalg.norm(self.rotations, axis=1) == 0):
            raise RendererError("zero quaternion in cloud")

    def __len__(self) -> int:
        return self.positions.shape[0]

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(
            self.positions[i].copy(),
            self.rotations[i].copy(),
            self.log_scales[i].copy(),
            float(self.opacity_logits[i]),
            self.sh[i].copy(),
        )

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.positions.copy(),
            self.rotations.copy(),
            self.log_scales.copy(),
            self.opacity_logits.copy(),
            self.sh.copy(),
            self.sh_degree,
        )

    def normalize_rotations(self) -> None:
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        self.rotations /= norms
        flip = self.rotations[:, 0] < 0
        self.rotations[flip] *= -1

    def torch_params(self, requires_grad: bool = False) -> dict[str, torch.Tensor]:
        out = {
            "position": ops.as_tensor(self.positions),
            "rotation": ops.as_tensor(self.rotations),
            "log_scale": ops.as_tensor(self.log_scales),
            "opacity_logit": ops.as_tensor(self.opacity_logits),
            "sh": ops.as_tensor(self.sh),
        }
        if requires_grad:
            for v in out.values():
                v.requires_grad_(True)
        return out

    @classmethod
    def from_params(
        cls, params: dict[str, torch.Tensor], sh_degree: int
    ) -> "GaussianCloud":
        return cls(
            params["position"].detach().numpy(),
            params["rotation"].detach().numpy(),
            params["log_scale"].detach().numpy(),
            params["opacity_logit"].detach().numpy(),
            params["sh"].detach().numpy(),
            sh_degree,
        )


@dataclass(frozen=True)
class RenderedView:
    """Blended color, depth, and accumulated alpha (coverage) per pixel."""

    color: np.ndarray
    depth: np.ndarray
    coverage: np.ndarray


@dataclass(frozen=True)
class RenderGradients:
    """Adjoints per Gaussian field plus the 6-dof pose tangent."""

    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    sh: np.ndarray
    pose: np.ndarray


# ---------------------------------------------------------------------------
# Covariance and spherical harmonics
# ---------------------------------------------------------------------------

def covariance(rotation: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """3D covariance R diag(s^2) R^T of a Gaussian."""
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(scale <= 0):
        raise RendererError("scales must be positive")
    r = quat_to_matrix(quat_normalize(rotation))
    return r @ np.diag(scale**2) @ r.T


def eval_sh_t(degree: int, sh: torch.Tensor, dirs: torch.Tensor) -> torch.Tensor:
    """Evaluate the real SH basis: sh (N, 3, K), dirs unit (N, 3) -> (N, 3)."""
    result = SH_C0 * sh[..., 0]
    if degree < 1:
        return result
    x, y, z = dirs[:, 0:1], dirs[:, 1:2], dirs[:, 2:3]
    result = result - SH_C1 * y * sh[..., 1] + SH_C1 * z * sh[..., 2] - SH_C1 * x * sh[..., 3]
    if degree < 2:
        return result
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    result = (
        result
        + SH_C2[0] * xy * sh[..., 4]
        + SH_C2[1] * yz * sh[..., 5]
        + SH_C2[2] * (2 * zz - xx - yy) * sh[..., 6]
        + SH_C2[3] * xz * sh[..., 7]
        + SH_C2[4] * (xx - yy) * sh[..., 8]
    )
    if degree < 3:
        return result
    result = (
        result
        + SH_C3[0] * y * (3 * xx - yy) * sh[..., 9]
        + SH_C3[1] * xy * z * sh[..., 10]
        + SH_C3[2] * y * (4 * zz - xx - yy) * sh[..., 11]
        + SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy) * sh[..., 12]
        + SH_C3[4] * x * (4 * zz - xx - yy) * sh[..., 13]
        + SH_C3[5] * z * (xx - yy) * sh[..., 14]
        + SH_C3[6] * x * (xx - 3 * yy) * sh[..., 15]
    )
    return result


def sh_to_color(sh: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """View-dependent color of one Gaussian, offset +0.5 and clamped to [0, 1]."""
    sh = np.asarray(sh, dtype=np.float64)
    k = sh.shape[-1]
    degree = int(np.sqrt(k)) - 1
    if sh_terms(degree) != k:
        raise RendererError(f"sh coefficient count {k} is not a full band")
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    val = eval_sh_t(
        degree,
        ops.as_tensor(sh).reshape(1, 3, k),
        ops.as_tensor(d).reshape(1, 3),
    )[0]
    return np.clip(val.numpy() + 0.5, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Forward core
# ---------------------------------------------------------------------------

def render_core_t(
    params: dict[str, torch.Tensor],
    sh_degree: int,
    k: CameraIntrinsics,
    rot_w2c: torch.Tensor,
    trans_w2c: torch.Tensor,
    background: torch.Tensor,
    near: float = NEAR_PLANE,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Differentiable forward pass.

    Returns (color (H, W, 3), depth (H, W), coverage (H, W)); depth is the
    unnormalized alpha-weighted blend of camera-space z.
    """
    h, w = k.height, k.width
    color = torch.zeros((h, w, 3), dtype=torch.float64)
    depth = torch.zeros((h, w), dtype=torch.float64)
    transmittance = torch.ones((h, w), dtype=torch.float64)

    pos = params["position"]
    n = pos.shape[0]
    if n:
        p_cam = pos @ rot_w2c.T + trans_w2c
        z_all = p_cam[:, 2]
        keep = z_all > near
        if keep.any():
            idx_keep = torch.nonzero(keep, as_tuple=False).squeeze(1)
            order = torch.argsort(z_all[idx_keep].detach(), stable=True)
            idx = idx_keep[order]

            p_cam = p_cam[idx]
            x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]

            # view-dependent color
            cam_center = -rot_w2c.T @ trans_w2c
            vdir = pos[idx] - cam_center
            vdir = vdir / torch.linalg.norm(vdir, dim=1, keepdim=True)
            colors = torch.clamp(
                eval_sh_t(sh_degree, params["sh"][idx], vdir) + 0.5, 0.0, 1.0
            )
            opac = torch.sigmoid(params["opacity_logit"][idx])

            # 2D mean and EWA covariance
            mean2d = torch.stack([k.fx * x / z + k.cx, k.fy * y / z + k.cy], dim=-1)
            zeros = torch.zeros_like(z)
            jrow0 = torch.stack([k.fx / z, zeros, -k.fx * x / z**2], dim=-1)
            jrow1 = torch.stack([zeros, k.fy / z, -k.fy * y / z**2], dim=-1)
            jac = torch.stack([jrow0, jrow1], dim=1)

            rot_g = ops.quat_to_rotmat_t(params["rotation"][idx])
            scale = torch.exp(params["log_scale"][idx])
            m = rot_g * scale.unsqueeze(1)
            cov3d = m @ m.transpose(1, 2)
            jw = jac @ rot_w2c
            cov2d = jw @ cov3d @ jw.transpose(1, 2)
            a = cov2d[:, 0, 0] + COV2D_REG
            b = cov2d[:, 0, 1]
            c = cov2d[:, 1, 1] + COV2D_REG
            det = a * c - b * b
            inv_a = c / det
            inv_b = -b / det
            inv_c = a / det

            grid = ops.pixel_grid_t(w, h)
            for s in range(0, idx.shape[0], _BLEND_CHUNK):
                e = min(s + _BLEND_CHUNK, idx.shape[0])
                dx = grid[None, :, :, 0] - mean2d[s:e, None, None, 0]
                dy = grid[None, :, :, 1] - mean2d[s:e, None, None, 1]
                quad = (
                    inv_a[s:e, None, None] * dx * dx
                    + 2 * inv_b[s:e, None, None] * dx * dy
                    + inv_c[s:e, None, None] * dy * dy
                )
                alpha = opac[s:e, None, None] * torch.exp(-0.5 * quad)
                alpha = torch.clamp(alpha, max=ALPHA_MAX)
                keep_prob = 1.0 - alpha
                cum = torch.cumprod(keep_prob, dim=0)
                t_within = torch.cat(
                    [torch.ones((1, h, w), dtype=torch.float64), cum[:-1]], dim=0
                )
                weight = alpha * t_within * transmittance[None]
                color = color + (weight[..., None] * colors[s:e, None, None, :]).sum(0)
                depth = depth + (weight * z[s:e, None, None]).sum(0)
                transmittance = transmittance * cum[-1]

    coverage = 1.0 - transmittance
    color = color + background[None, None, :] * transmittance[..., None]
    return color, depth, coverage


def normalized_depth_t(
    depth: torch.Tensor, coverage: torch.Tensor, eps: float = 1e-6
) -> torch.Tensor:
    """Coverage-normalized depth used as the flow/reprojection depth."""
    return depth / torch.clamp(coverage, min=eps)


def _pose_tensors(pose: Pose) -> tuple[torch.Tensor, torch.Tensor]:
    return ops.as_tensor(pose.rotation), ops.as_tensor(pose.t)


def render(
    cloud: GaussianCloud,
    k: CameraIntrinsics,
    pose: Pose,
    background: tuple[float, float, float] = (0.0, 0.0, 0.0),
    normalize_depth: bool = False,
) -> RenderedView:
    """Render the cloud from a pose; see :func:`render_core_t` for semantics."""
    rot, trans = _pose_tensors(pose)
    bg = torch.tensor(background, dtype=torch.float64)
    with torch.no_grad():
        color, depth, coverage = render_core_t(
            cloud.torch_params(), cloud.sh_degree, k, rot, trans, bg
        )
        if normalize_depth:
            depth = normalized_depth_t(depth, coverage)
    return RenderedView(color.numpy(), depth.numpy(), coverage.numpy())


def render_backward(
    cloud: GaussianCloud,
    k: CameraIntrinsics,
    pose: Pose,
    background: tuple[float, float, float],
    pixel_adjoints: np.ndarray,
) -> RenderGradients:
    """Backpropagate per-pixel adjoints through the renderer.

    ``pixel_adjoints`` is (H, W, 5): three color channels, depth, coverage.
    The pose gradient is returned in the se(3) tangent at the given pose
    (left-multiplicative convention).
    """
    adj = np.asarray(pixel_adjoints, dtype=np.float64)
    if adj.shape != (k.height, k.width, 5):
        raise RendererError(f"pixel adjoints must be (H, W, 5), got {adj.shape}")
    params = cloud.torch_params(requires_grad=True)
    xi = torch.zeros(6, dtype=torch.float64, requires_grad=True)
    mat = ops.pose_with_tangent(ops.as_tensor(pose.matrix), xi)
    bg = torch.tensor(background, dtype=torch.float64)
    color, depth, coverage = render_core_t(
        params, cloud.sh_degree, k, mat[:3, :3], mat[:3, 3], bg
    )
    adj_t = ops.as_tensor(adj)
    total = (
        (color * adj_t[..., :3]).sum()
        + (depth * adj_t[..., 3]).sum()
        + (coverage * adj_t[..., 4]).sum()
    )
    total.backward()

    def grad(name: str) -> np.ndarray:
        g = params[name].grad
        return np.zeros(params[name].shape) if g is None else g.numpy().copy()

    pose_grad = np.zeros(6) if xi.grad is None else xi.grad.numpy().copy()
    return RenderGradients(
        grad("position"), grad("rotation"), grad("log_scale"),
        grad("opacity_logit"), grad("sh"), pose_grad,
    )


def depth_sort_signature(cloud: GaussianCloud, k: CameraIntrinsics, pose: Pose) -> np.ndarray:
    """Indices of the surviving Gaussians in blend order.

    Gradient checks compare signatures at perturbed parameters to detect (and
    skip) perturbations that change the compositing order.
    """
    p_cam = cloud.positions @ pose.rotation.T + pose.t
    z = p_cam[:, 2]
    keep = np.nonzero(z > NEAR_PLANE)[0]
    order = np.argsort(z[keep], kind="stable")
    return keep[order]


# ---------------------------------------------------------------------------
# Checkpoint format (GSC1) and text export
# ---------------------------------------------------------------------------

def save_cloud(path: str | Path, cloud: GaussianCloud) -> None:
    """Versioned binary checkpoint: magic GSC1, u32 count, u32 sh_degree, then
    per-Gaussian little-endian f32 fields (position, quaternion, log-scale,
    opacity logit, SH channel-major)."""
    n = len(cloud)
    kterms = sh_terms(cloud.sh_degree)
    rec = np.empty((n, 11 + 3 * kterms), dtype="<f4")
    rec[:, 0:3] = cloud.positions
    rec[:, 3:7] = cloud.rotations
    rec[:, 7:10] = cloud.log_scales
    rec[:, 10] = cloud.opacity_logits
    rec[:, 11:] = cloud.sh.reshape(n, 3 * kterms)
    with open(path, "wb") as fh:
        fh.write(_GSC_MAGIC)
        fh.write(struct.pack("<II", n, cloud.sh_degree))
        fh.write(rec.tobytes())


def load_cloud(path: str | Path) -> GaussianCloud:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _GSC_MAGIC:
            raise RendererError(f"{path} is not a GSC1 checkpoint")
        n, degree = struct.unpack("<II", fh.read(8))
        kterms = sh_terms(degree)
        width = 11 + 3 * kterms
        data = np.frombuffer(fh.read(n * width * 4), dtype="<f4")
    if data.shape[0] != n * width:
        raise RendererError(f"truncated checkpoint {path}")
    rec = data.reshape(n, width).astype(np.float64)
    return GaussianCloud(
        rec[:, 0:3], rec[:, 3:7], rec[:, 7:10], rec[:, 10],
        rec[:, 11:].reshape(n, 3, kterms), degree,
    )


def export_cloud_text(path: str | Path, cloud: GaussianCloud) -> None:
    """Lossless (f32-precision) text dump for debugging."""
    n = len(cloud)
    kterms = sh_terms(cloud.sh_degree)
    with open(path, "w") as fh:
        fh.write(f"gsc-text 1\ncount {n}\nsh_degree {cloud.sh_degree}\n")
        for i in range(n):
            vals = np.concatenate(
                [
                    cloud.positions[i], cloud.rotations[i], cloud.log_scales[i],
                    [cloud.opacity_logits[i]], cloud.sh[i].reshape(3 * kterms),
                ]
            ).astype(np.float32)
            fh.write(" ".join(f"{v:.9g}" for v in vals) + "\n")


def import_cloud_text(path: str | Path) -> GaussianCloud:
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "gsc-text 1":
            raise RendererError(f"{path} is not a gsc text export")
        n = int(fh.readline().split()[1])
        degree = int(fh.readline().split()[1])
        kterms = sh_terms(degree)
        rows = [np.array([float(v) for v in fh.readline().split()]) for _ in range(n)]
    rec = np.stack(rows) if rows else np.zeros((0, 11 + 3 * kterms))
    return GaussianCloud(
        rec[:, 0:3], rec[:, 3:7], rec[:, 7:10], rec[:, 10],
        rec[:, 11:].reshape(n, 3, kterms), degree,
    )
