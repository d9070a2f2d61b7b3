"""Pinhole cameras, SE(3) poses, and depth-plus-pose induced optical flow.

Poses are world-to-camera throughout: ``x_cam = R @ x_world + t``. Quaternions
are stored (w, x, y, z) with w >= 0. Twists are 6-vectors ordered
(translation, rotation) and are applied by left multiplication,
``T' = exp(xi) o T``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

DEPTH_MIN = 1e-4
COVERAGE_MIN = 0.5


class GeometryError(ValueError):
    """Raised on invalid camera or pose inputs."""


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole projection model; focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise GeometryError("principal point outside the image")


# ---------------------------------------------------------------------------
# Quaternions
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0:
        raise GeometryError("zero quaternion")
    q = q / n
    if q[0] < 0:
        q = -q
    return q


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns (w, x, y, z) with w >= 0."""
    m = np.asarray(m, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s,
             (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s,
             (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s,
             (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
             (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    return quat_normalize(q)


# ---------------------------------------------------------------------------
# Poses
# ---------------------------------------------------------------------------

class Pose:
    """World-to-camera rigid transform as unit quaternion plus translation."""

    __slots__ = ("q", "t")

    def __init__(self, quaternion: np.ndarray, translation: np.ndarray):
        self.q = quat_normalize(quaternion)
        self.t = np.asarray(translation, dtype=np.float64).reshape(3).copy()

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_rt(cls, rotation: np.ndarray, translation: np.ndarray) -> "Pose":
        return cls(matrix_to_quat(rotation), translation)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls.from_rt(m[:3, :3], m[:3, 3])

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.t
        return m

    def compose(self, other: "Pose") -> "Pose":
        """self o other: apply ``other`` first, then ``self``."""
        ra, rb = self.rotation, other.rotation
        return Pose.from_rt(ra @ rb, ra @ other.t + self.t)

    def inverse(self) -> "Pose":
        r = self.rotation
        return Pose.from_rt(r.T, -r.T @ self.t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.t

    def camera_center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.t

    def copy(self) -> "Pose":
        return Pose(self.q.copy(), self.t.copy())

    def approx_equal(self, other: "Pose", tol: float = 1e-9) -> bool:
        dq = min(np.linalg.norm(self.q - other.q), np.linalg.norm(self.q + other.q))
        return dq <= tol and np.linalg.norm(self.t - other.t) <= tol

    def __repr__(self) -> str:
        return f"Pose(q={self.q.tolist()}, t={self.t.tolist()})"


def relative_pose(t_a: Pose, t_b: Pose) -> Pose:
    """T_b o T_a^-1: maps camera-a coordinates to camera-b coordinates."""
    return t_b.compose(t_a.inverse())


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

def project(k: CameraIntrinsics, p_cam: np.ndarray) -> np.ndarray:
    """Project camera-frame points (..., 3) to pixel coordinates (..., 2)."""
    p = np.asarray(p_cam, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0):
        raise GeometryError("non-positive depth in projection")
    return np.stack(
        [k.fx * p[..., 0] / z + k.cx, k.fy * p[..., 1] / z + k.cy], axis=-1
    )


def unproject(k: CameraIntrinsics, pixel: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Lift pixels (..., 2) at given depths to camera-frame points (..., 3)."""
    pix = np.asarray(pixel, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    if np.any(d <= 0):
        raise GeometryError("non-positive depth in unprojection")
    x = (pix[..., 0] - k.cx) / k.fx * d
    y = (pix[..., 1] - k.cy) / k.fy * d
    return np.stack([x, y, np.broadcast_to(d, x.shape)], axis=-1)


# ---------------------------------------------------------------------------
# se(3) exponential / logarithm
# ---------------------------------------------------------------------------

def _skew(w: np.ndarray) -> np.ndarray:
    return np.array(
        [[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]], dtype=np.float64
    )


def se3_exp(xi: np.ndarray) -> Pose:
    """Exponential map; ``xi`` is (translation, rotation) in the tangent space."""
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    v, w = xi[:3], xi[3:]
    theta = np.linalg.norm(w)
    wx = _skew(w)
    if theta < 1e-10:
        rot = np.eye(3) + wx + 0.5 * (wx @ wx)
        vmat = np.eye(3) + 0.5 * wx + (wx @ wx) / 6.0
    else:
        a = np.sin(theta) / theta
        b = (1 - np.cos(theta)) / theta**2
        c = (1 - a) / theta**2
        rot = np.eye(3) + a * wx + b * (wx @ wx)
        vmat = np.eye(3) + b * wx + c * (wx @ wx)
    return Pose.from_rt(rot, vmat @ v)


def se3_log(pose: Pose) -> np.ndarray:
    """Logarithm map, inverse of :func:`se3_exp`.

    Raises for rotations within 1e-6 of pi, where the axis is ill-conditioned.
    """
    r = pose.rotation
    cos_theta = np.clip((np.trace(r) - 1) / 2, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta > np.pi - 1e-6:
        raise GeometryError("rotation angle too close to pi for a stable log")
    if theta < 1e-10:
        w = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
        wx = _skew(w)
        vinv = np.eye(3) - 0.5 * wx + (wx @ wx) / 12.0
    else:
        w = theta / (2 * np.sin(theta)) * np.array(
            [r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]
        )
        wx = _skew(w)
        a = np.sin(theta) / theta
        b = (1 - np.cos(theta)) / theta**2
        vinv = np.eye(3) - 0.5 * wx + (1 / theta**2) * (1 - a / (2 * b)) * (wx @ wx)
    return np.concatenate([vinv @ pose.t, w])


def extrapolate_pose(t_prev: Pose, t_curr: Pose) -> Pose:
    """Constant-velocity step: exp(log(T_curr o T_prev^-1)) o T_curr."""
    step = t_curr.compose(t_prev.inverse())
    return se3_exp(se3_log(step)).compose(t_curr)


def interpolate_trajectory(
    times: Sequence[float],
    poses: Sequence[Pose],
    target_times: Sequence[float],
) -> list[Pose]:
    """Per-segment geodesic (constant-twist) interpolation at target times."""
    times = np.asarray(times, dtype=np.float64)
    targets = np.asarray(target_times, dtype=np.float64)
    if times.shape[0] != len(poses) or times.shape[0] < 1:
        raise GeometryError("times and poses must align")
    if np.any(np.diff(times) <= 0):
        raise GeometryError("knot times must be strictly increasing")
    if targets.size and (targets.min() < times[0] or targets.max() > times[-1]):
        raise GeometryError("target time outside the knot range")
    out: list[Pose] = []
    for tt in targets:
        idx = int(np.searchsorted(times, tt, side="right")) - 1
        idx = min(max(idx, 0), times.shape[0] - 2) if times.shape[0] > 1 else 0
        if tt == times[idx]:
            out.append(poses[idx].copy())
            continue
        if tt == times[idx + 1]:
            out.append(poses[idx + 1].copy())
            continue
        s = (tt - times[idx]) / (times[idx + 1] - times[idx])
        step = se3_log(poses[idx + 1].compose(poses[idx].inverse()))
        out.append(se3_exp(s * step).compose(poses[idx]))
    return out


# ---------------------------------------------------------------------------
# Depth-and-pose induced flow
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MotionField:
    """Dense 2D flow in pixels plus a validity mask."""

    flow: np.ndarray
    valid: np.ndarray


def flow_from_depth(
    k: CameraIntrinsics,
    depth: np.ndarray,
    t_rel: Pose,
    coverage: np.ndarray | None = None,
    depth_min: float = DEPTH_MIN,
    coverage_min: float = COVERAGE_MIN,
) -> MotionField:
    """Per-pixel flow induced by a depth map and a relative pose.

    For each pixel u the flow is ``proj(T_rel @ unproj(u, D(u))) - u``. Pixels
    with depth below ``depth_min`` (or coverage below ``coverage_min`` when a
    coverage map is given, or that land behind the target camera) are marked
    invalid instead of raising.
    """
    import torch

    from . import ops

    d = torch.from_numpy(np.ascontiguousarray(depth, dtype=np.float64))
    if d.shape != (k.height, k.width):
        raise GeometryError("depth grid does not match the intrinsics")
    rel = torch.from_numpy(t_rel.matrix)
    flow, valid = ops.flow_from_depth_t(k, d, rel, depth_min=depth_min)
    valid_np = valid.numpy()
    if coverage is not None:
        valid_np = valid_np & (np.asarray(coverage) >= coverage_min)
    flow_np = flow.numpy()
    flow_np[~valid_np] = 0.0
    return MotionField(flow_np, valid_np)


# ---------------------------------------------------------------------------
# Trajectory files (TUM interchange format)
# ---------------------------------------------------------------------------

def save_tum(path: str | Path, times: Sequence[float], poses: Sequence[Pose]) -> None:
    """Write a TUM trajectory: ``timestamp tx ty tz qx qy qz qw``, camera-to-world."""
    with open(path, "w") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for tt, pose in zip(times, poses):
            c2w = pose.inverse()
            vals = [tt, *c2w.t.tolist(), c2w.q[1], c2w.q[2], c2w.q[3], c2w.q[0]]
            fh.write(" ".join(repr(float(v)) for v in vals) + "\n")


def load_tum(path: str | Path) -> tuple[np.ndarray, list[Pose]]:
    """Read a TUM trajectory, returning world-to-camera poses."""
    times: list[float] = []
    poses: list[Pose] = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(v) for v in line.replace(",", " ").split()]
            if len(vals) != 8:
                raise GeometryError(f"malformed TUM line in {path}: {line!r}")
            tt, tx, ty, tz, qx, qy, qz, qw = vals
            c2w = Pose(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz]))
            times.append(tt)
            poses.append(c2w.inverse())
    return np.asarray(times), poses
