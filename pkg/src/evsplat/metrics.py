"""Rendering metrics (PSNR, SSIM) and trajectory metrics (ATE, RPE) with
nearest-timestamp association, Umeyama alignment, and pose upsampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .egm import dssim
from .geometry import Pose, interpolate_trajectory

PSNR_CAP_DB = 99.0


class MetricsError(ValueError):
    """Raised on degenerate trajectory configurations."""


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; capped at 99."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricsError("image shapes differ")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM; color images are averaged over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 3:
        vals = [1.0 - 2.0 * dssim(a[..., c], b[..., c]) for c in range(a.shape[2])]
        return float(np.mean(vals))
    return 1.0 - 2.0 * dssim(a, b)


# ---------------------------------------------------------------------------
# Trajectory association and alignment
# ---------------------------------------------------------------------------

@dataclass
class TrajectoryPair:
    """Estimated and ground-truth trajectories, associated by nearest timestamp.

    The default tolerance is half the median spacing of the denser trajectory.
    """

    est_times: np.ndarray
    est_poses: list[Pose]
    gt_times: np.ndarray
    gt_poses: list[Pose]
    tolerance: float | None = None
    matches: list[tuple[int, int]] = field(init=False)

    def __post_init__(self):
        self.est_times = np.asarray(self.est_times, dtype=np.float64)
        self.gt_times = np.asarray(self.gt_times, dtype=np.float64)
        if self.tolerance is None:
            spacings = []
            for ts in (self.est_times, self.gt_times):
                if ts.shape[0] > 1:
                    spacings.append(float(np.median(np.diff(ts))))
            self.tolerance = min(spacings) / 2 if spacings else 0.0
        self.matches = self._associate()

    def _associate(self) -> list[tuple[int, int]]:
        matches: list[tuple[int, int]] = []
        used: set[int] = set()
        for i, tt in enumerate(self.est_times):
            j = int(np.argmin(np.abs(self.gt_times - tt)))
            if abs(self.gt_times[j] - tt) <= self.tolerance and j not in used:
                matches.append((i, j))
                used.add(j)
        return matches

    def positions(self) -> tuple[np.ndarray, np.ndarray]:
        """Matched camera centers (estimated, ground truth), world frame."""
        est = np.stack([self.est_poses[i].camera_center() for i, _ in self.matches])
        gt = np.stack([self.gt_poses[j].camera_center() for _, j in self.matches])
        return est, gt


def align_umeyama(pair: TrajectoryPair) -> tuple[np.ndarray, np.ndarray, float]:
    """Closed-form similarity (R, t, s) minimizing ||gt - (s R est + t)||^2."""
    est, gt = pair.positions()
    return umeyama(est, gt)


def umeyama(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Least-squares similarity transform mapping src points onto dst."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = src.shape[0]
    if n < 3:
        raise MetricsError("need at least 3 associated positions")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    var_s = float((xs**2).sum() / n)
    if var_s < 1e-18:
        raise MetricsError("degenerate (coincident) source positions")
    cov = xd.T @ xs / n
    u, d, vt = np.linalg.svd(cov)
    if np.linalg.matrix_rank(cov) < 2:
        raise MetricsError("degenerate (collinear) configuration")
    s_fix = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_fix[2, 2] = -1.0
    rot = u @ s_fix @ vt
    scale = float(np.trace(np.diag(d) @ s_fix) / var_s)
    trans = mu_d - scale * rot @ mu_s
    return rot, trans, scale


def ate(pair: TrajectoryPair) -> float:
    """RMSE of aligned position residuals (Sim(3) Umeyama alignment)."""
    rot, trans, scale = align_umeyama(pair)
    est, gt = pair.positions()
    aligned = scale * est @ rot.T + trans
    return float(np.sqrt(np.mean(np.sum((gt - aligned) ** 2, axis=1))))


def _rotation_angle_deg(m: np.ndarray) -> float:
    c = np.clip((np.trace(m) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))


def rpe(pair: TrajectoryPair, delta: int = 1) -> tuple[float, float]:
    """Relative pose error over matched pairs ``delta`` steps apart.

    Uses camera-to-world relative motions E = (Q_i^-1 Q_{i+d})^-1 (P_i^-1 P_{i+d});
    returns (translation RMSE x100, rotation RMSE in degrees).
    """
    m = pair.matches
    if len(m) < delta + 1:
        raise MetricsError(f"need at least {delta + 1} associated poses")
    terrs = []
    rerrs = []
    for a in range(len(m) - delta):
        i0, j0 = m[a]
        i1, j1 = m[a + delta]
        # camera-to-world relative motion P_i^-1 P_{i+d} equals T_i T_{i+d}^-1
        # for world-to-camera poses T
        p_rel = pair.est_poses[i0].compose(pair.est_poses[i1].inverse())
        q_rel = pair.gt_poses[j0].compose(pair.gt_poses[j1].inverse())
        err = q_rel.inverse().compose(p_rel)
        terrs.append(np.linalg.norm(err.t))
        rerrs.append(_rotation_angle_deg(err.rotation))
    rpe_t = 100.0 * float(np.sqrt(np.mean(np.square(terrs))))
    rpe_r = float(np.sqrt(np.mean(np.square(rerrs))))
    return rpe_t, rpe_r


def evaluate_pair(pair: TrajectoryPair, delta: int = 1) -> dict[str, float]:
    rpe_t, rpe_r = rpe(pair, delta)
    return {
        "ate": ate(pair),
        "rpe_t": rpe_t,
        "rpe_r": rpe_r,
        "matched": float(len(pair.matches)),
    }


def upsample_then_eval(
    est_times: Sequence[float],
    est_poses: Sequence[Pose],
    gt_times: Sequence[float],
    gt_poses: Sequence[Pose],
    target_rate: float | None = None,
    delta: int = 1,
) -> dict[str, float]:
    """Interpolate the sparse estimate to a dense grid and evaluate against the
    dense ground truth.

    ``target_rate`` (Hz) sets the upsampling grid within the estimate's time
    span; when omitted, the ground-truth timestamps inside the span are used.
    """
    est_times = np.asarray(est_times, dtype=np.float64)
    gt_times = np.asarray(gt_times, dtype=np.float64)
    lo, hi = est_times[0], est_times[-1]
    if target_rate is None:
        targets = gt_times[(gt_times >= lo) & (gt_times <= hi)]
    else:
        count = int(np.floor((hi - lo) * target_rate)) + 1
        targets = lo + np.arange(count) / target_rate
    dense = interpolate_trajectory(est_times, list(est_poses), targets)
    pair = TrajectoryPair(targets, dense, gt_times, list(gt_poses))
    return evaluate_pair(pair, delta)
