"""Map and trajectory accuracy: Horn alignment, corner error, trajectory error.

Both metrics first remove the arbitrary global reference of the
estimate with a closed-form least-squares (rigid or similarity)
alignment, then report the RMSE: over matched 3D marker corners for the
corner error, over matched camera positions for the trajectory error.
An optional grid search recovers the metric scale of scale-free
estimates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NoOverlap
from .geometry import MarkerGeometry, Transform4

TIMESTAMP_TOL = 0.010  # s, association window when frame ids are unusable
DEFAULT_SCALE_GRID = (0.01, 3.0, 0.001)


@dataclass(frozen=True)
class Alignment:
    """Similarity transform y ~ scale * R x + t (scale = 1 in rigid mode)."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, float)
        return self.scale * (p @ self.rotation.T) + self.translation


def horn_align(source, target, with_scale: bool = False) -> Alignment:
    """Closed-form least-squares alignment of corresponded 3D point sets.

    Minimizes sum ||s R x + t - y||^2 (SVD of the cross-covariance,
    reflections excluded). Needs >= 3 non-collinear correspondences.
    """
    src = np.asarray(source, float).reshape(-1, 3)
    dst = np.asarray(target, float).reshape(-1, 3)
    if src.shape != dst.shape or src.shape[0] < 3:
        raise ValueError("need matching point sets with at least 3 points")
    c_src = src.mean(axis=0)
    c_dst = dst.mean(axis=0)
    x = src - c_src
    y = dst - c_dst
    sv = np.linalg.svd(x, compute_uv=False)
    if sv[1] < 1e-12 * max(sv[0], 1e-300):
        raise NoOverlap("degenerate correspondences: source points are collinear")
    H = x.T @ y
    u, s, vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    D = np.diag([1.0, 1.0, d])
    R = vt.T @ D @ u.T
    if with_scale:
        var = (x ** 2).sum()
        scale = float(np.trace(D @ np.diag(s)) / var)
    else:
        scale = 1.0
    t = c_dst - scale * (R @ c_src)
    return Alignment(rotation=R, translation=t, scale=scale)


def aligned_rmse(source, target, with_scale: bool = False) -> float:
    a = horn_align(source, target, with_scale=with_scale)
    d = a.apply(source) - np.asarray(target, float)
    return float(np.sqrt((d ** 2).sum(axis=1).mean()))


@dataclass
class AceResult:
    ace: float  # m, RMSE over matched corners after rigid alignment
    matched_markers: int
    alignment: Alignment


def compute_ace(est_poses: dict, gt_corners: dict, geom: MarkerGeometry) -> AceResult:
    """Absolute corner error between estimated marker poses and true corners."""
    common = sorted(set(est_poses) & set(gt_corners))
    if not common:
        raise NoOverlap("no common markers between estimate and ground truth")
    est = np.concatenate([est_poses[m].apply(geom.corners) for m in common])
    gt = np.concatenate([np.asarray(gt_corners[m], float).reshape(4, 3) for m in common])
    alignment = horn_align(est, gt, with_scale=False)
    d = alignment.apply(est) - gt
    ace = float(np.sqrt((d ** 2).sum(axis=1).mean()))
    return AceResult(ace=ace, matched_markers=len(common), alignment=alignment)


def camera_position(cam_from_world: Transform4) -> np.ndarray:
    """Camera center in the world frame."""
    R = cam_from_world.rotation
    return -(R.T @ cam_from_world.translation)


def _associate(est_entries, gt_entries):
    """Match by frame id when possible, else by nearest timestamp."""
    est_ids = {e[0] for e in est_entries}
    gt_ids = {e[0] for e in gt_entries}
    common = sorted(est_ids & gt_ids)
    if common:
        est_by = {e[0]: e for e in est_entries}
        gt_by = {e[0]: e for e in gt_entries}
        return [(est_by[i], gt_by[i]) for i in common]
    pairs = []
    gt_sorted = sorted(gt_entries, key=lambda e: e[1])
    gt_ts = np.array([e[1] for e in gt_sorted])
    used = set()
    for e in sorted(est_entries, key=lambda x: x[1]):
        k = int(np.searchsorted(gt_ts, e[1]))
        cand = [c for c in (k - 1, k) if 0 <= c < len(gt_sorted) and c not in used]
        if not cand:
            continue
        c = min(cand, key=lambda c: abs(gt_ts[c] - e[1]))
        if abs(gt_ts[c] - e[1]) <= TIMESTAMP_TOL:
            used.add(c)
            pairs.append((e, gt_sorted[c]))
    return pairs


@dataclass
class AteResult:
    ate: float  # m, RMSE over matched camera positions after alignment
    scale: float
    matched_frames: int


def compute_ate(est_traj, gt_traj, with_scale: bool = False,
                scale_grid=None) -> AteResult:
    """Absolute trajectory error between two (frame_id, timestamp, pose) lists.

    Poses map world -> camera. With `scale_grid` = (lo, hi, step), the
    estimate is assumed metric up to an unknown scale s (est = s * true)
    and every s in the grid is tried, keeping the minimum RMSE; with
    `with_scale` alone the similarity alignment solves the scale in
    closed form; otherwise the alignment is rigid.
    """
    pairs = _associate([(e[0], e[1], e[2]) for e in est_traj],
                       [(e[0], e[1], e[2]) for e in gt_traj])
    if len(pairs) < 2:
        raise NoOverlap("no associated frame pairs between the trajectories")
    est = np.stack([camera_position(p[0][2]) for p in pairs])
    gt = np.stack([camera_position(p[1][2]) for p in pairs])
    if scale_grid is not None:
        lo, hi, step = scale_grid
        n = int(round((hi - lo) / step)) + 1
        scales = np.linspace(lo, hi, n)
        best = (np.inf, 1.0)
        for s in scales:
            rmse = aligned_rmse(est / s, gt, with_scale=False)
            if rmse < best[0]:
                best = (rmse, float(s))
        return AteResult(ate=best[0], scale=best[1], matched_frames=len(pairs))
    if with_scale:
        a = horn_align(est, gt, with_scale=True)
        d = a.apply(est) - gt
        return AteResult(ate=float(np.sqrt((d ** 2).sum(axis=1).mean())),
                         scale=1.0 / a.scale if a.scale != 0 else np.inf,
                         matched_frames=len(pairs))
    return AteResult(ate=aligned_rmse(est, gt, with_scale=False), scale=1.0,
                     matched_frames=len(pairs))
