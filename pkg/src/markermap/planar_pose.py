"""Camera-from-marker pose from 4 observed corners, with both ambiguous solutions.

Planar targets admit two pose solutions that differ by a reflection of
the plane about the viewing axis; when their reprojection errors are
similar the observation cannot be trusted. The solver here estimates a
homography from the undistorted corners, decomposes it into a first
pose, constructs the reflected twin in the canonical frame where the
marker center sits on the optical axis, and refines both candidates by
damped Gauss-Newton on the fully-distorted reprojection error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import DegenerateObservation
from .geometry import (CameraIntrinsics, MarkerGeometry, Pose6, Transform4,
                       matrix_to_rodrigues)

ERR_FLOOR = 1e-12  # px^2, guards the ambiguity ratio against exact-zero errors
DEFAULT_AMBIGUITY_RATIO = 3.0


@dataclass(frozen=True)
class CornerObservation:
    """Pixel locations of one marker's 4 corners in one frame (corner order c1..c4)."""

    marker_id: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.marker_id < 0:
            raise ValueError("marker_id must be >= 0")
        pix = np.asarray(self.pixels, dtype=float)
        if pix.shape != (4, 2) or not np.isfinite(pix).all():
            raise ValueError("pixels must be a finite (4, 2) array")
        pix = pix.copy()
        pix.setflags(write=False)
        object.__setattr__(self, "pixels", pix)


@dataclass(frozen=True)
class PoseCandidatePair:
    """Both planar-pose solutions (marker -> camera) with per-corner mean errors (px^2)."""

    best: Pose6
    alt: Pose6
    err_best: float
    err_alt: float
    ambiguous: bool


def _is_strictly_convex(pix) -> bool:
    cross = []
    for k in range(4):
        a = pix[(k + 1) % 4] - pix[k]
        b = pix[(k + 2) % 4] - pix[(k + 1) % 4]
        cross.append(a[0] * b[1] - a[1] * b[0])
    cross = np.array(cross)
    return bool(np.all(cross > 1e-9) or np.all(cross < -1e-9))


def _normalize_points(pts):
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    mean_dist = np.mean(np.linalg.norm(centered, axis=1))
    if mean_dist < 1e-12:
        raise DegenerateObservation("coincident points")
    s = np.sqrt(2.0) / mean_dist
    T = np.array([[s, 0.0, -s * centroid[0]],
                  [0.0, s, -s * centroid[1]],
                  [0.0, 0.0, 1.0]])
    return centered * s, T


def _homography(src, dst):
    """DLT homography mapping src (N,2) to dst (N,2), Hartley-normalized."""
    src_n, T_src = _normalize_points(src)
    dst_n, T_dst = _normalize_points(dst)
    n = src.shape[0]
    A = np.zeros((2 * n, 9))
    for k in range(n):
        x, y = src_n[k]
        u, v = dst_n[k]
        A[2 * k] = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]
        A[2 * k + 1] = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]
    _, s, vt = np.linalg.svd(A)
    if s[-2] < 1e-12:
        raise DegenerateObservation("rank-deficient homography system")
    H = vt[-1].reshape(3, 3)
    H = np.linalg.inv(T_dst) @ H @ T_src
    return H


def _project_to_so3(M):
    u, _, vt = np.linalg.svd(M)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def _pose_from_homography(H):
    """First-guess (R, t) from a calibrated plane-to-image homography."""
    if H[2, 2] < 0:
        H = -H
    b1 = H[:, 0]
    b2 = H[:, 1]
    lam = 2.0 / (np.linalg.norm(b1) + np.linalg.norm(b2))
    r1 = lam * b1
    r2 = lam * b2
    r3 = np.cross(r1, r2)
    R = _project_to_so3(np.column_stack((r1, r2, r3)))
    t = lam * H[:, 2]
    if t[2] <= 0:
        raise DegenerateObservation("homography places the marker behind the camera")
    return R, t


def _rotation_gap(Ra, Rb) -> float:
    """Angle (rad) between two rotations."""
    c = np.clip(0.5 * (np.trace(Ra.T @ Rb) - 1.0), -1.0, 1.0)
    return float(np.arccos(c))


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _reflected_twin(R, t):
    """Second planar solution: mirror the plane normal about the viewing ray.

    In the frame where the marker center lies on the optical axis, the
    two reprojection-error minima share their z-rotations and differ by
    the sign of the middle (tilt) angle of the ZYZ decomposition.
    """
    d = np.linalg.norm(t)
    if d < 1e-12:
        return R
    view = t / d
    axis = np.cross(view, np.array([0.0, 0.0, 1.0]))
    s = np.linalg.norm(axis)
    c = float(np.clip(view[2], -1.0, 1.0))
    if s < 1e-12:
        Rv = np.eye(3) if c > 0 else None
        if Rv is None:
            return R
    else:
        Rv = _kernels.rodrigues_matrix(axis / s * np.arctan2(s, c))
    Rc = Rv @ R
    sin_beta = np.hypot(Rc[0, 2], Rc[1, 2])
    beta = np.arctan2(sin_beta, Rc[2, 2])
    if sin_beta < 1e-9:
        # fronto-parallel: the decomposition only fixes alpha + gamma and the
        # twin coincides with the first solution
        alpha = 0.0
        gamma = np.arctan2(Rc[1, 0], Rc[0, 0])
        if Rc[2, 2] < 0.0:
            gamma = -gamma
    else:
        alpha = np.arctan2(Rc[1, 2], Rc[0, 2])
        gamma = np.arctan2(Rc[2, 1], -Rc[2, 0])
    flipped = _rot_z(alpha) @ _rot_y(-beta) @ _rot_z(gamma)
    return Rv.T @ flipped


def reprojection_error(cam_from_marker: Transform4, geom: MarkerGeometry,
                       obs: CornerObservation, delta: CameraIntrinsics) -> float:
    """Summed squared corner reprojection error (px^2); +inf behind the camera."""
    res = np.zeros(8)
    r = np.ascontiguousarray(matrix_to_rodrigues(cam_from_marker.rotation))
    ok = _kernels.pose_point_residuals(r, np.ascontiguousarray(cam_from_marker.translation),
                                       geom.corners, obs.pixels, delta.as_array(), res)
    if not ok:
        return np.inf
    return float(res @ res)


def _refine(R, t, geom, obs, delta, max_iter=25, step_tol=1e-8, mu_rel=0.0):
    r0 = np.ascontiguousarray(matrix_to_rodrigues(R))
    r, t, cost, ok = _kernels.refine_pose(r0, np.ascontiguousarray(t, dtype=float),
                                          geom.corners, obs.pixels, delta.as_array(),
                                          max_iter, step_tol, mu_rel)
    return r, t, cost, ok


def solve_planar_pose(geom: MarkerGeometry, obs: CornerObservation,
                      delta: CameraIntrinsics,
                      ambiguity_ratio: float = DEFAULT_AMBIGUITY_RATIO) -> PoseCandidatePair:
    """Both marker->camera pose solutions, refined and sorted by error.

    Raises DegenerateObservation when the corners are not a strictly
    convex quadrilateral or no physically valid pose exists. When only
    one candidate survives refinement, the pair degenerates (alt = best,
    err_alt = +inf, ambiguous = False).
    """
    if not _is_strictly_convex(obs.pixels):
        raise DegenerateObservation(f"marker {obs.marker_id}: corners are not strictly convex")
    normalized = delta.undistort_points(obs.pixels)
    H = _homography(geom.corners[:, :2], normalized)
    R0, t0 = _pose_from_homography(H)

    r_a, t_a, cost_a, ok_a = _refine(R0, t0, geom, obs, delta)
    # the twin starts on a ridge between the two minima: damp its first
    # steps so it settles into its own basin instead of hopping over
    if ok_a:
        R_twin = _reflected_twin(_kernels.rodrigues_matrix(r_a), t_a)
        t_twin = t_a
    else:
        R_twin = _reflected_twin(R0, t0)
        t_twin = t0
    r_b, t_b, cost_b, ok_b = _refine(R_twin, t_twin, geom, obs, delta,
                                     max_iter=50, mu_rel=1e-3)
    if ok_a and ok_b and _rotation_gap(_kernels.rodrigues_matrix(r_a),
                                       _kernels.rodrigues_matrix(r_b)) < 1e-3:
        # strong perspective can erase the second minimum, letting the twin
        # descend into the first basin; keep the constructed reflection and
        # its raw error so the pair still reports two distinct hypotheses
        r_b = matrix_to_rodrigues(R_twin)
        t_b = t_twin
        res = np.zeros(8)
        if _kernels.pose_point_residuals(np.ascontiguousarray(r_b),
                                         np.ascontiguousarray(t_b),
                                         geom.corners, obs.pixels,
                                         delta.as_array(), res):
            cost_b = float(res @ res)
        else:
            ok_b = False

    candidates = []
    if ok_a and np.isfinite(cost_a):
        candidates.append((cost_a, Pose6(r_a, t_a)))
    if ok_b and np.isfinite(cost_b):
        candidates.append((cost_b, Pose6(r_b, t_b)))
    if not candidates:
        raise DegenerateObservation(f"marker {obs.marker_id}: no physically valid pose")
    candidates.sort(key=lambda c: c[0])
    # stored errors are per-corner means
    if len(candidates) == 1:
        cost, pose = candidates[0]
        return PoseCandidatePair(best=pose, alt=pose, err_best=cost / 4.0,
                                 err_alt=np.inf, ambiguous=False)
    (cost_best, pose_best), (cost_alt, pose_alt) = candidates
    err_best = cost_best / 4.0
    err_alt = cost_alt / 4.0
    ambiguous = bool(err_alt / max(err_best, ERR_FLOOR) < ambiguity_ratio)
    return PoseCandidatePair(best=pose_best, alt=pose_alt, err_best=err_best,
                             err_alt=err_alt, ambiguous=ambiguous)
