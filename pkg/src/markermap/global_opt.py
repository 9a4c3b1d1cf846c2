"""Joint refinement of marker poses, frame poses and (optionally) intrinsics.

Sparse Levenberg-Marquardt on the stacked corner reprojection
residuals. Markers are rigid: their four corners derive from a single
6-parameter pose, which both shrinks the problem and enforces the true
corner spacing. One marker (the gauge) is held fixed to pin the free
global reference frame; each observation's Jacobian rows touch exactly
one frame block, one marker block and, when enabled, the intrinsics
block.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import _kernels
from .geometry import (CameraIntrinsics, MarkerGeometry, Pose6, Transform4,
                       matrix_to_pose, pose_to_matrix)

log = logging.getLogger("markermap.global_opt")

N_INTR = 9


@dataclass
class LMConfig:
    max_iterations: int = 200
    cost_rel_tol: float = 1e-10
    step_tol: float = 1e-12
    cost_abs_tol: float = 1e-18
    lambda_decrease: float = 3.0
    lambda_increase: float = 2.0
    lambda_max: float = 1e12
    damping: str = "diag"  # "diag": lambda scales diag(JtJ); "identity": lambda I
    behind_camera_cap: float = 1e4  # px per residual component
    optimize_intrinsics: bool = False
    huber_delta: float | None = None  # px, None = plain squared loss


class OptimizationProblem:
    """Packed bundle-adjustment problem over marker and frame poses.

    Parameter vector layout: 6 per marker except the gauge (sorted by
    id), then 6 per frame (sorted by id), then 9 intrinsics when those
    are optimized. Residuals stack 8 entries (4 corners x 2) per
    observation in (frame, marker) order.
    """

    def __init__(self, marker_ids, frame_ids, gauge_id, marker_poses0, frame_poses0,
                 obs_frame, obs_marker, pixels, geom: MarkerGeometry,
                 delta: CameraIntrinsics, optimize_intrinsics: bool = False):
        self.marker_ids = list(marker_ids)
        self.frame_ids = list(frame_ids)
        if gauge_id not in self.marker_ids:
            raise ValueError("gauge marker must be one of the problem markers")
        self.gauge_id = gauge_id
        self.marker_index = {m: k for k, m in enumerate(self.marker_ids)}
        self.frame_index = {f: k for k, f in enumerate(self.frame_ids)}
        self.marker_poses0 = np.asarray(marker_poses0, float)
        self.frame_poses0 = np.asarray(frame_poses0, float)
        self.obs_frame = np.ascontiguousarray(obs_frame, dtype=np.int64)
        self.obs_marker = np.ascontiguousarray(obs_marker, dtype=np.int64)
        self.pixels = np.ascontiguousarray(pixels, dtype=float)
        self.geom = geom
        self.delta = delta
        self.optimize_intrinsics = bool(optimize_intrinsics)
        if self.obs_frame.max(initial=-1) >= len(self.frame_ids):
            raise ValueError("observation references an unknown frame")
        if self.obs_marker.max(initial=-1) >= len(self.marker_ids):
            raise ValueError("observation references an unknown marker")
        # free-parameter column of each marker block; the gauge gets none
        self._marker_col = {}
        col = 0
        for m in self.marker_ids:
            if m == self.gauge_id:
                continue
            self._marker_col[m] = col
            col += 6
        self._frame_col0 = col

    @classmethod
    def from_poses(cls, marker_poses: dict, frame_poses: dict, frames,
                   geom: MarkerGeometry, delta: CameraIntrinsics, gauge_id: int,
                   optimize_intrinsics: bool = False):
        """Build from pose dicts and FrameDetections, keeping observations of
        mapped markers in the given frames."""
        marker_ids = sorted(marker_poses)
        frame_map = {f.frame_id: f for f in frames}
        frame_ids = sorted(set(frame_poses) & set(frame_map))
        mp0 = np.stack([_pose_vec(marker_poses[m]) for m in marker_ids])
        fp0 = np.stack([_pose_vec(frame_poses[f]) for f in frame_ids])
        obs_f, obs_m, pix = [], [], []
        midx = {m: k for k, m in enumerate(marker_ids)}
        for fi, f in enumerate(frame_ids):
            for obs in frame_map[f].observations:
                if obs.marker_id in midx:
                    obs_f.append(fi)
                    obs_m.append(midx[obs.marker_id])
                    pix.append(obs.pixels)
        return cls(marker_ids, frame_ids, gauge_id, mp0, fp0,
                   np.array(obs_f, np.int64), np.array(obs_m, np.int64),
                   np.stack(pix), geom, delta, optimize_intrinsics)

    # --- parameter packing -------------------------------------------------

    @property
    def n_observations(self):
        return len(self.obs_frame)

    @property
    def n_params(self):
        n = 6 * (len(self.marker_ids) - 1) + 6 * len(self.frame_ids)
        return n + (N_INTR if self.optimize_intrinsics else 0)

    def initial_x(self) -> np.ndarray:
        x = np.zeros(self.n_params)
        for m, col in self._marker_col.items():
            x[col:col + 6] = self.marker_poses0[self.marker_index[m]]
        for k in range(len(self.frame_ids)):
            c = self._frame_col0 + 6 * k
            x[c:c + 6] = self.frame_poses0[k]
        if self.optimize_intrinsics:
            x[-N_INTR:] = self.delta.as_array()
        return x

    def unpack(self, x):
        markers = self.marker_poses0.copy()
        for m, col in self._marker_col.items():
            markers[self.marker_index[m]] = x[col:col + 6]
        frames = x[self._frame_col0:self._frame_col0 + 6 * len(self.frame_ids)].reshape(-1, 6)
        intr = x[-N_INTR:] if self.optimize_intrinsics else self.delta.as_array()
        return markers, frames, intr

    def _rotations(self, poses):
        R = np.stack([_kernels.rodrigues_matrix(np.ascontiguousarray(p[:3])) for p in poses])
        return np.ascontiguousarray(R), np.ascontiguousarray(poses[:, 3:])

    def _generators(self, poses):
        return np.ascontiguousarray(
            np.stack([_kernels.rotation_generators(np.ascontiguousarray(p[:3])) for p in poses]))


def _pose_vec(g: Transform4) -> np.ndarray:
    p = matrix_to_pose(g)
    return np.concatenate([p.r, p.t])


def residuals(problem: OptimizationProblem, x=None,
              cap: float = 1e4) -> np.ndarray:
    """Stacked un-squared corner residuals (px), 8 per observation."""
    if x is None:
        x = problem.initial_x()
    markers, frames, intr = problem.unpack(x)
    mR, mt = problem._rotations(markers)
    fR, ft = problem._rotations(frames)
    res, _ = _kernels.ba_residuals(fR, ft, mR, mt, problem.obs_frame,
                                   problem.obs_marker, problem.pixels,
                                   problem.geom.corners, np.ascontiguousarray(intr), cap)
    return res


def _blocks(problem, x, cap):
    markers, frames, intr = problem.unpack(x)
    mR, mt = problem._rotations(markers)
    fR, ft = problem._rotations(frames)
    mG = problem._generators(markers)
    fG = problem._generators(frames)
    return _kernels.ba_blocks(fR, ft, fG, mR, mt, mG, problem.obs_frame,
                              problem.obs_marker, problem.pixels, problem.geom.corners,
                              np.ascontiguousarray(intr), cap, problem.optimize_intrinsics)


def _assemble(problem, res, jf, jm, jd):
    n_obs = problem.n_observations
    rows_per = 8
    blocks = []
    rows = []
    cols = []
    frame_cols = problem._frame_col0 + 6 * problem.obs_frame
    row_base = rows_per * np.arange(n_obs)
    r_idx = (row_base[:, None, None] + np.arange(8)[None, :, None])
    for o in range(n_obs):
        m = problem.marker_ids[problem.obs_marker[o]]
        if m != problem.gauge_id:
            c0 = problem._marker_col[m]
            blocks.append(jm[o].ravel())
            rows.append(np.repeat(row_base[o] + np.arange(8), 6))
            cols.append(np.tile(c0 + np.arange(6), 8))
        c0 = frame_cols[o]
        blocks.append(jf[o].ravel())
        rows.append(np.repeat(row_base[o] + np.arange(8), 6))
        cols.append(np.tile(c0 + np.arange(6), 8))
        if problem.optimize_intrinsics:
            c0 = problem.n_params - N_INTR
            blocks.append(jd[o].ravel())
            rows.append(np.repeat(row_base[o] + np.arange(8), N_INTR))
            cols.append(np.tile(c0 + np.arange(N_INTR), 8))
    data = np.concatenate(blocks)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    J = sp.coo_matrix((data, (rows, cols)), shape=(rows_per * n_obs, problem.n_params))
    return J.tocsr()


def jacobian(problem: OptimizationProblem, x=None, cap: float = 1e4):
    """Analytic block-sparse Jacobian of the residual vector (CSR)."""
    if x is None:
        x = problem.initial_x()
    res, jf, jm, jd, _ = _blocks(problem, x, cap)
    return _assemble(problem, res, jf, jm, jd)


def _huber_weights(res8, delta_h):
    """Per-corner sqrt IRLS weights for the Huber loss, expanded per residual."""
    r = res8.reshape(-1, 2)
    norms = np.linalg.norm(r, axis=1)
    w = np.ones_like(norms)
    over = norms > delta_h
    w[over] = np.sqrt(delta_h / norms[over])
    return np.repeat(w, 2)


@dataclass
class LMIteration:
    iteration: int
    cost: float
    lam: float
    step_norm: float
    accepted: bool


@dataclass
class LMReport:
    initial_cost: float
    final_cost: float
    iterations: list
    converged: bool
    reason: str
    mean_px: float
    rms_px: float
    n_capped: int

    def format_log(self) -> str:
        lines = [f"initial cost {self.initial_cost:.6e}"]
        for it in self.iterations:
            tag = "accept" if it.accepted else "reject"
            lines.append(f"iter {it.iteration:3d} {tag} cost {it.cost:.6e} "
                         f"lambda {it.lam:.3e} step {it.step_norm:.3e}")
        lines.append(f"final cost {self.final_cost:.6e} ({self.reason}); "
                     f"mean {self.mean_px:.4f} px rms {self.rms_px:.4f} px")
        return "\n".join(lines)


@dataclass
class OptimizeResult:
    marker_poses: dict  # id -> Transform4 (marker -> world)
    frame_poses: dict  # id -> Transform4 (world -> camera)
    intrinsics: CameraIntrinsics
    report: LMReport
    x: np.ndarray


def _cost_stats(res, ok):
    corners = res.reshape(-1, 2)
    norms = np.linalg.norm(corners, axis=1)
    good = np.repeat(ok, 4)
    if good.any():
        mean_px = float(norms[good].mean())
        rms_px = float(np.sqrt((norms[good] ** 2).mean()))
    else:
        mean_px = rms_px = float("nan")
    return mean_px, rms_px


def optimize(problem: OptimizationProblem, config: LMConfig | None = None) -> OptimizeResult:
    """Levenberg-Marquardt loop on the damped sparse normal equations.

    Accepted steps shrink lambda, rejected ones grow it and retry; stops
    on relative cost change, step norm, the iteration cap, or lambda
    exhaustion. Raises on a non-finite starting cost.
    """
    config = config or LMConfig()
    cap = config.behind_camera_cap
    x = problem.initial_x()
    res, jf, jm, jd, ok = _blocks(problem, x, cap)
    if not np.isfinite(res).all():
        raise ValueError("non-finite residuals at the initial point")
    if config.huber_delta is not None:
        w = _huber_weights(res, config.huber_delta)
        cost = float((w * res) @ (w * res))
    else:
        cost = float(res @ res)
    initial_cost = cost
    iterations = []
    lam = None
    reason = "max iterations"
    converged = False
    it = 0
    while it < config.max_iterations:
        J = _assemble(problem, res, jf, jm, jd)
        r_vec = res
        if config.huber_delta is not None:
            w = _huber_weights(res, config.huber_delta)
            J = sp.diags(w) @ J
            r_vec = w * res
        JtJ = (J.T @ J).tocsc()
        g = J.T @ r_vec
        diag = np.asarray(JtJ.diagonal())
        if lam is None:
            lam = 1e-3 if config.damping == "diag" else 1e-3 * float(diag.mean())
        accepted = False
        while it < config.max_iterations:
            it += 1
            if config.damping == "diag":
                damp = sp.diags(lam * np.maximum(diag, 1e-12))
            else:
                damp = lam * sp.identity(problem.n_params, format="csc")
            try:
                step = spla.spsolve((JtJ + damp).tocsc(), -g)
            except RuntimeError:
                lam *= 10.0
                if lam > config.lambda_max:
                    reason = "factorization failed"
                    break
                continue
            if not np.isfinite(step).all():
                lam *= 10.0
                if lam > config.lambda_max:
                    reason = "factorization failed"
                    break
                continue
            step_norm = float(np.linalg.norm(step))
            if step_norm < config.step_tol:
                iterations.append(LMIteration(it, cost, lam, step_norm, False))
                reason = "step below tolerance"
                converged = True
                break
            x_try = x + step
            res_try, jf_t, jm_t, jd_t, ok_t = _blocks(problem, x_try, cap)
            if config.huber_delta is not None:
                w = _huber_weights(res_try, config.huber_delta)
                cost_try = float((w * res_try) @ (w * res_try))
            else:
                cost_try = float(res_try @ res_try)
            if np.isfinite(cost_try) and cost_try < cost:
                rel_drop = (cost - cost_try) / max(cost, 1e-300)
                x, res, jf, jm, jd, ok = x_try, res_try, jf_t, jm_t, jd_t, ok_t
                cost = cost_try
                lam /= config.lambda_decrease
                iterations.append(LMIteration(it, cost, lam, step_norm, True))
                accepted = True
                if rel_drop < config.cost_rel_tol:
                    reason = "cost change below tolerance"
                    converged = True
                elif cost < config.cost_abs_tol:
                    reason = "cost below absolute tolerance"
                    converged = True
                break
            lam *= config.lambda_increase
            iterations.append(LMIteration(it, cost, lam, step_norm, False))
            if lam > config.lambda_max:
                reason = "damping exhausted"
                converged = True
                break
        if converged or reason == "factorization failed":
            break
        if not accepted:
            break
    if reason == "factorization failed":
        raise RuntimeError("normal-equation factorization failed at maximum damping")

    mean_px, rms_px = _cost_stats(res, ok)
    report = LMReport(initial_cost=initial_cost, final_cost=cost, iterations=iterations,
                      converged=converged, reason=reason, mean_px=mean_px, rms_px=rms_px,
                      n_capped=int((~ok).sum()))
    log.debug("LM finished: %s", report.iterations and report.iterations[-1])
    markers, frames, intr = problem.unpack(x)
    marker_poses = {m: pose_to_matrix(Pose6(markers[k, :3], markers[k, 3:]))
                    for k, m in enumerate(problem.marker_ids)}
    frame_poses = {f: pose_to_matrix(Pose6(frames[k, :3], frames[k, 3:]))
                   for k, f in enumerate(problem.frame_ids)}
    if problem.optimize_intrinsics:
        d = problem.delta
        delta = CameraIntrinsics(fx=intr[0], fy=intr[1], cx=intr[2], cy=intr[3],
                                 width=d.width, height=d.height, k1=intr[4], k2=intr[5],
                                 p1=intr[6], p2=intr[7], k3=intr[8])
    else:
        delta = problem.delta
    return OptimizeResult(marker_poses=marker_poses, frame_poses=frame_poses,
                          intrinsics=delta, report=report, x=x)
