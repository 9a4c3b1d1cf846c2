"""Low-level numeric kernels with two interchangeable backends.

By default the loop kernels are compiled with numba; setting
MARKERMAP_NO_NUMBA=1 in the environment (or numba failing to import)
selects vectorized numpy implementations instead. `backend()` reports
which path is active; `benchmarks/bench_kernels.py` times both.

Conventions used throughout: rotations are 3x3 row-major matrices,
axis-angle vectors are length 3 with angle = norm, intrinsics travel as
the 9-vector [fx, fy, cx, cy, k1, k2, p1, p2, k3], pixels as float64
(..., 2) arrays. Depths below MIN_DEPTH count as behind the camera.
"""

from __future__ import annotations

import os

import numpy as np

MIN_DEPTH = 1e-9

_flag = os.environ.get("MARKERMAP_NO_NUMBA", "").strip().lower()
if _flag in {"1", "true", "yes", "on"}:
    NUMBA_ENABLED = False
else:
    try:
        from numba import njit as _njit

        NUMBA_ENABLED = True
    except ImportError:
        NUMBA_ENABLED = False


def backend():
    return "numba" if NUMBA_ENABLED else "numpy"


def _jit(fn):
    if NUMBA_ENABLED:
        return _njit(cache=True)(fn)
    return fn


@_jit
def rodrigues_matrix(r):
    """Rotation matrix from an axis-angle vector (identity below 1e-12 rad)."""
    theta = np.sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2])
    out = np.zeros((3, 3))
    if theta < 1e-12:
        out[0, 0] = 1.0
        out[1, 1] = 1.0
        out[2, 2] = 1.0
        return out
    kx = r[0] / theta
    ky = r[1] / theta
    kz = r[2] / theta
    s = np.sin(theta)
    c = np.cos(theta)
    omc = 1.0 - c
    out[0, 0] = c + kx * kx * omc
    out[0, 1] = kx * ky * omc - kz * s
    out[0, 2] = kx * kz * omc + ky * s
    out[1, 0] = ky * kx * omc + kz * s
    out[1, 1] = c + ky * ky * omc
    out[1, 2] = ky * kz * omc - kx * s
    out[2, 0] = kz * kx * omc - ky * s
    out[2, 1] = kz * ky * omc + kx * s
    out[2, 2] = c + kz * kz * omc
    return out


@_jit
def rotation_generators(r):
    """Partial derivatives dR/dr_i of the Rodrigues map, stacked (3, 3, 3).

    Closed form: dR/dr_i = (r_i [r]x + [r x ((I - R) e_i)]x) / |r|^2 . R,
    with the |r| -> 0 limit dR/dr_i = [e_i]x.
    """
    gen = np.zeros((3, 3, 3))
    theta2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2]
    if theta2 < 1e-16:
        gen[0, 2, 1] = 1.0
        gen[0, 1, 2] = -1.0
        gen[1, 0, 2] = 1.0
        gen[1, 2, 0] = -1.0
        gen[2, 1, 0] = 1.0
        gen[2, 0, 1] = -1.0
        return gen
    R = rodrigues_matrix(r)
    for i in range(3):
        e0 = (1.0 if i == 0 else 0.0) - R[0, i]
        e1 = (1.0 if i == 1 else 0.0) - R[1, i]
        e2 = (1.0 if i == 2 else 0.0) - R[2, i]
        vx = r[1] * e2 - r[2] * e1
        vy = r[2] * e0 - r[0] * e2
        vz = r[0] * e1 - r[1] * e0
        w01 = (-r[i] * r[2] - vz) / theta2
        w02 = (r[i] * r[1] + vy) / theta2
        w10 = (r[i] * r[2] + vz) / theta2
        w12 = (-r[i] * r[0] - vx) / theta2
        w20 = (-r[i] * r[1] - vy) / theta2
        w21 = (r[i] * r[0] + vx) / theta2
        for col in range(3):
            gen[i, 0, col] = w01 * R[1, col] + w02 * R[2, col]
            gen[i, 1, col] = w10 * R[0, col] + w12 * R[2, col]
            gen[i, 2, col] = w20 * R[0, col] + w21 * R[1, col]
    return gen


@_jit
def project_point(x, y, z, intr):
    """Project one camera-frame point; returns (u, v, in_front)."""
    if z <= MIN_DEPTH:
        return 0.0, 0.0, False
    xn = x / z
    yn = y / z
    r2 = xn * xn + yn * yn
    radial = 1.0 + r2 * (intr[4] + r2 * (intr[5] + r2 * intr[8]))
    xd = xn * radial + 2.0 * intr[6] * xn * yn + intr[7] * (r2 + 2.0 * xn * xn)
    yd = yn * radial + intr[6] * (r2 + 2.0 * yn * yn) + 2.0 * intr[7] * xn * yn
    return intr[0] * xd + intr[2], intr[1] * yd + intr[3], True


@_jit
def project_point_jacobian(x, y, z, intr):
    """Pixel and 2x3 Jacobian w.r.t. the camera-frame point."""
    J = np.zeros((2, 3))
    if z <= MIN_DEPTH:
        return 0.0, 0.0, False, J
    inv_z = 1.0 / z
    xn = x * inv_z
    yn = y * inv_z
    r2 = xn * xn + yn * yn
    k1 = intr[4]
    k2 = intr[5]
    p1 = intr[6]
    p2 = intr[7]
    k3 = intr[8]
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    dradial = k1 + r2 * (2.0 * k2 + 3.0 * k3 * r2)
    xd = xn * radial + 2.0 * p1 * xn * yn + p2 * (r2 + 2.0 * xn * xn)
    yd = yn * radial + p1 * (r2 + 2.0 * yn * yn) + 2.0 * p2 * xn * yn
    dxd_dx = radial + 2.0 * xn * xn * dradial + 2.0 * p1 * yn + 6.0 * p2 * xn
    dxd_dy = 2.0 * xn * yn * dradial + 2.0 * p1 * xn + 2.0 * p2 * yn
    dyd_dx = 2.0 * xn * yn * dradial + 2.0 * p1 * xn + 2.0 * p2 * yn
    dyd_dy = radial + 2.0 * yn * yn * dradial + 6.0 * p1 * yn + 2.0 * p2 * xn
    # chain through xn = x/z, yn = y/z
    J[0, 0] = intr[0] * dxd_dx * inv_z
    J[0, 1] = intr[0] * dxd_dy * inv_z
    J[0, 2] = intr[0] * (-dxd_dx * xn - dxd_dy * yn) * inv_z
    J[1, 0] = intr[1] * dyd_dx * inv_z
    J[1, 1] = intr[1] * dyd_dy * inv_z
    J[1, 2] = intr[1] * (-dyd_dx * xn - dyd_dy * yn) * inv_z
    return intr[0] * xd + intr[2], intr[1] * yd + intr[3], True, J


@_jit
def _project_points_loop(pts, intr):
    n = pts.shape[0]
    uv = np.zeros((n, 2))
    ok = np.zeros(n, np.bool_)
    for i in range(n):
        u, v, good = project_point(pts[i, 0], pts[i, 1], pts[i, 2], intr)
        uv[i, 0] = u
        uv[i, 1] = v
        ok[i] = good
    return uv, ok


def _project_points_np(pts, intr):
    z = pts[:, 2]
    ok = z > MIN_DEPTH
    zs = np.where(ok, z, 1.0)
    xn = pts[:, 0] / zs
    yn = pts[:, 1] / zs
    r2 = xn * xn + yn * yn
    radial = 1.0 + r2 * (intr[4] + r2 * (intr[5] + r2 * intr[8]))
    xd = xn * radial + 2.0 * intr[6] * xn * yn + intr[7] * (r2 + 2.0 * xn * xn)
    yd = yn * radial + intr[6] * (r2 + 2.0 * yn * yn) + 2.0 * intr[7] * xn * yn
    uv = np.stack((intr[0] * xd + intr[2], intr[1] * yd + intr[3]), axis=1)
    uv[~ok] = 0.0
    return uv, ok


@_jit
def pose_point_residuals(r, t, pts, pix, intr, out):
    """Stacked (predicted - observed) pixel residuals for pose (r, t).

    Writes 2 entries per point into `out`; returns False if any point
    falls behind the camera (out is then not meaningful).
    """
    R = rodrigues_matrix(r)
    n = pts.shape[0]
    for k in range(n):
        px = pts[k, 0]
        py = pts[k, 1]
        pz = pts[k, 2]
        cx = R[0, 0] * px + R[0, 1] * py + R[0, 2] * pz + t[0]
        cy = R[1, 0] * px + R[1, 1] * py + R[1, 2] * pz + t[1]
        cz = R[2, 0] * px + R[2, 1] * py + R[2, 2] * pz + t[2]
        u, v, good = project_point(cx, cy, cz, intr)
        if not good:
            return False
        out[2 * k] = u - pix[k, 0]
        out[2 * k + 1] = v - pix[k, 1]
    return True


@_jit
def refine_pose(r0, t0, pts, pix, intr, max_iter, step_tol, mu_rel=0.0):
    """Damped Gauss-Newton on reprojection error over a 6-dof pose.

    Returns (r, t, cost, ok); ok is False when the start or every trial
    places a point behind the camera. Stops when the accepted step norm
    drops below step_tol or after max_iter iterations. `mu_rel` scales
    the initial damping relative to the normal-matrix diagonal; larger
    values keep the descent inside the starting basin.
    """
    r = r0.copy()
    t = t0.copy()
    n = pts.shape[0]
    res = np.zeros(2 * n)
    if not pose_point_residuals(r, t, pts, pix, intr, res):
        return r, t, np.inf, False
    cost = 0.0
    for i in range(2 * n):
        cost += res[i] * res[i]
    mu = -1.0  # set from the first normal matrix
    J = np.zeros((2 * n, 6))
    trial_res = np.zeros(2 * n)
    for _ in range(max_iter):
        R = rodrigues_matrix(r)
        gen = rotation_generators(r)
        for k in range(n):
            px = pts[k, 0]
            py = pts[k, 1]
            pz = pts[k, 2]
            cx = R[0, 0] * px + R[0, 1] * py + R[0, 2] * pz + t[0]
            cy = R[1, 0] * px + R[1, 1] * py + R[1, 2] * pz + t[1]
            cz = R[2, 0] * px + R[2, 1] * py + R[2, 2] * pz + t[2]
            u, v, good, Jp = project_point_jacobian(cx, cy, cz, intr)
            if not good:
                return r, t, cost, True
            for i in range(3):
                dx = gen[i, 0, 0] * px + gen[i, 0, 1] * py + gen[i, 0, 2] * pz
                dy = gen[i, 1, 0] * px + gen[i, 1, 1] * py + gen[i, 1, 2] * pz
                dz = gen[i, 2, 0] * px + gen[i, 2, 1] * py + gen[i, 2, 2] * pz
                J[2 * k, i] = Jp[0, 0] * dx + Jp[0, 1] * dy + Jp[0, 2] * dz
                J[2 * k + 1, i] = Jp[1, 0] * dx + Jp[1, 1] * dy + Jp[1, 2] * dz
            for i in range(3):
                J[2 * k, 3 + i] = Jp[0, i]
                J[2 * k + 1, 3 + i] = Jp[1, i]
        g = J.T @ res
        H = J.T @ J
        if mu < 0.0:
            diag_mean = 0.0
            for d in range(6):
                diag_mean += H[d, d]
            mu = max(mu_rel * diag_mean / 6.0, 1e-12)
        accepted = False
        step_norm = 0.0
        for _ in range(12):
            A = H.copy()
            for d in range(6):
                A[d, d] += mu
            step = np.linalg.solve(A, -g)
            step_norm = np.sqrt(np.sum(step * step))
            r_try = r + step[:3]
            t_try = t + step[3:]
            if pose_point_residuals(r_try, t_try, pts, pix, intr, trial_res):
                trial_cost = 0.0
                for i in range(2 * n):
                    trial_cost += trial_res[i] * trial_res[i]
                if trial_cost < cost:
                    r = r_try
                    t = t_try
                    cost = trial_cost
                    res[:] = trial_res
                    mu = max(mu * 0.5, 1e-12)
                    accepted = True
                    break
            mu *= 4.0
        if not accepted:
            break
        if step_norm < step_tol:
            break
    return r, t, cost, True


@_jit
def _pair_score_matrix_loop(cand_R, cand_t, frame_R, frame_t, pix, corners, intr):
    nc = cand_R.shape[0]
    nf = frame_R.shape[0]
    out = np.zeros((nc, nf))
    moved = np.zeros((4, 3))
    for a in range(nc):
        for k in range(4):
            for i in range(3):
                moved[k, i] = (
                    cand_R[a, i, 0] * corners[k, 0]
                    + cand_R[a, i, 1] * corners[k, 1]
                    + cand_R[a, i, 2] * corners[k, 2]
                    + cand_t[a, i]
                )
        for f in range(nf):
            s = 0.0
            for k in range(4):
                cx = (
                    frame_R[f, 0, 0] * moved[k, 0]
                    + frame_R[f, 0, 1] * moved[k, 1]
                    + frame_R[f, 0, 2] * moved[k, 2]
                    + frame_t[f, 0]
                )
                cy = (
                    frame_R[f, 1, 0] * moved[k, 0]
                    + frame_R[f, 1, 1] * moved[k, 1]
                    + frame_R[f, 1, 2] * moved[k, 2]
                    + frame_t[f, 1]
                )
                cz = (
                    frame_R[f, 2, 0] * moved[k, 0]
                    + frame_R[f, 2, 1] * moved[k, 1]
                    + frame_R[f, 2, 2] * moved[k, 2]
                    + frame_t[f, 2]
                )
                u, v, good = project_point(cx, cy, cz, intr)
                if not good:
                    s = np.inf
                    break
                du = u - pix[f, k, 0]
                dv = v - pix[f, k, 1]
                s += du * du + dv * dv
            out[a, f] = s
    return out


def _pair_score_matrix_np(cand_R, cand_t, frame_R, frame_t, pix, corners, intr):
    # corners of marker i expressed in marker j's frame, per candidate: (C, 4, 3)
    moved = np.einsum("aij,kj->aki", cand_R, corners) + cand_t[:, None, :]
    # into each frame's camera: (C, F, 4, 3)
    cam = np.einsum("fij,akj->afki", frame_R, moved) + frame_t[None, :, None, :]
    z = cam[..., 2]
    ok = z > MIN_DEPTH
    zs = np.where(ok, z, 1.0)
    xn = cam[..., 0] / zs
    yn = cam[..., 1] / zs
    r2 = xn * xn + yn * yn
    radial = 1.0 + r2 * (intr[4] + r2 * (intr[5] + r2 * intr[8]))
    xd = xn * radial + 2.0 * intr[6] * xn * yn + intr[7] * (r2 + 2.0 * xn * xn)
    yd = yn * radial + intr[6] * (r2 + 2.0 * yn * yn) + 2.0 * intr[7] * xn * yn
    du = intr[0] * xd + intr[2] - pix[None, :, :, 0]
    dv = intr[1] * yd + intr[3] - pix[None, :, :, 1]
    sq = du * du + dv * dv
    sq = np.where(ok, sq, np.inf)
    return sq.sum(axis=2)


@_jit
def _world_point_scores_loop(cand_R, cand_t, pts, pix, intr, penalty):
    nc = cand_R.shape[0]
    n = pts.shape[0]
    out = np.zeros(nc)
    for a in range(nc):
        s = 0.0
        for k in range(n):
            cx = (
                cand_R[a, 0, 0] * pts[k, 0]
                + cand_R[a, 0, 1] * pts[k, 1]
                + cand_R[a, 0, 2] * pts[k, 2]
                + cand_t[a, 0]
            )
            cy = (
                cand_R[a, 1, 0] * pts[k, 0]
                + cand_R[a, 1, 1] * pts[k, 1]
                + cand_R[a, 1, 2] * pts[k, 2]
                + cand_t[a, 1]
            )
            cz = (
                cand_R[a, 2, 0] * pts[k, 0]
                + cand_R[a, 2, 1] * pts[k, 1]
                + cand_R[a, 2, 2] * pts[k, 2]
                + cand_t[a, 2]
            )
            u, v, good = project_point(cx, cy, cz, intr)
            if good:
                du = u - pix[k, 0]
                dv = v - pix[k, 1]
                s += du * du + dv * dv
            else:
                s += penalty
        out[a] = s
    return out


def _world_point_scores_np(cand_R, cand_t, pts, pix, intr, penalty):
    cam = np.einsum("aij,kj->aki", cand_R, pts) + cand_t[:, None, :]
    z = cam[..., 2]
    ok = z > MIN_DEPTH
    zs = np.where(ok, z, 1.0)
    xn = cam[..., 0] / zs
    yn = cam[..., 1] / zs
    r2 = xn * xn + yn * yn
    radial = 1.0 + r2 * (intr[4] + r2 * (intr[5] + r2 * intr[8]))
    xd = xn * radial + 2.0 * intr[6] * xn * yn + intr[7] * (r2 + 2.0 * xn * xn)
    yd = yn * radial + intr[6] * (r2 + 2.0 * yn * yn) + 2.0 * intr[7] * xn * yn
    du = intr[0] * xd + intr[2] - pix[None, :, 0]
    dv = intr[1] * yd + intr[3] - pix[None, :, 1]
    sq = np.where(ok, du * du + dv * dv, penalty)
    return sq.sum(axis=1)


@_jit
def _ba_residuals_loop(frame_R, frame_t, marker_R, marker_t, obs_frame, obs_marker, pix, corners, intr, cap):
    n_obs = obs_frame.shape[0]
    res = np.zeros(8 * n_obs)
    ok = np.ones(n_obs, np.bool_)
    for o in range(n_obs):
        f = obs_frame[o]
        m = obs_marker[o]
        base = 8 * o
        for k in range(4):
            wx = (
                marker_R[m, 0, 0] * corners[k, 0]
                + marker_R[m, 0, 1] * corners[k, 1]
                + marker_R[m, 0, 2] * corners[k, 2]
                + marker_t[m, 0]
            )
            wy = (
                marker_R[m, 1, 0] * corners[k, 0]
                + marker_R[m, 1, 1] * corners[k, 1]
                + marker_R[m, 1, 2] * corners[k, 2]
                + marker_t[m, 1]
            )
            wz = (
                marker_R[m, 2, 0] * corners[k, 0]
                + marker_R[m, 2, 1] * corners[k, 1]
                + marker_R[m, 2, 2] * corners[k, 2]
                + marker_t[m, 2]
            )
            cx = frame_R[f, 0, 0] * wx + frame_R[f, 0, 1] * wy + frame_R[f, 0, 2] * wz + frame_t[f, 0]
            cy = frame_R[f, 1, 0] * wx + frame_R[f, 1, 1] * wy + frame_R[f, 1, 2] * wz + frame_t[f, 1]
            cz = frame_R[f, 2, 0] * wx + frame_R[f, 2, 1] * wy + frame_R[f, 2, 2] * wz + frame_t[f, 2]
            u, v, good = project_point(cx, cy, cz, intr)
            if not good:
                ok[o] = False
                for i in range(8):
                    res[base + i] = cap
                break
            res[base + 2 * k] = u - pix[o, k, 0]
            res[base + 2 * k + 1] = v - pix[o, k, 1]
    return res, ok


def _ba_residuals_np(frame_R, frame_t, marker_R, marker_t, obs_frame, obs_marker, pix, corners, intr, cap):
    Rm = marker_R[obs_marker]
    tm = marker_t[obs_marker]
    Rf = frame_R[obs_frame]
    tf = frame_t[obs_frame]
    world = np.einsum("oij,kj->oki", Rm, corners) + tm[:, None, :]
    cam = np.einsum("oij,okj->oki", Rf, world) + tf[:, None, :]
    z = cam[..., 2]
    good = z > MIN_DEPTH
    zs = np.where(good, z, 1.0)
    xn = cam[..., 0] / zs
    yn = cam[..., 1] / zs
    r2 = xn * xn + yn * yn
    radial = 1.0 + r2 * (intr[4] + r2 * (intr[5] + r2 * intr[8]))
    xd = xn * radial + 2.0 * intr[6] * xn * yn + intr[7] * (r2 + 2.0 * xn * xn)
    yd = yn * radial + intr[6] * (r2 + 2.0 * yn * yn) + 2.0 * intr[7] * xn * yn
    du = intr[0] * xd + intr[2] - pix[..., 0]
    dv = intr[1] * yd + intr[3] - pix[..., 1]
    ok = good.all(axis=1)
    res = np.empty((obs_frame.shape[0], 4, 2))
    res[..., 0] = du
    res[..., 1] = dv
    res[~ok] = cap
    return res.reshape(-1), ok


@_jit
def _ba_blocks_loop(frame_R, frame_t, frame_gen, marker_R, marker_t, marker_gen,
                    obs_frame, obs_marker, pix, corners, intr, cap, with_intr):
    n_obs = obs_frame.shape[0]
    res = np.zeros(8 * n_obs)
    jf = np.zeros((n_obs, 8, 6))
    jm = np.zeros((n_obs, 8, 6))
    jd = np.zeros((n_obs, 8, 9))
    ok = np.ones(n_obs, np.bool_)
    for o in range(n_obs):
        f = obs_frame[o]
        m = obs_marker[o]
        base = 8 * o
        for k in range(4):
            c0 = corners[k, 0]
            c1 = corners[k, 1]
            c2 = corners[k, 2]
            wx = marker_R[m, 0, 0] * c0 + marker_R[m, 0, 1] * c1 + marker_R[m, 0, 2] * c2 + marker_t[m, 0]
            wy = marker_R[m, 1, 0] * c0 + marker_R[m, 1, 1] * c1 + marker_R[m, 1, 2] * c2 + marker_t[m, 1]
            wz = marker_R[m, 2, 0] * c0 + marker_R[m, 2, 1] * c1 + marker_R[m, 2, 2] * c2 + marker_t[m, 2]
            cx = frame_R[f, 0, 0] * wx + frame_R[f, 0, 1] * wy + frame_R[f, 0, 2] * wz + frame_t[f, 0]
            cy = frame_R[f, 1, 0] * wx + frame_R[f, 1, 1] * wy + frame_R[f, 1, 2] * wz + frame_t[f, 1]
            cz = frame_R[f, 2, 0] * wx + frame_R[f, 2, 1] * wy + frame_R[f, 2, 2] * wz + frame_t[f, 2]
            u, v, good, Jp = project_point_jacobian(cx, cy, cz, intr)
            if not good:
                ok[o] = False
                for i in range(8):
                    res[base + i] = cap
                for i in range(8):
                    for d in range(6):
                        jf[o, i, d] = 0.0
                        jm[o, i, d] = 0.0
                    for d in range(9):
                        jd[o, i, d] = 0.0
                break
            res[base + 2 * k] = u - pix[o, k, 0]
            res[base + 2 * k + 1] = v - pix[o, k, 1]
            # frame rotation / translation columns
            for i in range(3):
                dx = frame_gen[f, i, 0, 0] * wx + frame_gen[f, i, 0, 1] * wy + frame_gen[f, i, 0, 2] * wz
                dy = frame_gen[f, i, 1, 0] * wx + frame_gen[f, i, 1, 1] * wy + frame_gen[f, i, 1, 2] * wz
                dz = frame_gen[f, i, 2, 0] * wx + frame_gen[f, i, 2, 1] * wy + frame_gen[f, i, 2, 2] * wz
                jf[o, 2 * k, i] = Jp[0, 0] * dx + Jp[0, 1] * dy + Jp[0, 2] * dz
                jf[o, 2 * k + 1, i] = Jp[1, 0] * dx + Jp[1, 1] * dy + Jp[1, 2] * dz
            for i in range(3):
                jf[o, 2 * k, 3 + i] = Jp[0, i]
                jf[o, 2 * k + 1, 3 + i] = Jp[1, i]
            # marker columns go through the frame rotation: A = Jp @ Rf
            a00 = Jp[0, 0] * frame_R[f, 0, 0] + Jp[0, 1] * frame_R[f, 1, 0] + Jp[0, 2] * frame_R[f, 2, 0]
            a01 = Jp[0, 0] * frame_R[f, 0, 1] + Jp[0, 1] * frame_R[f, 1, 1] + Jp[0, 2] * frame_R[f, 2, 1]
            a02 = Jp[0, 0] * frame_R[f, 0, 2] + Jp[0, 1] * frame_R[f, 1, 2] + Jp[0, 2] * frame_R[f, 2, 2]
            a10 = Jp[1, 0] * frame_R[f, 0, 0] + Jp[1, 1] * frame_R[f, 1, 0] + Jp[1, 2] * frame_R[f, 2, 0]
            a11 = Jp[1, 0] * frame_R[f, 0, 1] + Jp[1, 1] * frame_R[f, 1, 1] + Jp[1, 2] * frame_R[f, 2, 1]
            a12 = Jp[1, 0] * frame_R[f, 0, 2] + Jp[1, 1] * frame_R[f, 1, 2] + Jp[1, 2] * frame_R[f, 2, 2]
            for i in range(3):
                dx = marker_gen[m, i, 0, 0] * c0 + marker_gen[m, i, 0, 1] * c1 + marker_gen[m, i, 0, 2] * c2
                dy = marker_gen[m, i, 1, 0] * c0 + marker_gen[m, i, 1, 1] * c1 + marker_gen[m, i, 1, 2] * c2
                dz = marker_gen[m, i, 2, 0] * c0 + marker_gen[m, i, 2, 1] * c1 + marker_gen[m, i, 2, 2] * c2
                jm[o, 2 * k, i] = a00 * dx + a01 * dy + a02 * dz
                jm[o, 2 * k + 1, i] = a10 * dx + a11 * dy + a12 * dz
            jm[o, 2 * k, 3] = a00
            jm[o, 2 * k, 4] = a01
            jm[o, 2 * k, 5] = a02
            jm[o, 2 * k + 1, 3] = a10
            jm[o, 2 * k + 1, 4] = a11
            jm[o, 2 * k + 1, 5] = a12
            if with_intr:
                inv_z = 1.0 / cz
                xn = cx * inv_z
                yn = cy * inv_z
                r2 = xn * xn + yn * yn
                radial = 1.0 + r2 * (intr[4] + r2 * (intr[5] + r2 * intr[8]))
                xd = xn * radial + 2.0 * intr[6] * xn * yn + intr[7] * (r2 + 2.0 * xn * xn)
                yd = yn * radial + intr[6] * (r2 + 2.0 * yn * yn) + 2.0 * intr[7] * xn * yn
                jd[o, 2 * k, 0] = xd
                jd[o, 2 * k, 2] = 1.0
                jd[o, 2 * k, 4] = intr[0] * xn * r2
                jd[o, 2 * k, 5] = intr[0] * xn * r2 * r2
                jd[o, 2 * k, 6] = intr[0] * 2.0 * xn * yn
                jd[o, 2 * k, 7] = intr[0] * (r2 + 2.0 * xn * xn)
                jd[o, 2 * k, 8] = intr[0] * xn * r2 * r2 * r2
                jd[o, 2 * k + 1, 1] = yd
                jd[o, 2 * k + 1, 3] = 1.0
                jd[o, 2 * k + 1, 4] = intr[1] * yn * r2
                jd[o, 2 * k + 1, 5] = intr[1] * yn * r2 * r2
                jd[o, 2 * k + 1, 6] = intr[1] * (r2 + 2.0 * yn * yn)
                jd[o, 2 * k + 1, 7] = intr[1] * 2.0 * xn * yn
                jd[o, 2 * k + 1, 8] = intr[1] * yn * r2 * r2 * r2
    return res, jf, jm, jd, ok


def _ba_blocks_np(frame_R, frame_t, frame_gen, marker_R, marker_t, marker_gen,
                  obs_frame, obs_marker, pix, corners, intr, cap, with_intr):
    n_obs = obs_frame.shape[0]
    Rm = marker_R[obs_marker]
    tm = marker_t[obs_marker]
    Rf = frame_R[obs_frame]
    tf = frame_t[obs_frame]
    world = np.einsum("oij,kj->oki", Rm, corners) + tm[:, None, :]  # (O,4,3)
    cam = np.einsum("oij,okj->oki", Rf, world) + tf[:, None, :]
    z = cam[..., 2]
    good = z > MIN_DEPTH
    ok = good.all(axis=1)
    zs = np.where(good, z, 1.0)
    inv_z = 1.0 / zs
    xn = cam[..., 0] * inv_z
    yn = cam[..., 1] * inv_z
    r2 = xn * xn + yn * yn
    k1, k2, p1, p2, k3 = intr[4], intr[5], intr[6], intr[7], intr[8]
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    dradial = k1 + r2 * (2.0 * k2 + 3.0 * k3 * r2)
    xd = xn * radial + 2.0 * p1 * xn * yn + p2 * (r2 + 2.0 * xn * xn)
    yd = yn * radial + p1 * (r2 + 2.0 * yn * yn) + 2.0 * p2 * xn * yn
    res = np.empty((n_obs, 4, 2))
    res[..., 0] = intr[0] * xd + intr[2] - pix[..., 0]
    res[..., 1] = intr[1] * yd + intr[3] - pix[..., 1]
    dxd_dx = radial + 2.0 * xn * xn * dradial + 2.0 * p1 * yn + 6.0 * p2 * xn
    dxd_dy = 2.0 * xn * yn * dradial + 2.0 * p1 * xn + 2.0 * p2 * yn
    dyd_dx = dxd_dy
    dyd_dy = radial + 2.0 * yn * yn * dradial + 6.0 * p1 * yn + 2.0 * p2 * xn
    Jp = np.empty((n_obs, 4, 2, 3))
    Jp[..., 0, 0] = intr[0] * dxd_dx * inv_z
    Jp[..., 0, 1] = intr[0] * dxd_dy * inv_z
    Jp[..., 0, 2] = intr[0] * (-dxd_dx * xn - dxd_dy * yn) * inv_z
    Jp[..., 1, 0] = intr[1] * dyd_dx * inv_z
    Jp[..., 1, 1] = intr[1] * dyd_dy * inv_z
    Jp[..., 1, 2] = intr[1] * (-dyd_dx * xn - dyd_dy * yn) * inv_z
    # frame blocks
    dworld = np.einsum("oaij,okj->okai", frame_gen[obs_frame], world)  # (O,4,3rot,3)
    jf = np.empty((n_obs, 4, 2, 6))
    jf[..., :3] = np.einsum("okri,okai->okra", Jp, dworld)
    jf[..., 3:] = Jp
    # marker blocks
    A = np.einsum("okri,oij->okrj", Jp, Rf)  # (O,4,2,3)
    dcorner = np.einsum("oaij,kj->okai", marker_gen[obs_marker], corners)
    jm = np.empty((n_obs, 4, 2, 6))
    jm[..., :3] = np.einsum("okri,okai->okra", A, dcorner)
    jm[..., 3:] = A
    jd = np.zeros((n_obs, 4, 2, 9))
    if with_intr:
        jd[..., 0, 0] = xd
        jd[..., 0, 2] = 1.0
        jd[..., 0, 4] = intr[0] * xn * r2
        jd[..., 0, 5] = intr[0] * xn * r2 * r2
        jd[..., 0, 6] = intr[0] * 2.0 * xn * yn
        jd[..., 0, 7] = intr[0] * (r2 + 2.0 * xn * xn)
        jd[..., 0, 8] = intr[0] * xn * r2 ** 3
        jd[..., 1, 1] = yd
        jd[..., 1, 3] = 1.0
        jd[..., 1, 4] = intr[1] * yn * r2
        jd[..., 1, 5] = intr[1] * yn * r2 * r2
        jd[..., 1, 6] = intr[1] * (r2 + 2.0 * yn * yn)
        jd[..., 1, 7] = intr[1] * 2.0 * xn * yn
        jd[..., 1, 8] = intr[1] * yn * r2 ** 3
    bad = ~ok
    res[bad] = cap
    jf[bad] = 0.0
    jm[bad] = 0.0
    jd[bad] = 0.0
    return (res.reshape(-1), jf.reshape(n_obs, 8, 6), jm.reshape(n_obs, 8, 6),
            jd.reshape(n_obs, 8, 9), ok)


if NUMBA_ENABLED:
    project_points = _project_points_loop
    pair_score_matrix = _pair_score_matrix_loop
    world_point_scores = _world_point_scores_loop
    ba_residuals = _ba_residuals_loop
    ba_blocks = _ba_blocks_loop
else:
    project_points = _project_points_np
    pair_score_matrix = _pair_score_matrix_np
    world_point_scores = _world_point_scores_np
    ba_residuals = _ba_residuals_np
    ba_blocks = _ba_blocks_np


def warmup():
    """Trigger JIT compilation of every kernel on tiny inputs."""
    r = np.array([0.1, -0.2, 0.3])
    t = np.array([0.0, 0.0, 1.0])
    intr = np.array([500.0, 500.0, 320.0, 240.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    pts = np.array([[0.1, 0.1, 0.0], [0.1, -0.1, 0.0], [-0.1, -0.1, 0.0], [-0.1, 0.1, 0.0]])
    pix = np.full((4, 2), 300.0)
    rodrigues_matrix(r)
    rotation_generators(r)
    project_points(pts + t, intr)
    out = np.zeros(8)
    pose_point_residuals(r, t, pts, pix, intr, out)
    refine_pose(r, t, pts, pix, intr, 2, 1e-8)
    eye = np.eye(3)[None]
    zero = np.zeros((1, 3))
    pair_score_matrix(eye, zero + t, eye, zero + t, pix[None], pts, intr)
    world_point_scores(eye, zero + t, pts, pix, intr, 1e8)
    idx = np.zeros(1, np.int64)
    gen = rotation_generators(r)[None]
    ba_residuals(eye, zero + t, eye, zero, idx, idx, pix[None], pts, intr, 1e4)
    ba_blocks(eye, zero + t, gen, eye, zero, gen, idx, idx, pix[None], pts, intr, 1e4, False)
