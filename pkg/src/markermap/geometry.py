"""Rigid-transform algebra and the camera projection model.

Conventions:
  * A Transform4 named ``b_from_a`` maps points expressed in frame ``a``
    into frame ``b`` via p_b = R p_a + t.
  * Marker poses map marker -> world, frame (camera) poses map
    world -> camera.
  * Rotations are axis-angle 3-vectors (angle = vector norm, radians),
    canonical range [0, pi].
  * Pixels follow the OpenCV convention: (0, 0) is the center of the
    top-left pixel; distortion is the 5-coefficient radial-tangential
    model (k1, k2, p1, p2, k3), all defaulting to zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import PointBehindCamera

_ROT_TOL = 1e-9


def _as_vec3(v, name):
    a = np.asarray(v, dtype=float).reshape(-1)
    if a.shape != (3,):
        raise ValueError(f"{name} must be a 3-vector")
    if not np.isfinite(a).all():
        raise ValueError(f"{name} must be finite")
    return a


def rodrigues_to_matrix(r) -> np.ndarray:
    """Rotation matrix of an axis-angle vector (identity below 1e-12 rad)."""
    r = _as_vec3(r, "rotation vector")
    return _kernels.rodrigues_matrix(r)


def matrix_to_rodrigues(R) -> np.ndarray:
    """Canonical axis-angle vector (norm in [0, pi]) of a rotation matrix.

    The near-zero and near-pi angles use dedicated branches so round
    trips stay stable at both ends of the range.
    """
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.isfinite(R).all():
        raise ValueError("expected a finite 3x3 matrix")
    if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
        raise ValueError("matrix is not a rotation")
    vee = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    sin_t = np.linalg.norm(vee)
    cos_t = float(np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0))
    theta = float(np.arctan2(sin_t, cos_t))
    if theta < 1e-12:
        return vee
    if theta > np.pi - 1e-7:
        # axis from the symmetric part; well conditioned near pi
        omc = 1.0 - cos_t
        axis_sq = np.clip((np.diag(R) - cos_t) / omc, 0.0, 1.0)
        axis = np.sqrt(axis_sq)
        i = int(np.argmax(axis))
        sym = 0.5 * (R + R.T)
        for j in range(3):
            if j != i:
                axis[j] = sym[i, j] / (omc * axis[i])
        axis /= np.linalg.norm(axis)
        if sin_t > 1e-12:
            if np.dot(axis, vee) < 0.0:
                axis = -axis
        else:
            # exactly pi: both signs equivalent, pick first nonzero positive
            for j in range(3):
                if abs(axis[j]) > 1e-8:
                    if axis[j] < 0.0:
                        axis = -axis
                    break
        return axis * theta
    return vee * (theta / sin_t)


def canonical_rotation_vector(r) -> np.ndarray:
    """Wrap the angle into [0, pi], flipping the axis when needed."""
    r = _as_vec3(r, "rotation vector")
    theta = float(np.linalg.norm(r))
    if theta <= np.pi:
        return r.copy()
    wrapped = np.fmod(theta, 2.0 * np.pi)
    if wrapped > np.pi:
        return -(r / theta) * (2.0 * np.pi - wrapped)
    return (r / theta) * wrapped


@dataclass(frozen=True)
class Pose6:
    """Minimal 6-parameter pose: axis-angle rotation + translation (meters)."""

    r: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "r", _as_vec3(self.r, "r"))
        object.__setattr__(self, "t", _as_vec3(self.t, "t"))
        self.r.setflags(write=False)
        self.t.setflags(write=False)

    def canonical(self) -> "Pose6":
        return Pose6(canonical_rotation_vector(self.r), self.t)

    @staticmethod
    def identity() -> "Pose6":
        return Pose6(np.zeros(3), np.zeros(3))


class Transform4:
    """Homogeneous 4x4 rigid transform with orthonormality invariants."""

    __slots__ = ("m",)

    def __init__(self, m, check: bool = True):
        m = np.array(m, dtype=float)
        if m.shape != (4, 4):
            raise ValueError("expected a 4x4 matrix")
        if check:
            if not np.isfinite(m).all():
                raise ValueError("transform must be finite")
            if not np.array_equal(m[3], np.array([0.0, 0.0, 0.0, 1.0])):
                raise ValueError("bottom row must be (0, 0, 0, 1)")
            R = m[:3, :3]
            if np.linalg.norm(R.T @ R - np.eye(3)) >= _ROT_TOL:
                raise ValueError("rotation block is not orthonormal")
            if abs(np.linalg.det(R) - 1.0) >= _ROT_TOL:
                raise ValueError("rotation block must have determinant +1")
        m.setflags(write=False)
        self.m = m

    @staticmethod
    def identity() -> "Transform4":
        return Transform4(np.eye(4), check=False)

    @staticmethod
    def from_rt(R, t, check: bool = True) -> "Transform4":
        m = np.eye(4)
        m[:3, :3] = R
        m[:3, 3] = t
        return Transform4(m, check=check)

    @property
    def rotation(self) -> np.ndarray:
        return self.m[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.m[:3, 3]

    def inverse(self) -> "Transform4":
        R = self.rotation.T
        return Transform4.from_rt(R, -R @ self.translation, check=False)

    def __matmul__(self, other: "Transform4") -> "Transform4":
        return Transform4(self.m @ other.m, check=False)

    def apply(self, points) -> np.ndarray:
        """Transform one point (3,) or a stack (..., 3)."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def __repr__(self):
        return f"Transform4({self.m.tolist()})"


def pose_to_matrix(z: Pose6) -> Transform4:
    return Transform4.from_rt(rodrigues_to_matrix(z.r), z.t, check=False)


def matrix_to_pose(g: Transform4) -> Pose6:
    return Pose6(matrix_to_rodrigues(g.rotation), g.translation.copy())


def transform_point(g: Transform4, p) -> np.ndarray:
    return g.apply(_as_vec3(p, "point"))


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera with radial-tangential distortion."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    k3: float = 0.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy,
                         self.k1, self.k2, self.p1, self.p2, self.k3])

    def undistort_points(self, pixels, iterations: int = 10) -> np.ndarray:
        """Normalized image coordinates of distorted pixels.

        Fixed-point inversion of the distortion model; 10 iterations are
        plenty for lens coefficients in the usual range.
        """
        pix = np.asarray(pixels, dtype=float).reshape(-1, 2)
        xd = (pix[:, 0] - self.cx) / self.fx
        yd = (pix[:, 1] - self.cy) / self.fy
        x, y = xd.copy(), yd.copy()
        for _ in range(iterations):
            r2 = x * x + y * y
            radial = 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3))
            dx = 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x)
            dy = self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y
            x = (xd - dx) / radial
            y = (yd - dy) / radial
        return np.stack((x, y), axis=1)


@dataclass(frozen=True)
class MarkerGeometry:
    """Square marker of side length `side` (meters), corners in marker frame.

    Corner order: (s/2,-s/2,0), (s/2,s/2,0), (-s/2,s/2,0), (-s/2,-s/2,0).
    """

    side: float
    corners: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.side <= 0 or not np.isfinite(self.side):
            raise ValueError("marker side must be positive")
        h = self.side / 2.0
        c = np.array([[h, -h, 0.0], [h, h, 0.0], [-h, h, 0.0], [-h, -h, 0.0]])
        c.setflags(write=False)
        object.__setattr__(self, "corners", c)


def project(delta: CameraIntrinsics, g: Transform4, p) -> np.ndarray:
    """Project a world point through camera pose `g`; raises behind the camera."""
    q = g.apply(_as_vec3(p, "point"))
    u, v, ok = _kernels.project_point(q[0], q[1], q[2], delta.as_array())
    if not ok:
        raise PointBehindCamera(f"point depth {q[2]:.3g} <= {_kernels.MIN_DEPTH}")
    return np.array([u, v])


def project_many(delta: CameraIntrinsics, g: Transform4, points):
    """Batch projection; returns (pixels (N, 2), in_front (N,))."""
    pts = np.ascontiguousarray(np.asarray(points, dtype=float).reshape(-1, 3) @ g.rotation.T
                               + g.translation)
    return _kernels.project_points(pts, delta.as_array())


def project_pose_jacobian(delta: CameraIntrinsics, z: Pose6, p):
    """Pixel and its 2x6 Jacobian w.r.t. the pose parameters (r, t).

    The pose maps the point's frame into the camera frame, matching the
    parametrization used by the global optimizer.
    """
    p = _as_vec3(p, "point")
    R = _kernels.rodrigues_matrix(z.r)
    gen = _kernels.rotation_generators(z.r)
    q = R @ p + z.t
    u, v, ok, Jp = _kernels.project_point_jacobian(q[0], q[1], q[2], delta.as_array())
    if not ok:
        raise PointBehindCamera("point behind camera")
    J = np.zeros((2, 6))
    for i in range(3):
        J[:, i] = Jp @ (gen[i] @ p)
    J[:, 3:] = Jp
    return np.array([u, v]), J
