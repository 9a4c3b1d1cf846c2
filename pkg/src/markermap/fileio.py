"""File formats and persistence.

All files are UTF-8 text, whitespace-delimited, with '#' comment lines;
floats serialize with 9 significant digits, which round-trips the
formatted value byte-stably. Writers are deterministic and atomic
(temp file + rename).

Formats:
  detections  one frame per line:
              frame_id timestamp n_markers (marker_id x1 y1 x2 y2 x3 y3 x4 y4)*
  calibration key-value lines: width height fx fy cx cy k1 k2 p1 p2 k3
              (missing distortion keys default to 0)
  marker map  key-value header (version/side/component/mean_px/frames_used),
              then `marker <id> rx ry rz tx ty tz` lines (marker -> world)
  trajectory  header, then `frame <id> <timestamp> rx ry rz tx ty tz <conf>`
              lines (world -> camera); also exportable as the 8-column
              `timestamp tx ty tz qx qy qz qw` format (camera -> world,
              unit quaternion, qw >= 0) used by trajectory-evaluation tools
  gt corners  `marker <id> x1 y1 z1 ... x4 y4 z4` lines (world frame)
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError
from .geometry import (CameraIntrinsics, Pose6, Transform4, matrix_to_pose,
                       pose_to_matrix)
from .planar_pose import CornerObservation
from .quiver import FrameDetections

FORMAT_VERSION = "1"


def _fmt(x: float) -> str:
    return f"{float(x):.9g}"


def _atomic_write(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".txt")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _data_lines(path):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line


# --- detections -------------------------------------------------------------


def write_detections(path, frames) -> None:
    lines = ["# detections: frame_id timestamp n_markers"
             " (marker_id x1 y1 x2 y2 x3 y3 x4 y4)*"]
    for f in frames:
        ts = f.timestamp if f.timestamp is not None else float(f.frame_id)
        parts = [str(f.frame_id), _fmt(ts), str(len(f.observations))]
        for obs in f.observations:
            parts.append(str(obs.marker_id))
            parts.extend(_fmt(v) for v in obs.pixels.ravel())
        lines.append(" ".join(parts))
    _atomic_write(path, "\n".join(lines) + "\n")


def read_detections(path) -> list:
    frames = []
    for lineno, line in _data_lines(path):
        tok = line.split()
        try:
            frame_id = int(tok[0])
            ts = float(tok[1])
            n = int(tok[2])
            if len(tok) != 3 + 9 * n:
                raise ValueError(f"expected {3 + 9 * n} fields, got {len(tok)}")
            obs = []
            for k in range(n):
                base = 3 + 9 * k
                mid = int(tok[base])
                pix = np.array([float(v) for v in tok[base + 1:base + 9]]).reshape(4, 2)
                obs.append(CornerObservation(marker_id=mid, pixels=pix))
            frames.append(FrameDetections(frame_id=frame_id, observations=tuple(obs),
                                          timestamp=ts))
        except (ValueError, IndexError) as exc:
            raise ParseError(path, lineno, str(exc)) from exc
    return frames


# --- calibration ------------------------------------------------------------

_CALIB_REQUIRED = ("width", "height", "fx", "fy", "cx", "cy")
_CALIB_OPTIONAL = ("k1", "k2", "p1", "p2", "k3")


def write_calibration(path, delta: CameraIntrinsics) -> None:
    lines = ["# camera calibration",
             f"width {delta.width}", f"height {delta.height}",
             f"fx {_fmt(delta.fx)}", f"fy {_fmt(delta.fy)}",
             f"cx {_fmt(delta.cx)}", f"cy {_fmt(delta.cy)}"]
    lines.extend(f"{k} {_fmt(getattr(delta, k))}" for k in _CALIB_OPTIONAL)
    _atomic_write(path, "\n".join(lines) + "\n")


def read_calibration(path) -> CameraIntrinsics:
    values = {}
    for lineno, line in _data_lines(path):
        tok = line.split()
        if len(tok) != 2:
            raise ParseError(path, lineno, f"expected 'key value', got {line!r}")
        values[tok[0]] = tok[1]
    missing = [k for k in _CALIB_REQUIRED if k not in values]
    if missing:
        raise ParseError(path, 0, f"missing required calibration keys: {missing}")
    try:
        delta = CameraIntrinsics(
            width=int(values["width"]), height=int(values["height"]),
            fx=float(values["fx"]), fy=float(values["fy"]),
            cx=float(values["cx"]), cy=float(values["cy"]),
            **{k: float(values.get(k, 0.0)) for k in _CALIB_OPTIONAL})
    except ValueError as exc:
        raise ParseError(path, 0, str(exc)) from exc
    return delta


# --- marker map -------------------------------------------------------------


@dataclass
class MarkerMap:
    """Optimized marker poses (marker -> world) of one connected component."""

    side: float
    markers: dict  # id -> Pose6
    component_id: int = 0
    mean_px: float = 0.0
    frames_used: int = 0
    version: str = FORMAT_VERSION

    def poses(self) -> dict:
        return {i: pose_to_matrix(p) for i, p in self.markers.items()}


def write_marker_map(path, mmap: MarkerMap) -> None:
    lines = ["# marker map",
             f"version {mmap.version}",
             f"side {_fmt(mmap.side)}",
             f"component {mmap.component_id}",
             f"mean_px {_fmt(mmap.mean_px)}",
             f"frames_used {mmap.frames_used}",
             f"markers {len(mmap.markers)}"]
    for mid in sorted(mmap.markers):
        p = mmap.markers[mid]
        vals = " ".join(_fmt(v) for v in np.concatenate([p.r, p.t]))
        lines.append(f"marker {mid} {vals}")
    _atomic_write(path, "\n".join(lines) + "\n")


def read_marker_map(path) -> MarkerMap:
    header = {}
    markers = {}
    for lineno, line in _data_lines(path):
        tok = line.split()
        try:
            if tok[0] == "marker":
                if len(tok) != 8:
                    raise ValueError("marker line needs id + 6 pose values")
                vals = [float(v) for v in tok[2:]]
                markers[int(tok[1])] = Pose6(np.array(vals[:3]), np.array(vals[3:]))
            elif len(tok) == 2:
                header[tok[0]] = tok[1]
            else:
                raise ValueError(f"unrecognized line {line!r}")
        except (ValueError, IndexError) as exc:
            raise ParseError(path, lineno, str(exc)) from exc
    if "side" not in header:
        raise ParseError(path, 0, "missing 'side' header")
    n_declared = int(header.get("markers", len(markers)))
    if n_declared != len(markers):
        raise ParseError(path, 0,
                         f"header declares {n_declared} markers, found {len(markers)}")
    return MarkerMap(side=float(header["side"]), markers=markers,
                     component_id=int(header.get("component", 0)),
                     mean_px=float(header.get("mean_px", 0.0)),
                     frames_used=int(header.get("frames_used", 0)),
                     version=header.get("version", FORMAT_VERSION))


# --- trajectory -------------------------------------------------------------


@dataclass
class TrajectoryEntry:
    frame_id: int
    timestamp: float
    pose: Pose6  # world -> camera
    confident: bool = True


@dataclass
class Trajectory:
    entries: list

    def __post_init__(self):
        ids = [e.frame_id for e in self.entries]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValueError("trajectory frame ids must be strictly increasing")

    def transforms(self):
        return [(e.frame_id, e.timestamp, pose_to_matrix(e.pose)) for e in self.entries]


def write_trajectory(path, traj: Trajectory) -> None:
    lines = ["# trajectory: frame id timestamp rx ry rz tx ty tz confident"]
    for e in traj.entries:
        vals = " ".join(_fmt(v) for v in np.concatenate([e.pose.r, e.pose.t]))
        lines.append(f"frame {e.frame_id} {_fmt(e.timestamp)} {vals} {int(e.confident)}")
    _atomic_write(path, "\n".join(lines) + "\n")


def read_trajectory(path) -> Trajectory:
    entries = []
    for lineno, line in _data_lines(path):
        tok = line.split()
        try:
            if tok[0] != "frame" or len(tok) != 10:
                raise ValueError("expected 'frame id ts rx ry rz tx ty tz conf'")
            vals = [float(v) for v in tok[3:9]]
            entries.append(TrajectoryEntry(
                frame_id=int(tok[1]), timestamp=float(tok[2]),
                pose=Pose6(np.array(vals[:3]), np.array(vals[3:])),
                confident=bool(int(tok[9]))))
        except (ValueError, IndexError) as exc:
            raise ParseError(path, lineno, str(exc)) from exc
    return Trajectory(entries=entries)


def _quaternion_from_rotation(R):
    """Unit quaternion (qx, qy, qz, qw) with qw >= 0."""
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array([(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s, 0.25 * s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2.0
        q = np.zeros(4)
        q[i] = 0.25 * s
        q[j] = (R[j, i] + R[i, j]) / s
        q[k] = (R[k, i] + R[i, k]) / s
        q[3] = (R[k, j] - R[j, k]) / s
    q = q / np.linalg.norm(q)
    if q[3] < 0:
        q = -q
    return q


def _rotation_from_quaternion(q):
    x, y, z, w = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def write_trajectory_tum(path, traj: Trajectory) -> None:
    """8-column timestamped export: camera pose in the world frame."""
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for e in traj.entries:
        cam_from_world = pose_to_matrix(e.pose)
        world_from_cam = cam_from_world.inverse()
        q = _quaternion_from_rotation(world_from_cam.rotation)
        t = world_from_cam.translation
        vals = [e.timestamp, t[0], t[1], t[2], q[0], q[1], q[2], q[3]]
        lines.append(" ".join(_fmt(v) for v in vals))
    _atomic_write(path, "\n".join(lines) + "\n")


def read_trajectory_tum(path) -> Trajectory:
    entries = []
    for lineno, line in _data_lines(path):
        tok = line.split()
        try:
            if len(tok) != 8:
                raise ValueError("expected 8 columns: ts tx ty tz qx qy qz qw")
            ts = float(tok[0])
            t = np.array([float(v) for v in tok[1:4]])
            q = np.array([float(v) for v in tok[4:8]])
            world_from_cam = Transform4.from_rt(_rotation_from_quaternion(q), t, check=False)
            entries.append(TrajectoryEntry(
                frame_id=len(entries), timestamp=ts,
                pose=matrix_to_pose(world_from_cam.inverse())))
        except (ValueError, IndexError) as exc:
            raise ParseError(path, lineno, str(exc)) from exc
    return Trajectory(entries=entries)


# --- ground-truth corners ---------------------------------------------------


def write_gt_corners(path, corner_map: dict) -> None:
    lines = ["# marker corners: marker id x1 y1 z1 x2 y2 z2 x3 y3 z3 x4 y4 z4"]
    for mid in sorted(corner_map):
        vals = " ".join(_fmt(v) for v in np.asarray(corner_map[mid], float).ravel())
        lines.append(f"marker {mid} {vals}")
    _atomic_write(path, "\n".join(lines) + "\n")


def read_gt_corners(path) -> dict:
    corners = {}
    for lineno, line in _data_lines(path):
        tok = line.split()
        try:
            if tok[0] != "marker" or len(tok) != 14:
                raise ValueError("expected 'marker id' + 12 coordinates")
            corners[int(tok[1])] = np.array([float(v) for v in tok[2:]]).reshape(4, 3)
        except (ValueError, IndexError) as exc:
            raise ParseError(path, lineno, str(exc)) from exc
    return corners
