"""Initial camera pose per frame from the marker map, ambiguity-aware.

Every planar-pose solution (both of them, ungated) of every mapped
marker observed in a frame yields one camera-pose candidate; each
candidate is scored by the reprojection error of ALL observed mapped
markers, so a candidate born from the wrong ambiguous solution scores
poorly on the others. The argmin wins.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import DegenerateObservation, NotLocalizable
from .geometry import CameraIntrinsics, MarkerGeometry, Transform4, pose_to_matrix
from .planar_pose import solve_planar_pose

BEHIND_CAMERA_PENALTY = 1e8  # px^2 per corner; keeps candidate ranking total


@dataclass
class FramePoseCandidate:
    marker_id: int
    which: str  # "best" | "alt"
    cam_from_world: Transform4
    score: float = np.inf


@dataclass
class FramePoseCandidateSet:
    frame_id: int
    candidates: list
    n_mapped_markers: int  # observed markers present in the map
    n_unmapped: int  # observed but not in the map (skipped from scores)


def _mapped_observations(frame, marker_poses):
    return [o for o in frame.observations if o.marker_id in marker_poses]


def enumerate_frame_candidates(frame, marker_poses: dict, geom: MarkerGeometry,
                               delta: CameraIntrinsics) -> FramePoseCandidateSet:
    """Lift both planar solutions of every mapped marker to camera poses."""
    mapped = _mapped_observations(frame, marker_poses)
    if not mapped:
        raise NotLocalizable(f"frame {frame.frame_id} observes no mapped marker")
    candidates = []
    for obs in mapped:
        try:
            pair = solve_planar_pose(geom, obs, delta, ambiguity_ratio=np.inf)
        except DegenerateObservation:
            continue
        world_from_marker = marker_poses[obs.marker_id]
        marker_from_world = world_from_marker.inverse()
        candidates.append(FramePoseCandidate(
            marker_id=obs.marker_id, which="best",
            cam_from_world=pose_to_matrix(pair.best) @ marker_from_world))
        if np.isfinite(pair.err_alt):
            candidates.append(FramePoseCandidate(
                marker_id=obs.marker_id, which="alt",
                cam_from_world=pose_to_matrix(pair.alt) @ marker_from_world))
    if not candidates:
        raise NotLocalizable(f"frame {frame.frame_id}: every mapped observation degenerate")
    return FramePoseCandidateSet(frame_id=frame.frame_id, candidates=candidates,
                                 n_mapped_markers=len(mapped),
                                 n_unmapped=len(frame.observations) - len(mapped))


def _stack_world_points(frame, marker_poses, geom):
    pts, pix = [], []
    for obs in _mapped_observations(frame, marker_poses):
        pts.append(marker_poses[obs.marker_id].apply(geom.corners))
        pix.append(obs.pixels)
    return (np.ascontiguousarray(np.concatenate(pts)),
            np.ascontiguousarray(np.concatenate(pix)))


def score_candidate(candidate: FramePoseCandidate, frame, marker_poses: dict,
                    geom: MarkerGeometry, delta: CameraIntrinsics) -> float:
    """Summed squared reprojection error of all observed mapped markers (px^2)."""
    pts, pix = _stack_world_points(frame, marker_poses, geom)
    g = candidate.cam_from_world
    scores = _kernels.world_point_scores(
        np.ascontiguousarray(g.rotation[None]), np.ascontiguousarray(g.translation[None]),
        pts, pix, delta.as_array(), BEHIND_CAMERA_PENALTY)
    return float(scores[0])


def score_all(cand_set: FramePoseCandidateSet, frame, marker_poses: dict,
              geom: MarkerGeometry, delta: CameraIntrinsics) -> None:
    pts, pix = _stack_world_points(frame, marker_poses, geom)
    R = np.ascontiguousarray(np.stack([c.cam_from_world.rotation for c in cand_set.candidates]))
    t = np.ascontiguousarray(np.stack([c.cam_from_world.translation for c in cand_set.candidates]))
    scores = _kernels.world_point_scores(R, t, pts, pix, delta.as_array(),
                                         BEHIND_CAMERA_PENALTY)
    for c, s in zip(cand_set.candidates, scores):
        c.score = float(s)


def select_frame_pose(cand_set: FramePoseCandidateSet):
    """Argmin-scored candidate; ties break by (marker id, best before alt).

    Returns (candidate, low_confidence). Frames seeing a single mapped
    marker cannot disambiguate, so their selection is flagged.
    """
    if not cand_set.candidates:
        raise NotLocalizable(f"frame {cand_set.frame_id}: no candidates")
    ordered = sorted(cand_set.candidates,
                     key=lambda c: (c.marker_id, 0 if c.which == "best" else 1))
    best = ordered[0]
    for c in ordered[1:]:
        if c.score < best.score:
            best = c
    return best, cand_set.n_mapped_markers < 2


def estimate_frame_pose(frame, marker_poses: dict, geom: MarkerGeometry,
                        delta: CameraIntrinsics, refine: bool = False):
    """enumerate -> score -> select; optionally Gauss-Newton refine the winner.

    Returns (Transform4 world -> camera, low_confidence).
    """
    cand_set = enumerate_frame_candidates(frame, marker_poses, geom, delta)
    score_all(cand_set, frame, marker_poses, geom, delta)
    winner, low_conf = select_frame_pose(cand_set)
    pose = winner.cam_from_world
    if refine:
        pose = refine_frame_pose(pose, frame, marker_poses, geom, delta)
    return pose, low_conf


def refine_frame_pose(cam_from_world: Transform4, frame, marker_poses: dict,
                      geom: MarkerGeometry, delta: CameraIntrinsics,
                      max_iter: int = 25, step_tol: float = 1e-10) -> Transform4:
    """Per-frame pose polish on all mapped corner observations."""
    from .geometry import matrix_to_rodrigues

    pts, pix = _stack_world_points(frame, marker_poses, geom)
    r0 = np.ascontiguousarray(matrix_to_rodrigues(cam_from_world.rotation))
    t0 = np.ascontiguousarray(cam_from_world.translation)
    r, t, _, ok = _kernels.refine_pose(r0, t0, pts, pix, delta.as_array(),
                                       max_iter, step_tol)
    if not ok:
        return cam_from_world
    return Transform4.from_rt(_kernels.rodrigues_matrix(r), t, check=False)
