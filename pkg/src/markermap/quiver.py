"""Pose quiver: every pairwise relative marker pose observed in any frame.

Each frame with two or more usable (unambiguous, non-degenerate) marker
poses contributes one edge per marker pair i < j, carrying the relative
transform marker i -> marker j seen in that frame. The best edge per
pair is the one whose relative pose explains the observations in all
frames seeing the pair with the smallest summed reprojection error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import DegenerateObservation
from .geometry import CameraIntrinsics, MarkerGeometry, Transform4, pose_to_matrix
from .planar_pose import CornerObservation, solve_planar_pose

DEFAULT_MAX_PAIR_PRODUCTS = 10000
UNVALIDATED_WEIGHT = 1e9  # px^2, pairs co-seen in a single frame have no cross-check


@dataclass(frozen=True)
class FrameDetections:
    """All marker corner observations of one frame."""

    frame_id: int
    observations: tuple
    timestamp: float | None = None

    def __post_init__(self):
        obs = tuple(self.observations)
        ids = [o.marker_id for o in obs]
        if len(set(ids)) != len(ids):
            raise ValueError(f"frame {self.frame_id}: duplicate marker ids")
        object.__setattr__(self, "observations", obs)

    def observation_of(self, marker_id: int) -> CornerObservation | None:
        for o in self.observations:
            if o.marker_id == marker_id:
                return o
        return None


@dataclass
class FramePoseSet:
    """Usable marker -> camera poses of one frame (ambiguous solutions dropped)."""

    frame_id: int
    poses: dict  # marker_id -> Transform4 (marker -> camera)


@dataclass(frozen=True)
class QuiverEdge:
    """Relative pose marker i -> marker j (i < j) observed in one frame."""

    i: int
    j: int
    frame_id: int
    rel: Transform4


@dataclass(frozen=True)
class BestEdge:
    """Winner of the per-pair argmin.

    `score` is the minimal summed cross-frame error (the argmin value);
    `weight` is the mean cross-frame error of the winner over the frames
    it was NOT estimated from, which is comparable across pairs and is
    what the pose graph uses. Pairs observed in a single frame carry no
    cross-validation and get UNVALIDATED_WEIGHT.
    """

    rel: Transform4
    score: float
    weight: float
    n_frames: int


@dataclass
class BuildStats:
    n_detections: int = 0
    n_ambiguous: int = 0
    n_degenerate: int = 0


def build_frame_pose_sets(frames, geom: MarkerGeometry, delta: CameraIntrinsics,
                          ambiguity_ratio: float = 3.0, stats: BuildStats | None = None):
    """Solve per-observation planar poses, keeping only trustworthy ones."""
    out = []
    for frame in frames:
        poses = {}
        for obs in frame.observations:
            if stats is not None:
                stats.n_detections += 1
            try:
                pair = solve_planar_pose(geom, obs, delta, ambiguity_ratio)
            except DegenerateObservation:
                if stats is not None:
                    stats.n_degenerate += 1
                continue
            if pair.ambiguous:
                if stats is not None:
                    stats.n_ambiguous += 1
                continue
            poses[obs.marker_id] = pose_to_matrix(pair.best)
        out.append(FramePoseSet(frame_id=frame.frame_id, poses=poses))
    return out


def build_quiver(pose_sets) -> list:
    """One edge per frame per marker pair i < j present in that frame."""
    edges = []
    for ps in pose_sets:
        ids = sorted(ps.poses)
        for a in range(len(ids)):
            for b in range(a + 1, len(ids)):
                i, j = ids[a], ids[b]
                rel = ps.poses[j].inverse() @ ps.poses[i]
                edges.append(QuiverEdge(i=i, j=j, frame_id=ps.frame_id, rel=rel))
    return edges


def cross_frame_error(rel: Transform4, pose_set: FramePoseSet, detections: FrameDetections,
                      i: int, j: int, geom: MarkerGeometry, delta: CameraIntrinsics) -> float:
    """Reprojection error (px^2) of marker i's corners mapped through `rel`
    and projected with marker j's pose in this frame."""
    if j not in pose_set.poses:
        raise ValueError(f"frame {pose_set.frame_id} has no usable pose for marker {j}")
    obs = detections.observation_of(i)
    if obs is None:
        raise ValueError(f"frame {pose_set.frame_id} does not observe marker {i}")
    g = pose_set.poses[j]
    scores = _kernels.pair_score_matrix(
        np.ascontiguousarray(rel.rotation[None]),
        np.ascontiguousarray(rel.translation[None]),
        np.ascontiguousarray(g.rotation[None]),
        np.ascontiguousarray(g.translation[None]),
        np.ascontiguousarray(obs.pixels[None]),
        geom.corners, delta.as_array())
    return float(scores[0, 0])


def _even_subsample(items, k):
    if len(items) <= k:
        return list(items)
    idx = np.unique(np.round(np.linspace(0, len(items) - 1, k)).astype(int))
    return [items[i] for i in idx]


def select_best_edges(edges, pose_sets, frames, geom: MarkerGeometry,
                      delta: CameraIntrinsics,
                      max_pair_products: int = DEFAULT_MAX_PAIR_PRODUCTS) -> dict:
    """Argmin-scored best relative pose per marker pair.

    Every candidate edge of a pair is scored by the sum of its
    cross-frame reprojection errors over all frames seeing the pair
    (the source frame included). Ties break toward the lower source
    frame id. Pairs whose candidate x frame product exceeds
    `max_pair_products` are deterministically subsampled.

    Returns {(i, j): BestEdge} with i < j.
    """
    by_frame_ps = {ps.frame_id: ps for ps in pose_sets}
    by_frame_det = {f.frame_id: f for f in frames}
    pairs = {}
    for e in edges:
        pairs.setdefault((e.i, e.j), []).append(e)
    best = {}
    intr = delta.as_array()
    for (i, j) in sorted(pairs):
        cands = sorted(pairs[(i, j)], key=lambda e: e.frame_id)
        frame_ids = [e.frame_id for e in cands]
        if len(cands) * len(frame_ids) > max_pair_products:
            limit = max(1, int(math.isqrt(max_pair_products)))
            cands = _even_subsample(cands, limit)
            frame_ids = _even_subsample(frame_ids, max(1, max_pair_products // len(cands)))
        cand_R = np.ascontiguousarray(np.stack([e.rel.rotation for e in cands]))
        cand_t = np.ascontiguousarray(np.stack([e.rel.translation for e in cands]))
        fr_R = np.ascontiguousarray(np.stack([by_frame_ps[f].poses[j].rotation for f in frame_ids]))
        fr_t = np.ascontiguousarray(np.stack([by_frame_ps[f].poses[j].translation for f in frame_ids]))
        pix = np.ascontiguousarray(np.stack(
            [by_frame_det[f].observation_of(i).pixels for f in frame_ids]))
        matrix = _kernels.pair_score_matrix(cand_R, cand_t, fr_R, fr_t, pix,
                                            geom.corners, intr)
        scores = matrix.sum(axis=1)
        k = 0
        for a in range(1, len(cands)):
            if scores[a] < scores[k]:
                k = a
        others = [f for f, v in zip(frame_ids, matrix[k])
                  if f != cands[k].frame_id and np.isfinite(v)]
        if others:
            row = [v for f, v in zip(frame_ids, matrix[k])
                   if f != cands[k].frame_id and np.isfinite(v)]
            weight = float(np.mean(row))
        else:
            weight = UNVALIDATED_WEIGHT
        best[(i, j)] = BestEdge(rel=cands[k].rel, score=float(scores[k]),
                                weight=weight, n_frames=len(frame_ids))
    return best
