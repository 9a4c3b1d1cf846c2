"""Offline mapping and localization from squared planar fiducial markers.

From per-frame 2D corner detections, reconstructs the 3D pose of every
marker in a common frame and the camera pose of every frame: pairwise
relative poses (quiver) -> best-edge pose graph -> cycle error
distribution -> sparse Levenberg-Marquardt refinement. Includes
trajectory/corner-error evaluation and a synthetic-data generator.
"""

from .geometry import (CameraIntrinsics, MarkerGeometry, Pose6, Transform4,
                       matrix_to_pose, matrix_to_rodrigues, pose_to_matrix,
                       project, rodrigues_to_matrix)
from .planar_pose import CornerObservation, PoseCandidatePair, solve_planar_pose
from .quiver import FrameDetections
from .fileio import MarkerMap, Trajectory, TrajectoryEntry
from .pipeline import MappingConfig, build_map, localize

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics", "CornerObservation", "FrameDetections", "MarkerGeometry",
    "MarkerMap", "MappingConfig", "Pose6", "PoseCandidatePair", "Trajectory",
    "TrajectoryEntry", "Transform4", "build_map", "localize", "matrix_to_pose",
    "matrix_to_rodrigues", "pose_to_matrix", "project", "rodrigues_to_matrix",
    "solve_planar_pose",
]
