"""End-to-end mapping and localization pipelines.

Mapping: per-frame planar poses -> pose quiver -> best-edge pose graph
-> outlier filtering -> cycle error distribution -> initial marker and
frame poses -> sparse LM refinement. Disconnected co-observation graphs
are mapped per connected component, each with its own reference marker.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import cycle_opt, frame_init, posegraph, quiver
from .errors import InsufficientData, NotLocalizable
from .fileio import MarkerMap, Trajectory, TrajectoryEntry
from .geometry import CameraIntrinsics, MarkerGeometry, matrix_to_pose
from .global_opt import LMConfig, OptimizationProblem, optimize

log = logging.getLogger("markermap")


@dataclass
class MappingConfig:
    ambiguity_ratio: float = 3.0
    max_pair_products: int = 10000
    weighted_translations: bool = False
    skip_cycle_correction: bool = False  # ablation: compose the raw tree instead
    seed_root: int | None = None
    lm: LMConfig = field(default_factory=LMConfig)


@dataclass
class ComponentResult:
    component_id: int
    root_id: int
    marker_poses: dict  # id -> Transform4 (marker -> world), optimized
    frame_poses: dict  # frame_id -> Transform4 (world -> camera), optimized
    frame_timestamps: dict
    report: object  # LMReport
    n_cycles: int
    tree_depth: int

    def marker_map(self, side: float) -> MarkerMap:
        return MarkerMap(side=side,
                         markers={i: matrix_to_pose(g) for i, g in self.marker_poses.items()},
                         component_id=self.component_id,
                         mean_px=self.report.mean_px,
                         frames_used=len(self.frame_poses))

    def trajectory(self) -> Trajectory:
        entries = [TrajectoryEntry(frame_id=f, timestamp=self.frame_timestamps[f],
                                   pose=matrix_to_pose(g), confident=True)
                   for f, g in sorted(self.frame_poses.items())]
        return Trajectory(entries=entries)


@dataclass
class MappingResult:
    components: list
    stats: dict


def build_map(frames, geom: MarkerGeometry, delta: CameraIntrinsics,
              config: MappingConfig | None = None) -> MappingResult:
    config = config or MappingConfig()
    if not any(len(f.observations) >= 2 for f in frames):
        raise InsufficientData("insufficient co-observations: "
                               "no frame observes at least two markers")
    stats = quiver.BuildStats()
    pose_sets = quiver.build_frame_pose_sets(frames, geom, delta,
                                             config.ambiguity_ratio, stats)
    edges = quiver.build_quiver(pose_sets)
    if not edges:
        raise InsufficientData("insufficient co-observations: "
                               "no frame yields a usable marker pair")
    best = quiver.select_best_edges(edges, pose_sets, frames, geom, delta,
                                    config.max_pair_products)
    graph = posegraph.build_graph(best)
    components = posegraph.connected_components(graph)
    log.info("frames=%d detections=%d ambiguous=%d degenerate=%d quiver_edges=%d "
             "graph: nodes=%d edges=%d components=%d",
             len(frames), stats.n_detections, stats.n_ambiguous, stats.n_degenerate,
             len(edges), len(graph.nodes), len(graph.undirected_edges()), len(components))

    results = []
    total_cycles = 0
    for comp_id, nodes in enumerate(components):
        sub = graph.subgraph(nodes)
        forced = config.seed_root if (config.seed_root in sub.nodes) else None
        root, tree = posegraph.choose_start_node(sub, forced_root=forced)
        filtered = posegraph.filter_outliers(sub, tree)
        basis = cycle_opt.compute_cycle_basis(filtered, tree)
        total_cycles += len(basis)
        if config.skip_cycle_correction or not basis.cycles:
            source = filtered
        else:
            source = cycle_opt.correct_graph(
                filtered, tree, basis,
                weighted_translations=config.weighted_translations).graph
        marker_poses = posegraph.initial_marker_poses(source, tree)

        frame_poses, timestamps = {}, {}
        for f in frames:
            mapped = [o for o in f.observations if o.marker_id in marker_poses]
            if len(mapped) < 2:
                continue
            try:
                pose, _ = frame_init.estimate_frame_pose(f, marker_poses, geom, delta)
            except NotLocalizable:
                continue
            frame_poses[f.frame_id] = pose
            timestamps[f.frame_id] = f.timestamp if f.timestamp is not None else float(f.frame_id)
        if not frame_poses:
            log.warning("component %d: no frame sees two mapped markers; skipped", comp_id)
            continue

        problem = OptimizationProblem.from_poses(
            marker_poses, frame_poses, frames, geom, delta, gauge_id=root,
            optimize_intrinsics=config.lm.optimize_intrinsics)
        result = optimize(problem, config.lm)
        log.info("component %d: root=%d markers=%d frames=%d cycles=%d "
                 "lm_iterations=%d mean_px=%.4f",
                 comp_id, root, len(marker_poses), len(frame_poses), len(basis),
                 len(result.report.iterations), result.report.mean_px)
        results.append(ComponentResult(
            component_id=comp_id, root_id=root,
            marker_poses=result.marker_poses, frame_poses=result.frame_poses,
            frame_timestamps=timestamps, report=result.report,
            n_cycles=len(basis), tree_depth=tree.max_depth()))
    if not results:
        raise InsufficientData("no component had frames with two mapped markers")
    return MappingResult(components=results, stats={
        "frames": len(frames),
        "detections": stats.n_detections,
        "discarded_ambiguous": stats.n_ambiguous,
        "discarded_degenerate": stats.n_degenerate,
        "quiver_edges": len(edges),
        "graph_nodes": len(graph.nodes),
        "graph_edges": len(graph.undirected_edges()),
        "components": len(components),
        "cycles": total_cycles,
    })


def localize(frames, marker_map: MarkerMap, geom: MarkerGeometry,
             delta: CameraIntrinsics, refine: bool = False) -> Trajectory:
    """Per-frame localization against a fixed map; unlocalizable frames skipped."""
    marker_poses = marker_map.poses()
    entries = []
    skipped = 0
    for f in sorted(frames, key=lambda f: f.frame_id):
        try:
            pose, low_conf = frame_init.estimate_frame_pose(
                f, marker_poses, geom, delta, refine=refine)
        except NotLocalizable:
            skipped += 1
            continue
        ts = f.timestamp if f.timestamp is not None else float(f.frame_id)
        entries.append(TrajectoryEntry(frame_id=f.frame_id, timestamp=ts,
                                       pose=matrix_to_pose(pose),
                                       confident=not low_conf))
    log.info("localized %d/%d frames (%d skipped)", len(entries), len(frames), skipped)
    if not entries:
        raise NotLocalizable("no frame observes any mapped marker")
    return Trajectory(entries=entries)
