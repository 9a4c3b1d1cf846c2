"""Command-line interface: map, localize, eval, synth.

Exit codes: 0 success, 1 failure, 2 success with a disconnected pose
graph (one map written per component), 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import evaluation, fileio, pipeline, synth
from .errors import MarkerMapError
from .geometry import MarkerGeometry
from .global_opt import LMConfig

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_DISCONNECTED = 2
EXIT_USAGE = 64

log = logging.getLogger("markermap")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _component_path(path, component_id):
    if component_id == 0:
        return path
    root, ext = os.path.splitext(path)
    return f"{root}.comp{component_id}{ext}"


def _cmd_map(args):
    frames = fileio.read_detections(args.detections)
    delta = fileio.read_calibration(args.calib)
    geom = MarkerGeometry(side=args.side)
    lm = LMConfig(optimize_intrinsics=args.optimize_intrinsics)
    config = pipeline.MappingConfig(ambiguity_ratio=args.ambiguity_ratio,
                                    seed_root=args.seed_root, lm=lm)
    result = pipeline.build_map(frames, geom, delta, config)
    for comp in result.components:
        path = _component_path(args.output, comp.component_id)
        fileio.write_marker_map(path, comp.marker_map(args.side))
        log.info("wrote map %s (%d markers)", path, len(comp.marker_poses))
    if args.trajectory:
        fileio.write_trajectory(args.trajectory, result.components[0].trajectory())
        log.info("wrote trajectory %s", args.trajectory)
    if args.log:
        with open(args.log, "w", encoding="utf-8") as fh:
            for key, value in result.stats.items():
                fh.write(f"{key} {value}\n")
            for comp in result.components:
                fh.write(f"# component {comp.component_id} LM iterations\n")
                fh.write(comp.report.format_log() + "\n")
    if result.stats["components"] > 1:
        log.warning("pose graph has %d connected components; "
                    "one map written per component", result.stats["components"])
        return EXIT_DISCONNECTED
    return EXIT_OK


def _cmd_localize(args):
    frames = fileio.read_detections(args.detections)
    delta = fileio.read_calibration(args.calib)
    mmap = fileio.read_marker_map(args.map)
    geom = MarkerGeometry(side=mmap.side)
    traj = pipeline.localize(frames, mmap, geom, delta, refine=args.refine)
    fileio.write_trajectory(args.output, traj)
    log.info("wrote trajectory %s (%d frames)", args.output, len(traj.entries))
    if args.tum:
        fileio.write_trajectory_tum(args.tum, traj)
    return EXIT_OK


def _cmd_eval(args):
    report = {}
    if args.est_map:
        if not args.gt_corners:
            raise MarkerMapError("--est-map requires --gt-corners")
        mmap = fileio.read_marker_map(args.est_map)
        gt = fileio.read_gt_corners(args.gt_corners)
        ace = evaluation.compute_ace(mmap.poses(), gt, MarkerGeometry(side=mmap.side))
        report["ace_m"] = ace.ace
        report["matched_markers"] = ace.matched_markers
    if args.est_traj:
        if not args.gt_traj:
            raise MarkerMapError("--est-traj requires --gt-traj")
        est = fileio.read_trajectory(args.est_traj).transforms()
        gt = fileio.read_trajectory(args.gt_traj).transforms()
        grid = evaluation.DEFAULT_SCALE_GRID if args.scale_search else None
        ate = evaluation.compute_ate(est, gt, scale_grid=grid)
        report["ate_m"] = ate.ate
        report["scale"] = ate.scale
        report["matched_frames"] = ate.matched_frames
    if not report:
        raise MarkerMapError("nothing to evaluate: pass --est-map and/or --est-traj")
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def _cmd_synth(args):
    scene = synth.generate_scene(args.layout, args.markers, args.side, seed=args.seed)
    delta = synth.default_intrinsics()
    seq = synth.generate_sequence(scene, args.trajectory, args.frames, args.noise,
                                  delta, seed=args.seed, distance=args.distance)
    prefix = args.output
    fileio.write_detections(f"{prefix}.detections.txt", seq.detections)
    fileio.write_calibration(f"{prefix}.calib.txt", delta)
    fileio.write_gt_corners(f"{prefix}.gt_corners.txt", scene.corner_map())
    entries = [fileio.TrajectoryEntry(frame_id=i, timestamp=i / 30.0,
                                      pose=fileio.matrix_to_pose(g), confident=True)
               for i, g in enumerate(seq.frame_poses)]
    fileio.write_trajectory(f"{prefix}.gt_traj.txt", fileio.Trajectory(entries=entries))
    n_obs = sum(len(f.observations) for f in seq.detections)
    log.info("wrote %s.{detections,calib,gt_corners,gt_traj}.txt "
             "(%d frames, %d observations)", prefix, len(seq.detections), n_obs)
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="markermap",
                     description="Offline mapping and localization from planar markers")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("map", help="build a marker map from detections")
    p.add_argument("--detections", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--side", type=float, required=True, help="marker side length (m)")
    p.add_argument("--ambiguity-ratio", type=float, default=3.0)
    p.add_argument("--optimize-intrinsics", action="store_true")
    p.add_argument("--seed-root", type=int, default=None,
                   help="force this marker as the reference (gauge) node")
    p.add_argument("-o", "--output", required=True, help="marker map output path")
    p.add_argument("--trajectory", default=None, help="also write the mapped-frame poses")
    p.add_argument("--log", default=None, help="write counts and the LM iteration log")
    p.set_defaults(func=_cmd_map)

    p = sub.add_parser("localize", help="localize frames against an existing map")
    p.add_argument("--map", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--refine", action="store_true", help="per-frame pose polish")
    p.add_argument("--tum", default=None, help="also export the 8-column format")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=_cmd_localize)

    p = sub.add_parser("eval", help="compare estimates against ground truth")
    p.add_argument("--est-map", default=None)
    p.add_argument("--gt-corners", default=None)
    p.add_argument("--est-traj", default=None)
    p.add_argument("--gt-traj", default=None)
    p.add_argument("--scale-search", action="store_true",
                   help="grid-search the estimate scale over [0.01, 3] step 0.001")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic sequence with ground truth")
    p.add_argument("--layout", choices=synth.LAYOUTS, required=True)
    p.add_argument("--markers", type=int, required=True)
    p.add_argument("--side", type=float, required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--noise", type=float, default=0.0, help="corner noise sigma (px)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trajectory", choices=synth.TRAJECTORIES, default="orbit")
    p.add_argument("--distance", type=float, default=None, help="orbit radius (m)")
    p.add_argument("-o", "--output", required=True, help="output file prefix")
    p.set_defaults(func=_cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    try:
        return args.func(args)
    except MarkerMapError as exc:
        log.error("%s", exc)
        return EXIT_FAILURE
    except (OSError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
