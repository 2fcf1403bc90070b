"""Command line entry point: ``gpslam run|synth|register|eval``."""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from gpslam.config import SlamConfig, _as_bool, load_config
from gpslam.geometry import Pose, relative_error
from gpslam.io import (
    Trajectory,
    load_cloud,
    load_scan_sequence,
    load_trajectory,
    save_cloud,
    save_timestamps,
    save_trajectory,
    write_timing_report,
)
from gpslam.mapstore import reconstruct_frame
from gpslam.metrics import UndefinedMetric, closest_point_rmse, mean_map_entropy, trajectory_error
from gpslam.pipeline import frames_from_scans, run_pipeline
from gpslam.registration import ConvergenceWarning, RegistrationError, register_scan
from gpslam.synth import load_scene, synth_scan

log = logging.getLogger("gpslam")


def _parse_perturb(text: str) -> Pose:
    vals = [float(v) for v in text.replace(",", " ").split()]
    if len(vals) != 4:
        raise argparse.ArgumentTypeError("--perturb expects 'tx ty tz yaw_deg'")
    return Pose.from_xyz_yaw(vals[0], vals[1], vals[2], np.radians(vals[3]))


def cmd_run(args) -> int:
    cfg = load_config(args.config) if args.config else SlamConfig()
    if args.refine is not None:
        cfg = replace(cfg, pipeline=replace(cfg.pipeline, refine_enabled=_as_bool(args.refine)))
    scans, stamps, files = load_scan_sequence(args.input)
    log.info("loaded %d scans from %s", len(scans), args.input)
    result = run_pipeline(frames_from_scans(scans, stamps), cfg)
    if args.output_traj:
        save_trajectory(result.trajectory, args.output_traj)
    if args.output_map:
        result.core_map.export(args.output_map)
    if args.stats:
        write_timing_report(result.timings, args.stats)
    total = np.array([t.total_ms for t in result.timings])
    print(f"frames {len(result.timings)}")
    print(f"flagged {len(result.flagged)}")
    print(f"dropped_refine_batches {result.dropped_batches}")
    print(f"mean_frame_ms {total.mean():.3f}")
    print(f"map_samples {result.core_map.sample_count()}")
    return 0


def cmd_synth(args) -> int:
    scene = load_scene(args.scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(len(scene)):
        scan = synth_scan(scene, k)
        save_cloud(scan, out / f"scan_{k:05d}.pcd")
        print(f"scan {k} points {len(scan)}")
    save_timestamps(scene.timestamps, out / "timestamps.txt")
    save_trajectory(Trajectory(np.array(scene.timestamps), scene.path), out / "groundtruth.txt")
    return 0


def cmd_register(args) -> int:
    cfg = load_config(args.config) if args.config else SlamConfig()
    source = load_cloud(args.source)
    target = load_cloud(args.target)
    reference = reconstruct_frame(target, cfg.grid, cfg.kernel)
    initial = args.perturb
    match_cfg = replace(cfg.match, max_outer_iters=args.max_iters)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        try:
            res = register_scan(source, reference, initial, cfg.grid, cfg.kernel, match_cfg)
        except RegistrationError as exc:
            print(f"error {type(exc).__name__}: {exc}")
            return 2
    for it, pose in enumerate(res.poses):
        rmse = closest_point_rmse(pose.apply(source), target)
        print(f"iter {it} rmse {rmse:.6f}")
    trans, rot = relative_error(res.pose, Pose.identity())
    tx, ty, tz = res.pose.translation
    print(f"pose {tx:.6f} {ty:.6f} {tz:.6f} yaw_deg {np.degrees(res.pose.yaw()):.6f}")
    print(f"residual_translation_m {trans:.6f}")
    print(f"residual_rotation_deg {np.degrees(rot):.6f}")
    print(f"converged {int(res.converged)}")
    return 0


def cmd_eval_mme(args) -> int:
    try:
        value = mean_map_entropy(load_cloud(args.cloud), args.radius)
    except UndefinedMetric as exc:
        print(f"error {exc}")
        return 2
    print(f"mme_nats {value:.6f}")
    return 0


def cmd_eval_traj(args) -> int:
    try:
        report = trajectory_error(load_trajectory(args.est), load_trajectory(args.gt), args.max_dt)
    except UndefinedMetric as exc:
        print(f"error {exc}")
        return 2
    print("\n".join(report.lines()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gpslam", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run odometry over a scan sequence")
    p.add_argument("--input", required=True, help="directory of scans or a single cloud file")
    p.add_argument("--config", help="YAML key-value configuration")
    p.add_argument("--output-map", help="write map samples (x y z variance direction)")
    p.add_argument("--output-traj", help="write trajectory (timestamp tx ty tz qx qy qz qw)")
    p.add_argument("--refine", choices=["on", "off"], help="override refine_enabled")
    p.add_argument("--stats", help="write per-frame timing report")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("synth", help="render a synthetic scene into scans")
    p.add_argument("--scene", required=True, help="YAML scene description")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("register", help="register a perturbed source cloud onto a target")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--perturb", type=_parse_perturb, default=Pose.identity(), help="'tx ty tz yaw_deg'")
    p.add_argument("--config")
    p.add_argument("--max-iters", type=int, default=10)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("eval", help="evaluation metrics")
    esub = p.add_subparsers(dest="metric", required=True)
    e = esub.add_parser("mme", help="mean map entropy of a cloud")
    e.add_argument("--cloud", required=True)
    e.add_argument("--radius", type=float, default=1.5)
    e.set_defaults(func=cmd_eval_mme)
    e = esub.add_parser("traj", help="trajectory error against ground truth")
    e.add_argument("--est", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--max-dt", type=float, default=0.02)
    e.set_defaults(func=cmd_eval_traj)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
