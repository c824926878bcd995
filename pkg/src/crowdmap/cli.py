"""Command line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime failure. Logs go to
stderr, results to files under ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from crowdmap import plotting
from crowdmap.association import associate
from crowdmap.fusion import FrameRecord, ObservationBatch, crowdsource_update
from crowdmap.localizer import LocalizationError
from crowdmap.map_model import Pose2, VectorMap
from crowdmap.metrics import loc_stats, mean_ap, report_row, write_report_csv, write_report_json
from crowdmap.perception_sim import generate_scenario, synthesize_frame
from crowdmap.pipeline import ConfigError, RunConfig, frame_rng, localize_frame, run_cycles, world_for_traversal
from crowdmap.store import MapRepository, StoreError

log = logging.getLogger("crowdmap")


def _poses_json(poses) -> list:
    return [list(p.as_array()) for p in poses]


def _read_poses(path) -> list[Pose2]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = data["poses"]
    return [Pose2.from_array(p) for p in data]


def _write_trajectory_csv(path, poses) -> None:
    # t is the frame index
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "x", "y", "yaw"])
        for t, p in enumerate(poses):
            w.writerow([t, repr(p.x), repr(p.y), repr(p.yaw)])


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "cycles", None) is not None:
        over["cycles"] = args.cycles
    if getattr(args, "no_uncertainty", False):
        over["use_uncertainty"] = False
    return replace(cfg, **over) if over else cfg


def cmd_simulate(args) -> int:
    cfg = load_run_config(args)
    out = Path(args.out)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    world, traj = generate_scenario(cfg.kind, cfg.length, np.random.default_rng([cfg.seed, 10**6]), cfg.layout, cfg.frame_spacing)
    world.save(out / "world.json")
    world = world_for_traversal(world, cfg.changes, 0)
    inits = []
    for f, gt in enumerate(traj):
        frame = synthesize_frame(world, gt, cfg.noise, frame_rng(cfg.seed, 0, f), index=f)
        inits.append(frame.init_pose)
        _write_json(
            out / "frames" / f"f{f:04d}.json",
            {"index": f, "pose": list(frame.init_pose.as_array()), "gt_pose": list(gt.as_array()), "observation": frame.obs.to_dict()},
        )
    _write_json(out / "trajectory.json", {"poses": _poses_json(traj)})
    _write_json(out / "init_trajectory.json", {"poses": _poses_json(inits)})
    _write_trajectory_csv(out / "trajectory.csv", traj)
    _write_trajectory_csv(out / "init_trajectory.csv", inits)
    log.info("wrote %d frames to %s", len(traj), out)
    return 0


def cmd_run_cycles(args) -> int:
    cfg = load_run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    repo = MapRepository(out / "store")
    region = cfg.scenario_name
    if repo.head(region):
        raise ConfigError(f"{out / 'store'} already holds region {region!r}")
    results = run_cycles(cfg, repo, region)
    rows = [r.row(region) for r in results]
    write_report_csv(rows, out / "metrics.csv")
    write_report_json(rows, out / "metrics.json")
    results[-1].world.save(out / "world.json")
    results[-1].fused.save(out / "final_map.json")
    run = {"region": region, "final_version": results[-1].fused.version, "cycles": []}
    for r in results:
        solved = [f for f in r.frames if f.est_pose is not None]
        run["cycles"].append(
            {
                "cycle": r.cycle,
                "map": r.score.map_mean,
                "gt": _poses_json(f.gt_pose for f in solved),
                "est": _poses_json(f.est_pose for f in solved),
            }
        )
    _write_json(out / "run.json", run)
    log.info("final map version %d", results[-1].fused.version)
    return 0


def _read_frame(path):
    data = json.loads(Path(path).read_text())
    return Pose2.from_array(data["pose"]), VectorMap.from_dict(data["observation"])


def cmd_localize(args) -> int:
    prior = VectorMap.load(args.prior)
    cfg = load_run_config(args)
    init, obs = _read_frame(args.frame)
    _, report = localize_frame(obs, prior, init, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(
        out / "pose.json",
        {
            "pose": list(report.pose.as_array()),
            "iterations": report.iterations,
            "converged": report.converged,
            "final_cost": report.final_cost,
        },
    )
    return 0


def cmd_fuse(args) -> int:
    cfg = load_run_config(args)
    prior = VectorMap.load(args.prior) if args.prior else VectorMap((), version=0, frame="world")
    batch = ObservationBatch(traversal_id=0)
    for f, path in enumerate(sorted(Path(args.frames).glob("*.json"))):
        pose, obs = _read_frame(path)
        result = None
        if len(prior):
            result = associate(obs, prior, pose, cfg.association)
            if args.localize:
                try:
                    result, report = localize_frame(obs, prior, pose, cfg)
                    pose = report.pose
                    result = associate(obs, prior, pose, cfg.association)
                except LocalizationError as exc:
                    log.warning("%s skipped: %s", path.name, exc)
                    continue
        batch.frames.append(FrameRecord(obs, pose, result, 0, f))
    fused = crowdsource_update(prior, batch, replace(cfg.fusion, use_uncertainty=cfg.use_uncertainty))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fused.save(out / f"map_v{fused.version}.json")
    return 0


def cmd_evaluate(args) -> int:
    pred = VectorMap.load(args.pred)
    gt = VectorMap.load(args.gt)
    loc = None
    if args.traj_est or args.traj_gt:
        if not (args.traj_est and args.traj_gt):
            raise ConfigError("--traj-est and --traj-gt must be given together")
        est, ref = _read_poses(args.traj_est), _read_poses(args.traj_gt)
        if len(est) != len(ref):
            raise ValueError(f"trajectory length mismatch: {len(est)} estimated vs {len(ref)} ground truth")
        loc = loc_stats(est, ref)
    row = report_row(args.scenario, args.cycle, mean_ap(pred, gt), None, loc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report_csv([row], out / "metrics.csv")
    write_report_json([row], out / "metrics.json")
    return 0


def cmd_plot(args) -> int:
    run_dir = Path(args.run)
    needed = [run_dir / n for n in ("world.json", "final_map.json", "run.json")]
    missing = [str(p) for p in needed if not p.exists()]
    if missing:
        raise FileNotFoundError(f"missing run artifacts: {', '.join(missing)}")
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    world, fused = VectorMap.load(needed[0]), VectorMap.load(needed[1])
    run = json.loads(needed[2].read_text())
    plotting.plot_map_overlay(world, fused, out / "map_overlay.svg", title=f"{run['region']} v{fused.version}")
    errors = {}
    for c in run["cycles"]:
        gt = [Pose2.from_array(p) for p in c["gt"]]
        est = [Pose2.from_array(p) for p in c["est"]]
        errors[c["cycle"]] = [abs((g.rotation.T @ (e.translation - g.translation))[1]) for e, g in zip(est, gt)]
    plotting.plot_trajectory_errors(errors, out / "trajectory_error.svg")
    maps = [math.nan if c["map"] is None else c["map"] for c in run["cycles"]]
    plotting.plot_map_curve([c["cycle"] for c in run["cycles"]], maps, out / "map_curve.svg")
    return 0


def cmd_assoc_dump(args) -> int:
    cfg = load_run_config(args)
    prior = VectorMap.load(args.prior)
    pose, obs = _read_frame(args.frame)
    result = associate(obs, prior, pose, cfg.association)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "association.json", result.to_dict())
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (JSON or key = value lines)")
    common.add_argument("--seed", type=int)
    common.add_argument("--no-uncertainty", action="store_true", help="treat all vertex scales as equal")
    common.add_argument("--cycles", type=int)
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="crowdmap", description="Probabilistic crowdsourced vector map toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate a scenario and per-frame observations")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run-cycles", parents=[common], help="closed-loop multi-cycle run with metrics")
    p.set_defaults(func=cmd_run_cycles)

    p = sub.add_parser("localize", parents=[common], help="solve one frame against a prior map")
    p.add_argument("--prior", required=True)
    p.add_argument("--frame", required=True)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("fuse", parents=[common], help="fuse a directory of frames into the next map version")
    p.add_argument("--prior")
    p.add_argument("--frames", required=True)
    p.add_argument("--localize", action="store_true", help="refine frame poses against the prior first")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("evaluate", parents=[common], help="score a map (and optionally a trajectory)")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--traj-est")
    p.add_argument("--traj-gt")
    p.add_argument("--scenario", default="eval")
    p.add_argument("--cycle", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", parents=[common], help="render SVG figures for a run directory")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("assoc", help="association utilities")
    asub = p.add_subparsers(dest="assoc_command", required=True)
    d = asub.add_parser("dump", parents=[common], help="write the association of one frame as JSON")
    d.add_argument("--prior", required=True)
    d.add_argument("--frame", required=True)
    d.set_defaults(func=cmd_assoc_dump)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 1
    except (StoreError, LocalizationError, OSError, ValueError, KeyError, csv.Error) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
