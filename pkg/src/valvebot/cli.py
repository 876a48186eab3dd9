"""Command-line entry point ``mission``.

Every subcommand exits 0 iff everything it was asked to do succeeded.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys

from .errors import ValvebotError


def _pose(values):
    x, y, yaw = values
    return float(x), float(y), math.radians(float(yaw))


def cmd_run(args):
    from .mission import load_scenario, run_mission, write_mission_outputs
    from dataclasses import replace

    sc = load_scenario(args.scenario)
    if args.seed is not None:
        sc = replace(sc, seed=args.seed)
    report = run_mission(sc)
    print(report.table())
    if args.out:
        for path in write_mission_outputs(report, args.out).values():
            print(f"wrote {path}")
    return 0 if report.success else 1


def cmd_scenario(args):
    from .mission import default_scenario_dict

    d = default_scenario_dict(args.distance, not args.no_panel, args.seed or 0)
    text = json.dumps(d, indent=1) + "\n"
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_simulate_scan(args):
    from .geometry import Pose3
    from .scansim import LidarModel, load_scene, raycast_scan, write_scan

    x, y, yaw = _pose(args.pose)
    scan = raycast_scan(load_scene(args.scene), Pose3(x, y, args.height, 0.0, 0.0, yaw),
                        LidarModel(range_noise_sigma=args.noise), args.seed or 0)
    write_scan(scan, args.out)
    print(f"wrote {args.out}: {len(scan.rings)} rings")
    return 0


def cmd_detect(args):
    from .detector import DetectorParams, clusters_to_dict, detect_scan
    from .scansim import read_scan

    clusters = detect_scan(read_scan(args.scan), DetectorParams())
    print(f"{'#':>3} {'x':>8} {'y':>8} {'z':>6} {'points':>6}")
    for i, c in enumerate(clusters):
        print(f"{i:>3} {c.centroid[0]:8.3f} {c.centroid[1]:8.3f} {c.centroid[2]:6.3f} {len(c.points):>6}")
    if args.out:
        with open(args.out, "w") as f:
            json.dump(clusters_to_dict(clusters), f, indent=1)
    return 0 if clusters else 1


def cmd_register(args):
    from .detector import DetectorParams, closest_cluster, detect_scan, gather_points
    from .registration import PanelModel, register_panel
    from .scansim import read_scan

    scan = read_scan(args.scan)
    if args.near is not None:
        centre = tuple(args.near)
    else:
        clusters = detect_scan(scan, DetectorParams())
        if not clusters:
            print("no panel candidate found", file=sys.stderr)
            return 1
        sp = scan.sensor_pose
        centre = tuple(closest_cluster(clusters, (sp.x, sp.y)).centroid[:2])
    pts = gather_points(scan, centre, args.radius)
    pose = register_panel(PanelModel.from_geometry(), pts, scan.sensor_pose)
    out = {"x": pose.x, "y": pose.y, "yaw_deg": math.degrees(pose.yaw), "score": pose.score}
    print(json.dumps(out))
    if args.out:
        with open(args.out, "w") as f:
            json.dump(out, f, indent=1)
    return 0


def cmd_approach(args):
    from .approach import approach_scenario, simulate_approach
    from .mission import derive_seed, export_trajectory

    scene, start, wps = approach_scenario(args.distance, behind=not args.front)
    run = simulate_approach(scene, start, wps, seed=derive_seed(args.seed or 0, "approach"), t_max=args.t_max)
    for label, t in run.phase_times.items():
        print(f"{label:<14} {t:8.2f} s")
    print(f"outcome: {run.outcome}{' (' + run.reason + ')' if run.reason else ''}")
    if args.out:
        export_trajectory(run, args.out)
        print(f"wrote {args.out}")
    return 0 if run.outcome == "success" else 1


def cmd_robustness(args):
    from .mission import robustness_csv, run_robustness

    rows = run_robustness(args.kind, args.grid, args.repeats, args.seed or 0, workers=args.workers)
    text = robustness_csv(args.kind, rows)
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w", newline="") as f:
            f.write(text)
    return 0


def cmd_plan_insertion(args):
    from .manipulation import insertion_plan

    plan = insertion_plan(math.radians(args.phi))
    out = {"stem_angle_deg": args.phi,
           "insertable_deg": [round(math.degrees(a), 9) for a in plan.insertable_angles],
           "approach_deg": round(math.degrees(plan.approach_angle), 9),
           "sweep": [{"direction": d, "end_deg": round(math.degrees(e), 9)} for d, e in plan.sweep],
           "turn_deg": round(math.degrees(plan.turn_angle), 9),
           "steps": list(plan.steps)}
    text = json.dumps(out, indent=1) + "\n"
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    return 0


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="global seed (overrides the scenario's)")
    common.add_argument("--out", default=None, help="output file or directory")

    p = argparse.ArgumentParser(prog="mission", description="Autonomous valve-turning mission simulator")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("run", parents=[common], help="run a full mission scenario")
    s.add_argument("scenario")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("scenario", parents=[common], help="write the default scenario file")
    s.add_argument("--distance", type=float, default=50.0)
    s.add_argument("--no-panel", action="store_true")
    s.set_defaults(func=cmd_scenario)

    s = sub.add_parser("simulate-scan", parents=[common], help="ray-cast one LiDAR scan of a scene")
    s.add_argument("scene")
    s.add_argument("--pose", nargs=3, type=float, default=(0.0, 0.0, 0.0), metavar=("X", "Y", "YAW_DEG"))
    s.add_argument("--height", type=float, default=0.9)
    s.add_argument("--noise", type=float, default=0.01)
    s.set_defaults(func=cmd_simulate_scan)

    s = sub.add_parser("detect", parents=[common], help="detect panel candidates in a scan file")
    s.add_argument("scan")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("register", parents=[common], help="register the panel model in a scan file")
    s.add_argument("scan")
    s.add_argument("--near", nargs=2, type=float, default=None, metavar=("X", "Y"))
    s.add_argument("--radius", type=float, default=1.2)
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("approach", parents=[common], help="simulate the panel approach")
    s.add_argument("--distance", type=float, default=50.0)
    s.add_argument("--front", action="store_true", help="start in front of the panel instead of behind")
    s.add_argument("--t-max", type=float, default=120.0)
    s.set_defaults(func=cmd_approach)

    for name, kinds, default, helptext in (
            ("valve-robustness", ("valve-dropout", "valve-noise"), "valve-dropout", "valve perception sweep"),
            ("robustness", ("valve-dropout", "valve-noise", "wrench-jitter"), None, "any robustness sweep")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--kind", choices=kinds, default=default, required=default is None)
        s.add_argument("--grid", nargs="*", type=float, required=True,
                       help="values to sweep, in the unit of --kind (see README)")
        s.add_argument("--repeats", type=int, default=5)
        s.add_argument("--workers", type=int, default=1)
        s.set_defaults(func=cmd_robustness)

    s = sub.add_parser("plan-insertion", parents=[common], help="print the insertion plan for a stem angle")
    s.add_argument("--phi", type=float, required=True, help="stem angle in degrees")
    s.set_defaults(func=cmd_plan_insertion)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.out and args.command != "run":
        parent = os.path.dirname(os.path.abspath(args.out))
        os.makedirs(parent, exist_ok=True)
    try:
        return args.func(args)
    except (ValvebotError, OSError) as e:
        print(f"mission {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
