"""End-to-end mission runner with trajectory export and robustness sweeps.

A scenario fixes the scene, waypoints, module parameters and one global seed. Every
module draws from its own seed derived from that global seed and a fixed label, so
re-running a scenario reproduces every artifact byte for byte. Simulated durations form
the report; wall-clock compute times are kept in a separate table because they are not
reproducible.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .approach import (
    ApproachRun, BaseState, ControllerParams, PerceptionConfig, TrajectorySample, simulate_approach,
)
from .detector import DetectorParams
from .errors import (
    DegenerateGeometry, InsufficientDetections, InvalidInput, RegionMissing, SelectionFailed, TipsNotFound,
    UsageError,
)
from .geometry import Pose2, Pose3
from .manipulation import (
    ARM, GRIPPER, JOINT, ArmState, Keyframe, MotionPrimitive, adapt_primitive, default_library, insertion_plan,
    interpolate,
)
from .registration import RegistrationParams
from .scansim import FrameSpec, PanelGeometry, Scene, load_scene, scene_from_dict, scene_to_dict
from .valve import ValvePerceptParams, ValveRig, perceive_valve, robustness_trial, synthetic_valve_frames
from .wrench import (
    DEFAULT_LENGTHS, WrenchScene, capture_camera, locate_wrench, selection_trial, stereo_agree, synth_detections,
)

PHASES = ("Navigate", "ApproachPanel", "CyclePanel", "ArrivePanel", "SeeWrenches", "SelectWrench", "GraspWrench",
          "SeeValve", "DetectValve", "ContactValve", "InsertWrench", "TurnValve")
# approach simulator labels -> report phases
_APPROACH_PHASES = {"Navigate": "Navigate", "ApproachPanel": "ApproachPanel", "Circle": "CyclePanel",
                    "LocalApproach": "ArrivePanel"}


def derive_seed(seed, label):
    """Independent 32-bit seed for sub-experiment ``label`` under global ``seed``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(label.encode())])
    return int(ss.generate_state(1)[0])


# -- scenario ------------------------------------------------------------------------


@dataclass(frozen=True)
class MissionTiming:
    """Durations of steps that are not simulated. Grasp and contact are arm stubs."""

    grasp: float = 11.6
    contact: float = 5.6
    capture: float = 1.0  # camera settle and exposure per view
    select_compute: float = 2.5
    detect_compute: float = 0.7
    sweep_speed: float = 0.25  # rad/s wrist roll while sweeping for the insertion angle
    turn_speed: float = 2.0  # rad/s wrist roll while turning


@dataclass(frozen=True)
class WrenchConfig:
    lengths: tuple = DEFAULT_LENGTHS
    layout: tuple = (2, 0, 4, 1, 5, 3)  # left-to-right order of ``lengths`` on the panel
    target_index: int = 3
    spacing: float = 0.08
    jitter_px: float = 0.5 * 3500 / 100 / 3
    baseline: float = 0.1
    distance: float = 1.0

    def __post_init__(self):
        if sorted(self.layout) != list(range(len(self.lengths))):
            raise InvalidInput("layout must be a permutation of the wrench indices")
        if not 0 <= self.target_index < len(self.lengths):
            raise InvalidInput("target_index out of range")


@dataclass(frozen=True)
class Scenario:
    scene: Scene
    start: tuple = (-50.0, 0.0, 0.0)  # x, y, yaw
    waypoints: tuple = ((0.0, 0.0),)
    controller: ControllerParams = ControllerParams()
    perception: PerceptionConfig = PerceptionConfig()
    valve: ValvePerceptParams = ValvePerceptParams()
    wrench: WrenchConfig = WrenchConfig()
    stem_roll_deg: float = 20.0
    timing: MissionTiming = MissionTiming()
    seed: int = 0
    t_max: float = 120.0
    name: str = "scenario"


def _override(obj, d, what):
    if not d:
        return obj
    names = {f.name for f in fields(obj)}
    unknown = set(d) - names
    if unknown:
        raise InvalidInput(f"unknown {what} parameter(s): {', '.join(sorted(unknown))}")
    return replace(obj, **{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def scenario_from_dict(d, base_dir="."):
    """Build a scenario; ``scene`` is an inline scene document or a path relative to ``base_dir``."""
    if "scene" not in d:
        raise InvalidInput("scenario needs a scene")
    if "seed" not in d:
        raise InvalidInput("scenario needs a seed")
    sc = d["scene"]
    scene = load_scene(os.path.join(base_dir, sc)) if isinstance(sc, str) else scene_from_dict(sc)
    perception = PerceptionConfig()
    pd = dict(d.get("perception", {}))
    det = _override(DetectorParams(), pd.pop("detector", None), "detector")
    reg = _override(RegistrationParams(), pd.pop("registration", None), "registration")
    perception = _override(replace(perception, detector=det, registration=reg), pd, "perception")
    wp = tuple(tuple(float(v) for v in w) for w in d.get("waypoints", [(0.0, 0.0)]))
    return Scenario(
        scene=scene,
        start=tuple(float(v) for v in d.get("start", (-50.0, 0.0, 0.0))),
        waypoints=wp,
        controller=_override(ControllerParams(), d.get("controller"), "controller"),
        perception=perception,
        valve=_override(ValvePerceptParams(), d.get("valve"), "valve"),
        wrench=_override(WrenchConfig(), d.get("wrench"), "wrench"),
        stem_roll_deg=float(d.get("stem_roll_deg", 20.0)),
        timing=_override(MissionTiming(), d.get("timing"), "timing"),
        seed=int(d["seed"]),
        t_max=float(d.get("t_max", 120.0)),
        name=str(d.get("name", "scenario")),
    )


def load_scenario(path):
    with open(path) as f:
        d = json.load(f)
    return scenario_from_dict(d, os.path.dirname(os.path.abspath(path)))


def default_scenario_dict(distance=50.0, panel=True, seed=0):
    """The reference mission: panel at the origin facing +x, robot ``distance`` m behind it."""
    boxes = PanelGeometry().boxes_at(0.0, 0.0, 0.0) if panel else []
    d = {"name": f"{'' if panel else 'no-panel-'}{distance:g}m", "scene": scene_to_dict(Scene(tuple(boxes))),
         "start": [-distance, 0.0, 0.0], "waypoints": [[0.0, 0.0]], "seed": seed}
    if not panel:
        # a short search pattern around the expected position
        d["waypoints"] = [[-10.0, 0.0], [0.0, 10.0], [10.0, 0.0]]
    return d


# -- report --------------------------------------------------------------------------


@dataclass
class PhaseResult:
    name: str
    duration: float  # simulated seconds
    outcome: str  # success | failure | skipped
    reason: str = ""
    wall: float = 0.0  # compute seconds, excluded from the reproducible report


@dataclass
class MissionReport:
    scenario: str
    seed: int
    phases: list
    details: dict = field(default_factory=dict)
    approach: ApproachRun = None

    @property
    def total(self):
        return sum(p.duration for p in self.phases)

    @property
    def success(self):
        return all(p.outcome == "success" for p in self.phases)

    def to_dict(self):
        return {"scenario": self.scenario, "seed": self.seed, "success": self.success,
                "total_s": round(self.total, 6),
                "phases": [{"name": p.name, "sim_time_s": round(p.duration, 6), "outcome": p.outcome,
                            "reason": p.reason} for p in self.phases],
                "details": self.details}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["phase", "sim_time_s", "outcome", "reason"])
        for p in self.phases:
            w.writerow([p.name, f"{p.duration:.6f}", p.outcome, p.reason])
        w.writerow(["total", f"{self.total:.6f}", "success" if self.success else "failure", ""])
        return buf.getvalue()

    def wall_clock_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["phase", "sim_time_s", "wall_clock_s"])
        for p in self.phases:
            w.writerow([p.name, f"{p.duration:.6f}", f"{p.wall:.6f}"])
        return buf.getvalue()

    def table(self):
        lines = [f"{'phase':<14} {'sim [s]':>9}  outcome"]
        for p in self.phases:
            lines.append(f"{p.name:<14} {p.duration:9.2f}  {p.outcome}{': ' + p.reason if p.reason else ''}")
        lines.append(f"{'total':<14} {self.total:9.2f}  {'success' if self.success else 'failure'}")
        return "\n".join(lines)


def _approach_phases(run: ApproachRun):
    starts = sorted(((t, lab) for lab, t in run.phase_times.items() if lab in _APPROACH_PHASES), key=lambda x: x[0])
    end = run.samples[-1].t
    t0 = run.samples[0].t
    durations = {name: 0.0 for name in _APPROACH_PHASES.values()}
    bounds = [t for t, _ in starts[1:]] + [run.phase_times.get("Arrived", end)]
    for (t, lab), t_next in zip(starts, bounds):
        durations[_APPROACH_PHASES[lab]] = t_next - t
    durations["Navigate"] += starts[0][0] - t0 if starts else 0.0
    out = []
    reached = {_APPROACH_PHASES[lab] for _, lab in starts}
    last = _APPROACH_PHASES[starts[-1][1]] if starts else "Navigate"
    for name in ("Navigate", "ApproachPanel", "CyclePanel", "ArrivePanel"):
        if run.outcome == "success":
            # a phase can be skipped by the state machine, e.g. no separate approach run
            out.append(PhaseResult(name, durations[name], "success"))
        elif name == last:
            out.append(PhaseResult(name, durations[name], "failure", run.reason))
        elif name in reached:
            out.append(PhaseResult(name, durations[name], "success"))
        else:
            out.append(PhaseResult(name, 0.0, "skipped", "earlier phase failed"))
    return out


def _duration(prim, state, dt=0.02):
    tr = interpolate(prim, state, dt)
    return (tr[-1].t if tr else 0.0), tr


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


def run_mission(scenario: Scenario) -> MissionReport:
    """Run every phase in order; a failing phase is reported and the rest are skipped."""
    seed = scenario.seed
    phases = []
    details = {}
    sx, sy, syaw = scenario.start
    waypoints = [Pose2(x, y, 0.0) for x, y in scenario.waypoints]
    run, wall = _timed(lambda: simulate_approach(
        scenario.scene, BaseState(sx, sy, syaw), waypoints, scenario.controller, scenario.perception,
        derive_seed(seed, "approach"), t_max=scenario.t_max))
    loco = _approach_phases(run)
    for p in loco:
        p.wall = wall * (p.duration / max(run.samples[-1].t - run.samples[0].t, 1e-9))
    phases.extend(loco)
    details["approach"] = {"outcome": run.outcome, "reason": run.reason,
                           "final_pose": [round(float(v), 6) for v in (run.final_state.x, run.final_state.y,
                                                                 run.final_state.yaw)]}
    if run.panel_estimate is not None:
        pe = run.panel_estimate
        details["panel_estimate"] = [round(float(v), 6) for v in (pe.x, pe.y, pe.yaw)]

    timing = scenario.timing
    state = {"ok": run.outcome == "success"}

    def phase(name, fn):
        if not state["ok"]:
            phases.append(PhaseResult(name, 0.0, "skipped", "earlier phase failed"))
            return None
        t0 = time.perf_counter()
        try:
            duration, info = fn()
        except _PhaseFailure as e:
            state["ok"] = False
            phases.append(PhaseResult(name, e.duration, "failure", str(e), time.perf_counter() - t0))
            return None
        phases.append(PhaseResult(name, duration, "success", "", time.perf_counter() - t0))
        return info

    lib = {p.name: p for p in default_library()}
    panel_pose = run.panel_estimate.pose3() if run.panel_estimate is not None else Pose3()
    f = run.final_state
    home = ArmState(lib["capture_wrenches"].keyframes[0].target,
                    Pose3(f.x, f.y, 1.0, 0.0, 0.0, f.yaw).compose(Pose3(0.3, 0.0, 0.0)), 0.0)
    arm = {"state": home}

    def move(prim):
        dur, tr = _duration(adapt_primitive(prim, panel_pose), arm["state"])
        s = arm["state"]
        for pt in tr:
            if pt.group == GRIPPER:
                s = replace(s, gripper=pt.value[0])
            elif pt.space == JOINT:
                s = replace(s, joints=pt.value)
            else:
                s = replace(s, pose=Pose3(*pt.value))
        arm["state"] = s
        return dur

    wcfg = scenario.wrench
    wscene = WrenchScene([(float(wcfg.lengths[k]), float((i - 0.5 * (len(wcfg.layout) - 1)) * wcfg.spacing))
                          for i, k in enumerate(wcfg.layout)])
    views = {}

    def see_wrenches():
        dur = move(lib["capture_wrenches"]) + 2 * timing.capture
        rng = np.random.default_rng(derive_seed(seed, "wrench"))
        for side, lateral in (("left", -0.5 * wcfg.baseline), ("right", 0.5 * wcfg.baseline)):
            cam = capture_camera(wscene, wcfg.distance, lateral)
            views[side] = (cam, synth_detections(wscene, cam, wcfg.jitter_px, int(rng.integers(2**31))))
        return dur, None

    def select():
        pts = []
        for side in ("left", "right"):
            cam, (heads, mouths, image) = views[side]
            try:
                _, pt = locate_wrench(heads, mouths, image, wscene.panel, cam, wcfg.lengths, wcfg.target_index)
            except (SelectionFailed, InsufficientDetections) as e:
                raise _PhaseFailure(f"{side}: {e}", timing.select_compute)
            pts.append(pt)
        mean = stereo_agree(pts[0], pts[1])
        if mean is None:
            raise _PhaseFailure("stereo views disagree", timing.select_compute)
        heads_true = wscene.endpoints()[:, 0]
        truth_idx = list(wcfg.layout).index(wcfg.target_index)
        details["wrench"] = {"grasp_point": [round(float(v), 6) for v in mean],
                             "grasp_error_m": round(float(np.linalg.norm(mean - heads_true[truth_idx])), 6),
                             "slot": int(np.argmin(np.linalg.norm(heads_true - mean, axis=1))),
                             "target_slot": truth_idx}
        return timing.select_compute, mean

    def see_valve():
        return move(lib["observe_stem"]) + timing.capture, None

    def detect_valve():
        rig = ValveRig(stem_roll=math.radians(scenario.stem_roll_deg))
        frame = rig.render(FrameSpec(), seed=derive_seed(seed, "valve"))
        try:
            stem, tips = perceive_valve(frame, scenario.valve)
        except (RegionMissing, TipsNotFound, DegenerateGeometry) as e:
            raise _PhaseFailure(str(e), timing.detect_compute)
        err = float(np.linalg.norm(np.subtract(stem.position, rig.truth().position)))
        details["valve"] = {"stem_angle_deg": round(math.degrees(stem.angle), 6),
                            "stem_width_m": round(stem.width, 6), "position_error_m": round(err, 6)}
        return timing.detect_compute, stem

    def insert(stem):
        plan = insertion_plan(stem.angle)
        details["insertion"] = {"insertable_deg": [round(math.degrees(a), 6) for a in plan.insertable_angles],
                                "approach_deg": round(math.degrees(plan.approach_angle), 6),
                                "steps": list(plan.steps)}
        v = timing.sweep_speed
        prim = MotionPrimitive("insert", (
            Keyframe(ARM, JOINT, (plan.approach_angle,), max_speed=timing.turn_speed, label="approach"),
            Keyframe(GRIPPER, JOINT, (1.0,), max_speed=2.0, label="open_gripper"),
            *[Keyframe(ARM, JOINT, (end,), max_speed=v, label=f"sweep_{'up' if d > 0 else 'down'}")
              for d, end in plan.sweep],
            Keyframe(GRIPPER, JOINT, (0.0,), max_speed=2.0, label="close_gripper"),
        ))
        dur, _ = _duration(prim, ArmState(joints=(0.0,)))
        return dur, plan

    def turn(plan):
        prim = MotionPrimitive("turn", (Keyframe(ARM, JOINT, (plan.turn_angle,), max_speed=timing.turn_speed),))
        dur, _ = _duration(prim, ArmState(joints=(0.0,)))
        return dur, None

    phase("SeeWrenches", see_wrenches)
    phase("SelectWrench", select)
    phase("GraspWrench", lambda: (timing.grasp, None))
    phase("SeeValve", see_valve)
    stem = phase("DetectValve", detect_valve)
    phase("ContactValve", lambda: (timing.contact, None))
    plan = phase("InsertWrench", lambda: insert(stem))
    phase("TurnValve", lambda: turn(plan))
    return MissionReport(scenario.name, seed, phases, details, run)


class _PhaseFailure(Exception):
    def __init__(self, msg, duration=0.0):
        super().__init__(msg)
        self.duration = duration


def write_mission_outputs(report: MissionReport, out_dir):
    """Write report.json, report.csv, trajectory.csv (reproducible) and wall_clock.csv."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for name, text in (("report.json", report.to_json()), ("report.csv", report.to_csv()),
                       ("wall_clock.csv", report.wall_clock_csv())):
        paths[name] = os.path.join(out_dir, name)
        with open(paths[name], "w", newline="") as f:
            f.write(text)
    paths["trajectory.csv"] = os.path.join(out_dir, "trajectory.csv")
    export_trajectory(report.approach, paths["trajectory.csv"])
    return paths


# -- trajectory CSV ------------------------------------------------------------------

TRAJECTORY_HEADER = ["t", "x", "y", "yaw", "speed", "phase"]


def export_trajectory(run: ApproachRun, path):
    """One row per control step: the state after the step and the phase that commanded it.

    Floats are written with ``repr`` so a re-import is bit-exact.
    """
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TRAJECTORY_HEADER)
        for s in run.samples[1:]:
            w.writerow([repr(float(s.t)), repr(float(s.x)), repr(float(s.y)), repr(float(s.yaw)),
                        repr(float(s.speed)), s.phase])


def import_trajectory(path):
    with open(path, newline="") as f:
        r = csv.reader(f)
        if next(r) != TRAJECTORY_HEADER:
            raise InvalidInput(f"{path}: not a trajectory file")
        return [TrajectorySample(float(t), float(x), float(y), float(yaw), float(v), ph) for t, x, y, yaw, v, ph in r]


# -- robustness ----------------------------------------------------------------------

ROBUSTNESS_KINDS = ("valve-dropout", "valve-noise", "wrench-jitter")


def _robustness_point(args):
    kind, value, repeats, seed, n_frames = args
    if kind == "wrench-jitter":
        ok = 0
        for r in range(repeats):
            t = selection_trial(derive_seed(seed, f"wrench-{r}"), jitter=value)
            ok += t.correct and t.grasp_error <= 0.01
        return ok / repeats
    frames, truths = synthetic_valve_frames(n_frames)
    p, sigma = (value, 0.0) if kind == "valve-dropout" else (0.0, value)
    return robustness_trial(frames, truths, p, sigma, repeats, seed=derive_seed(seed, "valve"))


def run_robustness(kind, grid, repeats=5, seed=0, frames=4, workers=1):
    """Success rate at every grid value; returns [(value, rate)].

    ``valve-dropout`` grids are missing-pixel fractions, ``valve-noise`` grids depth sigmas
    in metres, ``wrench-jitter`` grids detection jitter in pixels. Every grid point uses
    the same seeds, so results do not depend on ``workers``.
    """
    if kind not in ROBUSTNESS_KINDS:
        raise UsageError(f"unknown robustness kind {kind!r}; choose from {', '.join(ROBUSTNESS_KINDS)}")
    grid = [float(v) for v in grid]
    if not grid:
        raise UsageError("robustness grid is empty")
    if repeats < 1:
        raise UsageError("repeats must be >= 1")
    jobs = [(kind, v, repeats, seed, frames) for v in grid]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            rates = list(ex.map(_robustness_point, jobs))
    else:
        rates = [_robustness_point(j) for j in jobs]
    return list(zip(grid, rates))


def robustness_csv(kind, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "param", "success_rate"])
    for v, r in rows:
        w.writerow([kind, repr(v), repr(float(r))])
    return buf.getvalue()
