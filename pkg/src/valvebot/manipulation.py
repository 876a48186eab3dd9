"""Keyframe motion primitives and the gravity-assisted wrench insertion plan.

Primitives are designed once relative to a nominal panel pose; Cartesian keyframes are
moved rigidly to the perceived panel pose before interpolation. Joint keyframes stay put.
Kinematics and collision checking are out of scope: trajectories are emitted in joint
space or as end-effector poses.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .errors import InvalidInput, InvalidKeyframe
from .geometry import Pose3, rpy_from_matrix

ARM = "arm"
GRIPPER = "gripper"
JOINT = "joint"
CARTESIAN = "cartesian"

# arm limits quoted for the manipulator: joint speed and end-effector speed
JOINT_SPEED = 2.0
CARTESIAN_SPEED = 1.3


@dataclass(frozen=True)
class Keyframe:
    group: str
    space: str
    target: object  # tuple of joint values, or Pose3 for Cartesian keyframes
    reference_frame: str = None
    max_speed: float = JOINT_SPEED
    max_angular_speed: float = None  # rad/s for Cartesian orientation; None couples it to translation
    label: str = ""

    def __post_init__(self):
        if self.group not in (ARM, GRIPPER):
            raise InvalidKeyframe(f"unknown group {self.group!r}")
        if self.space not in (JOINT, CARTESIAN):
            raise InvalidKeyframe(f"unknown space {self.space!r}")
        if not self.max_speed > 0:
            raise InvalidKeyframe("max_speed must be positive")
        if self.max_angular_speed is not None and not self.max_angular_speed > 0:
            raise InvalidKeyframe("max_angular_speed must be positive")
        if self.space == CARTESIAN:
            if not isinstance(self.target, Pose3):
                raise InvalidKeyframe("Cartesian keyframes need a Pose3 target")
            if not self.reference_frame:
                raise InvalidKeyframe("Cartesian keyframes need a reference frame")
        else:
            object.__setattr__(self, "target", tuple(float(v) for v in np.atleast_1d(self.target)))


@dataclass(frozen=True)
class MotionPrimitive:
    name: str
    keyframes: tuple
    reference_pose: Pose3 = Pose3()

    def __post_init__(self):
        if len(self.keyframes) == 0:
            raise InvalidKeyframe("a primitive needs at least one keyframe")
        object.__setattr__(self, "keyframes", tuple(self.keyframes))


def adapt_primitive(p: MotionPrimitive, perceived: Pose3) -> MotionPrimitive:
    """Move every Cartesian keyframe by ``perceived * reference^-1``."""
    T = perceived.matrix() @ np.linalg.inv(p.reference_pose.matrix())
    out = []
    for k in p.keyframes:
        if k.space == CARTESIAN:
            k = Keyframe(k.group, k.space, Pose3.from_matrix(T @ k.target.matrix()), k.reference_frame,
                         k.max_speed, k.max_angular_speed, k.label)
        out.append(k)
    return MotionPrimitive(p.name, tuple(out), perceived)


@dataclass
class ArmState:
    joints: tuple = (0.0,) * 6
    pose: Pose3 = Pose3()
    gripper: float = 0.0


@dataclass(frozen=True)
class TrajectoryPoint:
    t: float
    group: str
    space: str
    value: tuple  # joint values (the gripper has one) or (x, y, z, roll, pitch, yaw)
    keyframe: int


def _segment_duration(k: Keyframe, start, end):
    if k.space == JOINT:
        d = float(np.max(np.abs(np.subtract(end, start)))) if len(end) else 0.0
        return d / k.max_speed, d > 0
    dist = float(np.linalg.norm(end.translation - start.translation))
    rot = Rotation.from_matrix(start.rotation()).inv() * Rotation.from_matrix(end.rotation())
    ang = float(rot.magnitude())
    dur = dist / k.max_speed
    if k.max_angular_speed is not None:
        dur = max(dur, ang / k.max_angular_speed)
    return dur, dist > 0 or ang > 1e-12


def interpolate(p: MotionPrimitive, current: ArmState, dt=0.02):
    """Time-parameterised samples through the primitive's keyframes.

    Each keyframe is reached by a straight line in its own space at the keyframe's speed
    limit; Cartesian keyframes slerp the orientation. Samples fall every ``dt`` and each
    segment ends exactly on its target. Segments too short to advance the clock emit no
    samples.

    :raises InvalidKeyframe: for a segment that must move in zero time
    """
    if dt <= 0:
        raise InvalidInput("dt must be positive")
    state = ArmState(tuple(current.joints), current.pose, current.gripper)
    t = 0.0
    out = []
    for idx, k in enumerate(p.keyframes):
        if k.group == GRIPPER:
            start, end = (state.gripper,), k.target[:1]
        elif k.space == JOINT:
            start, end = state.joints, k.target
            if len(start) != len(end):
                raise InvalidKeyframe(f"keyframe {idx} has {len(end)} joints, state has {len(start)}")
        else:
            start, end = state.pose, k.target
        dur, moves = _segment_duration(k, start, end)
        if not moves:
            _advance(state, k, end)
            continue
        if dur <= 0:
            raise InvalidKeyframe(f"keyframe {idx} needs a rotation but has no angular speed limit")
        if t + dur == t:
            # a move below the clock's resolution; treat the target as reached
            _advance(state, k, end)
            continue
        n = max(1, int(math.ceil(dur / dt - 1e-9)))
        if k.space == CARTESIAN:
            slerp = Slerp([0.0, 1.0], Rotation.from_matrix(np.stack([start.rotation(), end.rotation()])))
        for i in range(1, n + 1):
            s = min(1.0, i * dt / dur)
            ti = t + min(i * dt, dur)
            if i == n:
                s, ti = 1.0, t + dur
            if k.space == CARTESIAN:
                if s == 1.0:
                    val = end.as_tuple()
                else:
                    pos = (1 - s) * start.translation + s * end.translation
                    rpy = rpy_from_matrix(slerp([s]).as_matrix()[0])
                    val = tuple(float(v) for v in pos) + tuple(float(v) for v in rpy)
            else:
                val = tuple(end) if s == 1.0 else tuple(float(a + s * (b - a)) for a, b in zip(start, end))
            out.append(TrajectoryPoint(ti, k.group, k.space, val, idx))
        t += dur
        _advance(state, k, end)
    return out


def _advance(state, k, end):
    if k.group == GRIPPER:
        state.gripper = end[0]
    elif k.space == JOINT:
        state.joints = tuple(end)
    else:
        state.pose = end


# -- library files -----------------------------------------------------------------


def _kf_to_dict(k: Keyframe):
    target = list(k.target.as_tuple()) if k.space == CARTESIAN else list(k.target)
    return {"group": k.group, "space": k.space, "target": target, "reference_frame": k.reference_frame,
            "max_speed": k.max_speed, "max_angular_speed": k.max_angular_speed, "label": k.label}


def _kf_from_dict(d):
    target = Pose3(*d["target"]) if d["space"] == CARTESIAN else tuple(d["target"])
    return Keyframe(d["group"], d["space"], target, d.get("reference_frame"), d["max_speed"],
                    d.get("max_angular_speed"), d.get("label", ""))


def library_to_dict(primitives):
    return {"format": "valvebot.motion_library", "primitives": [
        {"name": p.name, "reference_pose": list(p.reference_pose.as_tuple()),
         "keyframes": [_kf_to_dict(k) for k in p.keyframes]} for p in primitives]}


def library_from_dict(d):
    if d.get("format") != "valvebot.motion_library":
        raise InvalidInput("not a motion library document")
    return {p["name"]: MotionPrimitive(p["name"], tuple(_kf_from_dict(k) for k in p["keyframes"]),
                                       Pose3(*p["reference_pose"])) for p in d["primitives"]}


def save_library(primitives, path):
    with open(path, "w") as f:
        json.dump(library_to_dict(primitives), f, indent=1)


def load_library(path):
    with open(path) as f:
        return library_from_dict(json.load(f))


def default_library():
    """Primitives used by the mission, designed against a panel at the origin facing +x."""
    ref = Pose3()
    down = math.pi / 2  # end-effector pitched to look at the panel face
    fold = (0.0, -2.2, 2.4, -1.8, -1.57, 0.0)
    unfold = (0.0, -1.2, 1.5, -1.9, -1.57, 0.0)
    capture = MotionPrimitive("capture_wrenches", (
        Keyframe(ARM, JOINT, fold, label="folded"),
        Keyframe(ARM, JOINT, unfold, label="unfold"),
        Keyframe(ARM, CARTESIAN, Pose3(1.2, 0.0, 1.15, 0.0, down, math.pi), "panel", CARTESIAN_SPEED, 2.0,
                 "capture pose"),
    ), ref)
    grasp = MotionPrimitive("grasp_wrench", (
        Keyframe(GRIPPER, JOINT, (1.0,), max_speed=2.0, label="open"),
        Keyframe(ARM, CARTESIAN, Pose3(0.25, 0.0, 1.3, 0.0, down, math.pi), "wrench", CARTESIAN_SPEED, 2.0,
                 "pre-grasp"),
        Keyframe(ARM, CARTESIAN, Pose3(0.1, 0.0, 1.3, 0.0, down, math.pi), "wrench", 0.1, 0.5, "grasp"),
        Keyframe(GRIPPER, JOINT, (0.0,), max_speed=2.0, label="close"),
        Keyframe(ARM, CARTESIAN, Pose3(0.1, 0.0, 1.38, 0.0, down, math.pi), "wrench", 0.1, 0.5, "lift"),
        Keyframe(ARM, CARTESIAN, Pose3(0.35, 0.0, 1.38, 0.0, down, math.pi), "wrench", 0.3, 0.5, "retract"),
    ), ref)
    stem = MotionPrimitive("observe_stem", (
        Keyframe(ARM, CARTESIAN, Pose3(0.3, 0.0, 0.9, 0.0, down, math.pi), "panel", CARTESIAN_SPEED, 2.0,
                 "stem view"),
    ), ref)
    return [capture, grasp, stem]


# -- insertion -----------------------------------------------------------------------


QUARTER = math.pi / 2
TURN_ANGLE = -3 * math.pi  # clockwise one and a half revolutions


@dataclass(frozen=True)
class InsertionPlan:
    stem_angle: float
    insertable_angles: tuple
    approach_angle: float
    sweep: tuple = ((+1, QUARTER), (-1, -QUARTER))  # (direction, end angle)
    turn_angle: float = TURN_ANGLE
    steps: tuple = field(default=("approach", "open_gripper", "sweep_up", "sweep_down", "close_gripper", "turn"))


def insertable_angles(phi, eps=1e-9):
    """Wrench roll angles in the closed range [-90, 90] deg that seat on a square stem at ``phi``."""
    r = phi % QUARTER
    if r < eps or QUARTER - r < eps:
        return (-QUARTER, 0.0, QUARTER)
    return (r - QUARTER, r)


def insertion_plan(phi) -> InsertionPlan:
    """Approach 45 deg off the insertable angle nearest the hanging pose (0), then sweep.

    Ties (phi = 45 deg mod 90) go to the negative angle so the approach stays inside the sweep.
    """
    ins = insertable_angles(phi)
    a = min(ins, key=lambda x: (abs(x), x))
    return InsertionPlan(float(phi), tuple(float(v) for v in ins), a + math.pi / 4)
