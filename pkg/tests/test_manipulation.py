import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from valvebot.errors import InvalidInput, InvalidKeyframe
from valvebot.geometry import Pose3
from valvebot.manipulation import (
    ARM, CARTESIAN, GRIPPER, JOINT, ArmState, Keyframe, MotionPrimitive, TURN_ANGLE, adapt_primitive,
    default_library, insertable_angles, insertion_plan, interpolate, load_library, save_library,
)

poses = st.builds(Pose3, *[st.floats(-1, 1, allow_subnormal=False)] * 3,
                  *[st.floats(-3, 3, allow_subnormal=False)] * 3)


def cart(pose, speed=1.3, ang=2.0):
    return Keyframe(ARM, CARTESIAN, pose, "panel", speed, ang)


def rel_pose(panel, target):
    return np.linalg.inv(panel.matrix()) @ target.matrix()


# -- types ---------------------------------------------------------------------------


def test_keyframe_validation():
    with pytest.raises(InvalidKeyframe):
        Keyframe(ARM, JOINT, (0.0,), max_speed=0)
    with pytest.raises(InvalidKeyframe):
        Keyframe(ARM, CARTESIAN, Pose3(), None)
    with pytest.raises(InvalidKeyframe):
        Keyframe("leg", JOINT, (0.0,))
    with pytest.raises(InvalidKeyframe):
        MotionPrimitive("empty", ())


# -- adapt ---------------------------------------------------------------------------


def test_adapt_identity_and_joint_untouched():
    p = default_library()[0]
    assert adapt_primitive(p, p.reference_pose).keyframes == p.keyframes
    q = adapt_primitive(p, Pose3(0.1, 0, 0))
    for a, b in zip(p.keyframes, q.keyframes):
        if a.space == JOINT:
            assert a == b
        else:
            assert b.target.x == pytest.approx(a.target.x + 0.1, abs=1e-12)
            assert b.target.y == pytest.approx(a.target.y, abs=1e-12)


def test_adapt_yaw_rotates_targets():
    p = MotionPrimitive("m", [cart(Pose3(1.0, 0, 0.5))])
    q = adapt_primitive(p, Pose3(yaw=math.radians(10)))
    t = q.keyframes[0].target
    assert (t.x, t.y, t.z) == pytest.approx((math.cos(math.radians(10)), math.sin(math.radians(10)), 0.5))
    assert t.yaw == pytest.approx(math.radians(10))


@settings(max_examples=50, deadline=None)
@given(poses, poses, poses)
def test_adapt_preserves_relative_pose(ref, perceived, target):
    p = MotionPrimitive("m", [cart(target)], ref)
    q = adapt_primitive(p, perceived)
    np.testing.assert_allclose(rel_pose(perceived, q.keyframes[0].target), rel_pose(ref, target), atol=1e-9)


# -- interpolate ---------------------------------------------------------------------


def test_interpolate_noop_is_empty():
    p = MotionPrimitive("m", [Keyframe(ARM, JOINT, (0.0,) * 6)])
    assert interpolate(p, ArmState()) == []


def test_interpolate_durations():
    tr = interpolate(MotionPrimitive("m", [cart(Pose3(0.65, 0, 0))]), ArmState())
    assert tr[-1].t == pytest.approx(0.5)
    assert tr[-1].value == (0.65, 0, 0, 0, 0, 0)
    tr = interpolate(MotionPrimitive("m", [Keyframe(ARM, JOINT, (1.0, 0, 0, 0, 0, 0))]), ArmState())
    assert tr[-1].t == pytest.approx(0.5)
    assert len(tr) == 25


def test_interpolate_rotation_limits():
    tr = interpolate(MotionPrimitive("m", [cart(Pose3(yaw=1.0), ang=2.0)]), ArmState())
    assert tr[-1].t == pytest.approx(0.5)
    with pytest.raises(InvalidKeyframe):
        interpolate(MotionPrimitive("m", [cart(Pose3(yaw=1.0), ang=None)]), ArmState())


def test_interpolate_errors():
    with pytest.raises(InvalidKeyframe):
        interpolate(MotionPrimitive("m", [Keyframe(ARM, JOINT, (1.0, 2.0))]), ArmState())
    with pytest.raises(InvalidInput):
        interpolate(MotionPrimitive("m", [Keyframe(ARM, JOINT, (1.0,) * 6)]), ArmState(), dt=0)


def test_interpolate_gripper_and_chaining():
    p = MotionPrimitive("m", [Keyframe(GRIPPER, JOINT, (1.0,), max_speed=2.0),
                              Keyframe(ARM, JOINT, (0.4,) * 6, max_speed=2.0)])
    tr = interpolate(p, ArmState())
    seg0 = [s for s in tr if s.keyframe == 0]
    seg1 = [s for s in tr if s.keyframe == 1]
    assert seg0[-1].t == pytest.approx(0.5) and seg0[-1].value == (1.0,)
    assert seg1[-1].t == pytest.approx(0.7) and seg1[-1].value == (0.4,) * 6


def test_interpolate_sub_resolution_segment():
    p = MotionPrimitive("m", [Keyframe(ARM, JOINT, (1.0,) + (0.0,) * 5, max_speed=1.0),
                              Keyframe(ARM, JOINT, (1.0, 1e-122) + (0.0,) * 4, max_speed=1.0),
                              Keyframe(ARM, JOINT, (1.0, 1.0) + (0.0,) * 4, max_speed=1.0)])
    tr = interpolate(p, ArmState(), 0.0625)
    assert all(b.t > a.t for a, b in zip(tr, tr[1:]))
    assert {s.keyframe for s in tr} == {0, 2}
    assert tr[-1].t == pytest.approx(2.0)


def _speed_ok(tr, start, p):
    prev_t, prev = 0.0, start
    for s in tr:
        k = p.keyframes[s.keyframe]
        cur = np.asarray(s.value)
        d = cur - prev[:len(cur)] if len(prev) >= len(cur) else cur
        if k.space == CARTESIAN:
            step = np.linalg.norm(d[:3])
        else:
            step = np.max(np.abs(d))
        assert step / (s.t - prev_t) <= k.max_speed * (1 + 1e-9) + 1e-12
        prev_t, prev = s.t, cur


@settings(max_examples=40, deadline=None)
@given(st.lists(poses, min_size=1, max_size=4), st.floats(0.05, 2.0))
def test_interpolate_respects_speed_cartesian(targets, speed):
    p = MotionPrimitive("m", [cart(t, speed) for t in targets])
    tr = interpolate(p, ArmState())
    assert all(b.t > a.t for a, b in zip(tr, tr[1:]))
    _speed_ok(tr, np.zeros(6), p)
    moved = [s.keyframe for s in tr]
    for i in set(moved):
        assert [s for s in tr if s.keyframe == i][-1].value == targets[i].as_tuple()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.floats(-3, 3), min_size=6, max_size=6), min_size=1, max_size=4),
       st.floats(0.1, 3.0), st.floats(0.005, 0.1))
def test_interpolate_respects_speed_joint(targets, speed, dt):
    p = MotionPrimitive("m", [Keyframe(ARM, JOINT, t, max_speed=speed) for t in targets])
    tr = interpolate(p, ArmState(), dt)
    assert all(b.t > a.t for a, b in zip(tr, tr[1:]))
    _speed_ok(tr, np.zeros(6), p)


def test_library_roundtrip(tmp_path):
    lib = default_library()
    save_library(lib, tmp_path / "lib.json")
    back = load_library(tmp_path / "lib.json")
    assert [p.name for p in lib] == list(back)
    for p in lib:
        assert back[p.name] == p


# -- insertion -----------------------------------------------------------------------


def deg(v):
    return [round(math.degrees(a), 9) for a in v]


def test_insertable_examples():
    assert deg(insertion_plan(0.0).insertable_angles) == [-90, 0, 90]
    assert deg(insertion_plan(math.radians(45)).insertable_angles) == [-45, 45]
    assert math.degrees(insertion_plan(0.0).approach_angle) == pytest.approx(45)
    plan = insertion_plan(0.0)
    assert plan.turn_angle == TURN_ANGLE == pytest.approx(-math.radians(540))
    assert [e for _, e in plan.sweep] == [math.pi / 2, -math.pi / 2]
    assert "turn" in plan.steps


def test_insertable_enumeration_oracle():
    # brute-force k over a wide range against the closed interval
    for d in np.arange(-360, 360, 7.5):
        phi = math.radians(d)
        want = sorted(round(d + 90 * k, 9) for k in range(-10, 11) if -90 <= d + 90 * k <= 90)
        assert deg(insertable_angles(phi)) == want


@settings(max_examples=1000, deadline=None)
@given(st.floats(-2 * math.pi, 2 * math.pi))
def test_insertable_property(phi):
    ins = insertable_angles(phi)
    for a in ins:
        r = (a - phi) % (math.pi / 2)
        assert min(r, math.pi / 2 - r) < 1e-9
        assert -math.pi / 2 - 1e-12 <= a <= math.pi / 2 + 1e-12
    assert len(ins) in (2, 3)
    plan = insertion_plan(phi)
    assert min(abs(abs(plan.approach_angle - a) - math.pi / 4) for a in ins) < 1e-12
