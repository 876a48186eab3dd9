import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial import ConvexHull

from oracles import flood_fill_labels, min_rect_area_oracle
from valvebot import _kernels_py, kernels
from valvebot.errors import DegenerateGeometry, InvalidInput, RegionMissing, TipsNotFound
from valvebot.scansim import DEPTH_MISSING, DepthFrame, FrameSpec, Scene, render_depth_frame
from valvebot.valve import (
    ValvePerceptParams, ValveRig, convex_hull, extract_foreground, min_area_rect, perceive_stem,
    robustness_trial, split_regions, stem_pose, synthetic_valve_frames, wrench_tips,
)

D = math.radians


def _frame(depth):
    h, w = depth.shape
    return DepthFrame(w, h, depth, 210.0, (w - 1) / 2, (h - 1) / 2)


def test_foreground_far_frame_empty():
    assert not extract_foreground(_frame(np.full((40, 50), 1.0)), 0.5).any()


def test_foreground_sentinel_excluded():
    d = np.full((40, 50), 0.1)
    d[::3, ::2] = DEPTH_MISSING
    m = extract_foreground(_frame(d), 0.3)
    assert not m[::3, ::2].any() and m.sum() == (d > 0).sum()


def test_foreground_matches_render():
    # stem face at 0.15 m in front of a plate at 1 m
    rig = ValveRig(background_depth=1.0)
    boxes = {b.name: b for b in rig.scene().boxes}
    frame = render_depth_frame(Scene((boxes["stem"], boxes["plate"])), rig.camera_pose(), FrameSpec(), 0)
    oracle = render_depth_frame(Scene((boxes["stem"],)), rig.camera_pose(), FrameSpec(), 0)
    assert oracle.valid.sum() > 300
    assert np.array_equal(extract_foreground(frame, 0.3), oracle.valid)


def _blob_mask(shape, blobs):
    m = np.zeros(shape, dtype=bool)
    for r0, r1, c0, c1 in blobs:
        m[r0:r1, c0:c1] = True
    return m


def test_split_one_blob_per_half():
    m = _blob_mask((100, 100), [(5, 20, 10, 30), (70, 90, 40, 60)])
    mouth, stem = split_regions(m, _frame(np.where(m, 0.1, 1.0)))
    assert len(mouth[0]) == 15 * 20 and mouth[0].max() < 50
    assert len(stem[0]) == 20 * 20 and stem[0].min() >= 70


def test_split_largest_lower_blob_is_stem():
    m = _blob_mask((100, 100), [(5, 20, 10, 30), (60, 80, 5, 30), (60, 70, 50, 70)])
    _, stem = split_regions(m, _frame(np.where(m, 0.1, 1.0)))
    assert len(stem[0]) == 500


def test_split_missing_halves():
    m = _blob_mask((100, 100), [(70, 90, 40, 60)])
    with pytest.raises(RegionMissing, match="mouth"):
        split_regions(m, _frame(np.where(m, 0.1, 1.0)))
    m = _blob_mask((100, 100), [(5, 20, 10, 30)])
    with pytest.raises(RegionMissing, match="stem"):
        split_regions(m, _frame(np.where(m, 0.1, 1.0)))


def test_split_depth_gate_separates_touching_regions():
    m = _blob_mask((100, 100), [(60, 80, 10, 50)])
    d = np.full((100, 100), 1.0)
    d[60:80, 10:30] = 0.10
    d[60:80, 30:50] = 0.15
    mouth = _blob_mask((100, 100), [(5, 20, 10, 30)])
    d[mouth] = 0.1
    _, stem = split_regions(m | mouth, _frame(d))
    assert len(stem[0]) == 400


def _pixels(frame, pts):
    pts = np.atleast_2d(pts)
    return np.stack([frame.focal * pts[:, 0] / pts[:, 2] + frame.cx, frame.focal * pts[:, 1] / pts[:, 2] + frame.cy], 1)


def test_wrench_tips_render_oracle():
    rig = ValveRig()
    frame = rig.render()
    mouth, _ = split_regions(extract_foreground(frame), frame)
    tips = np.array(wrench_tips(mouth, frame))
    truth = rig.tips_truth()
    truth = truth[np.argsort(truth[:, 0])]
    got, want = _pixels(frame, tips), _pixels(frame, truth)
    assert np.all(np.abs(got - want) <= 1.0)


def test_wrench_tips_single_column():
    with pytest.raises(TipsNotFound):
        wrench_tips((np.arange(10), np.full(10, 5)), _frame(np.full((20, 20), 0.1)))


def test_wrench_tips_translation_equivariant():
    frame = ValveRig().render()
    mouth, _ = split_regions(extract_foreground(frame), frame)
    shifted = (mouth[0], mouth[1] + 5)
    a = _pixels(frame, np.array(wrench_tips(mouth, frame)))
    b = _pixels(frame, np.array(wrench_tips(shifted, frame.with_depth(np.roll(frame.depth, 5, axis=1)))))
    assert np.allclose(b - a, [[5, 0], [5, 0]], atol=1e-9)


def test_min_rect_unit_square():
    box = min_area_rect([[0, 0], [1, 0], [1, 1], [0, 1]])
    assert box.extents == pytest.approx((1, 1)) and box.angle == pytest.approx(0.0, abs=1e-12)
    assert box.center == pytest.approx((0.5, 0.5))


def test_min_rect_rotated_square():
    c, s = math.cos(D(30)), math.sin(D(30))
    pts = np.array([[0, 0], [1, 0], [1, 1], [0, 1]]) @ np.array([[c, s], [-s, c]])
    box = min_area_rect(pts)
    assert box.extents == pytest.approx((1, 1), abs=1e-12)
    assert box.angle == pytest.approx(D(30), abs=1e-12)
    assert box.area == pytest.approx(1.0, abs=1e-9)


def test_min_rect_rectangle_extents_order():
    c, s = math.cos(D(100)), math.sin(D(100))
    pts = np.array([[0, 0], [3, 0], [3, 1], [0, 1]]) @ np.array([[c, s], [-s, c]])
    box = min_area_rect(pts)
    assert box.extents == pytest.approx((1, 3)) and box.angle == pytest.approx(D(10), abs=1e-12)
    assert np.all(box.contains(pts))


def test_min_rect_degenerate():
    with pytest.raises(DegenerateGeometry):
        min_area_rect([[0, 0], [1, 1], [2, 2], [3, 3]])
    with pytest.raises(DegenerateGeometry):
        min_area_rect([[0, 0], [1, 1]])
    with pytest.raises(InvalidInput):
        min_area_rect([[0, 0, 0]])


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(3, 500))
def test_min_rect_matches_oracle(seed, n):
    rng = np.random.default_rng(seed)
    pts = rng.normal(0, 1, (n, 2)) * rng.uniform(0.1, 5, 2)
    box = min_area_rect(pts)
    oracle = min_rect_area_oracle(pts)
    assert box.area == pytest.approx(oracle, rel=1e-6)
    assert np.all(box.contains(pts))
    aabb = np.ptp(pts[:, 0]) * np.ptp(pts[:, 1])
    assert box.area <= aabb * (1 + 1e-12)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), phi=st.floats(0, 2 * math.pi))
def test_min_rect_rotation_invariant(seed, phi):
    pts = np.random.default_rng(seed).uniform(-1, 1, (30, 2))
    c, s = math.cos(phi), math.sin(phi)
    rot = pts @ np.array([[c, s], [-s, c]])
    assert min_area_rect(rot).area == pytest.approx(min_area_rect(pts).area, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(3, 200))
def test_convex_hull_matches_scipy(seed, n):
    pts = np.random.default_rng(seed).uniform(0, 1, (n, 2))
    ours = {tuple(p) for p in convex_hull(pts)}
    ref = {tuple(p) for p in pts[ConvexHull(pts).vertices]}
    assert ours == ref


def test_stem_pose_rendered_width_and_angle():
    rig = ValveRig(stem_roll=0.0)
    sp = perceive_stem(rig.render())
    assert sp.width == pytest.approx(0.019, abs=0.002)
    assert sp.angle == pytest.approx(0.0, abs=D(2)) or sp.angle == pytest.approx(D(90), abs=D(2))
    assert np.allclose(sp.position, rig.truth().position, atol=1e-3)
    assert sp.normal == (0.0, 0.0, -1.0)


def _angle_diff(a, b):
    d = (a - b) % (math.pi / 2)
    return min(d, math.pi / 2 - d)


def test_stem_pose_rolled():
    rig = ValveRig(stem_roll=D(30))
    sp = perceive_stem(rig.render())
    # the world roll of 30 deg reads as 60 deg in the y-down image
    assert rig.truth().angle == pytest.approx(D(60))
    assert _angle_diff(sp.angle, rig.truth().angle) < D(2)


def test_stem_pose_camera_closer():
    far = perceive_stem(ValveRig(stem_depth=0.16).render())
    near = perceive_stem(ValveRig(stem_depth=0.15).render())
    assert far.position[2] - near.position[2] == pytest.approx(0.01, abs=0.001)


@pytest.mark.parametrize("phi", [5.0, 17.0, 40.0, 71.0])
def test_stem_angle_equivariant_under_camera_roll(phi):
    base = perceive_stem(ValveRig(stem_roll=D(25)).render()).angle
    rolled = perceive_stem(ValveRig(stem_roll=D(25), camera_roll=D(phi)).render()).angle
    # rotating the camera by phi about its axis turns the image content by -phi
    assert _angle_diff(rolled, base - D(phi)) < D(2) or _angle_diff(rolled, base + D(phi)) < D(2)
    assert _angle_diff(rolled, ValveRig(stem_roll=D(25), camera_roll=D(phi)).truth().angle) < D(2)


def test_stem_pose_rejects_degenerate_cluster():
    frame = _frame(np.full((20, 20), 0.1))
    with pytest.raises(DegenerateGeometry):
        stem_pose((np.arange(5), np.full(5, 3)), frame)


@pytest.fixture(scope="module")
def frames():
    return synthetic_valve_frames(4)


def test_robustness_clean(frames):
    assert robustness_trial(*frames, 0.0, 0.0, 5) == 1.0


def test_robustness_reference_points(frames):
    assert robustness_trial(*frames, 0.5, 0.0, 5) == 1.0
    assert robustness_trial(*frames, 0.0, 0.007, 5) == 1.0
    assert robustness_trial(*frames, 0.0, 0.02, 5) < 1.0
    assert robustness_trial(*frames, 0.9, 0.0, 5) <= 0.9


def test_robustness_deterministic(frames):
    a = robustness_trial(*frames, 0.6, 0.012, 3, seed=4)
    assert a == robustness_trial(*frames, 0.6, 0.012, 3, seed=4)


def test_robustness_monotone_shared_seeds(frames):
    clean = robustness_trial(*frames, 0.0, 0.0, 3, seed=2)
    for p, s in ((0.3, 0.0), (0.7, 0.0), (0.0, 0.015), (0.4, 0.01)):
        assert robustness_trial(*frames, p, s, 3, seed=2) <= clean


def test_robustness_rejects_zero_repeats(frames):
    with pytest.raises(InvalidInput):
        robustness_trial(*frames, 0.0, 0.0, 0)


def test_params_validation():
    with pytest.raises(InvalidInput):
        ValvePerceptParams(fg_threshold=0.0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), h=st.integers(1, 30), w=st.integers(1, 30), tol=st.floats(0.0, 0.2))
def test_label_depth_gated_backends_and_oracle(seed, h, w, tol):
    rng = np.random.default_rng(seed)
    mask = rng.random((h, w)) < 0.6
    depth = rng.choice([0.1, 0.15, 0.2, 0.3], (h, w)) + rng.normal(0, 0.01, (h, w))
    a = kernels.label_depth_gated(mask, depth, tol)
    b = _kernels_py.label_depth_gated(mask, depth, tol)
    assert np.array_equal(a, b)
    assert np.array_equal(a, flood_fill_labels(mask, depth, tol))
