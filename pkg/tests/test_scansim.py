import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from valvebot.errors import InvalidInput
from valvebot.geometry import Pose3
from valvebot.scansim import (
    DEPTH_MISSING, Box, DepthFrame, FrameSpec, LidarModel, PanelGeometry, Scene, look_at,
    load_scene, perturb_depth, raycast_scan, read_depth_frame, read_scan, render_depth_frame,
    save_scene, write_depth_csv, write_depth_frame, write_scan, write_scan_csv,
)


def _world_dirs(model, pose):
    # independent construction: rotate sensor-frame rays by the mount pitch about y, then by yaw
    el = model.elevations()[:, None]
    az = model.azimuths()[None, :]
    d = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el) + 0 * az], axis=-1)
    p = model.mount_pitch
    Ry = np.array([[math.cos(p), 0, math.sin(p)], [0, 1, 0], [-math.sin(p), 0, math.cos(p)]])
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    Rz = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    return d @ (Rz @ Ry).T


def test_empty_scene_hits_ground_or_sentinel():
    model = LidarModel()
    pose = Pose3(1.0, -2.0, 0.9, 0, 0, 0.3)
    scan = raycast_scan(Scene(), pose, model, seed=0)
    dirs = _world_dirs(model, pose)
    dz = dirs[..., 2]
    with np.errstate(divide="ignore"):
        t = np.where(dz < 0, -0.9 / dz, np.inf)
    expect = np.where(t <= model.max_range, t, model.max_range)
    got = np.stack([r.ranges for r in scan.rings])
    assert np.allclose(got, expect, rtol=1e-12, atol=1e-12)
    # 10 deg down pitch, +-15 deg rings: some rays must miss
    assert (got == model.max_range).any() and (got < model.max_range).any()


def test_box_run_length_matches_analytic_count():
    model = LidarModel(ring_count=1, mount_pitch=0.0)
    box = Box((10.05, 0.0, 1.0), (0.1, 0.76, 2.0))
    scan = raycast_scan(Scene((box,)), Pose3(0, 0, 0.5), model, seed=0)
    r = scan.rings[0].ranges
    on = np.nonzero(r < 10.5)[0]
    expected = math.ceil(2 * math.atan(0.38 / 10) / model.azimuth_step)
    assert abs(len(on) - expected) <= 1
    # contiguous across the seam at azimuth 0
    gaps = np.diff(np.sort((on + len(r) // 2) % len(r)))
    assert np.all(gaps == 1)
    assert np.allclose(r[on], 10.0 / np.cos(scan.rings[0].azimuths[on]), atol=1e-9)
    assert np.all(r[r >= 10.5] == model.max_range)


def test_raycast_deterministic_and_seeded():
    model = LidarModel(range_noise_sigma=0.01)
    scene = Scene(tuple(PanelGeometry().boxes_at(8, 2, 1.0)))
    a = raycast_scan(scene, Pose3(0, 0, 0.9), model, seed=42)
    b = raycast_scan(scene, Pose3(0, 0, 0.9), model, seed=42)
    c = raycast_scan(scene, Pose3(0, 0, 0.9), model, seed=43)
    for ra, rb, rc in zip(a.rings, b.rings, c.rings):
        assert np.array_equal(ra.ranges, rb.ranges)
    assert any(not np.array_equal(ra.ranges, rc.ranges) for ra, rc in zip(a.rings, c.rings))
    assert len(a.rings) == model.ring_count


def test_noise_bounded_below_by_true_surface():
    scene = Scene(tuple(PanelGeometry().boxes_at(6, -1, 0.4)))
    pose = Pose3(0, 0, 0.9)
    clean = raycast_scan(scene, pose, LidarModel(), seed=0)
    sigma = 0.01
    noisy = raycast_scan(scene, pose, LidarModel(range_noise_sigma=sigma), seed=5)
    for rc, rn in zip(clean.rings, noisy.rings):
        assert np.all(rn.ranges > 0) and np.all(rn.ranges <= 100.0)
        hit = rc.ranges < 100.0
        # one-sided 4 sigma: expected ~1 violation in 28800, allow a handful
        assert np.sum(rn.ranges[hit] < rc.ranges[hit] - 4 * sigma) <= 3
        assert np.array_equal(rn.ranges[~hit], rc.ranges[~hit])


def test_scan_points_lie_on_ground():
    scan = raycast_scan(Scene(), Pose3(0, 0, 0.9, 0, 0, 0.7), LidarModel(), seed=0)
    pts = scan.valid_points()
    assert len(pts) > 0
    assert np.allclose(pts[:, 2], 0.0, atol=1e-9)


def test_invalid_types():
    with pytest.raises(InvalidInput):
        Box((0, 0, 0), (1, 0, 1))
    with pytest.raises(InvalidInput):
        Scene(arena_bounds=(0, 0, 0, 1))
    with pytest.raises(InvalidInput):
        LidarModel(ring_count=0)
    with pytest.raises(InvalidInput):
        FrameSpec(focal=0)


# -- depth camera -------------------------------------------------------------

SPEC = FrameSpec(640, 480, 500.0, 319.5, 239.5)


def _stem_scene():
    # 1.9 cm wide, 5 cm tall face, 15 cm in front of a camera at the origin looking along +x
    return Scene((Box((0.15 + 0.005, 0.0, 0.5), (0.01, 0.019, 0.05)),))


def test_empty_scene_renders_sentinel():
    f = render_depth_frame(Scene(), look_at((0, 0, 0.5), (1, 0, 0.5)), SPEC, 0)
    assert np.all(f.depth == DEPTH_MISSING)


def test_stem_face_pixel_count():
    f = render_depth_frame(_stem_scene(), look_at((0, 0, 0.5), (1, 0, 0.5)), SPEC, 0)
    expected = (0.019 * SPEC.focal / 0.15) * (0.05 * SPEC.focal / 0.15)
    count = int(f.valid.sum())
    assert abs(count - expected) <= 0.02 * expected
    assert np.allclose(f.depth[f.valid], 0.15, atol=1e-12)


def test_camera_translation_shifts_centroid():
    scene = _stem_scene()
    a = render_depth_frame(scene, look_at((0, 0, 0.5), (1, 0, 0.5)), SPEC, 0)
    # camera right is world -y when looking along +x
    b = render_depth_frame(scene, look_at((0, -0.01, 0.5), (1, -0.01, 0.5)), SPEC, 0)
    ca = np.nonzero(a.valid)[1].mean()
    cb = np.nonzero(b.valid)[1].mean()
    assert abs((ca - cb) - SPEC.focal * 0.01 / 0.15) <= 1.0


def _frame_with_valid(n_valid, seed=0):
    depth = np.zeros(200 * 100)
    depth[:n_valid] = 0.5 + np.random.default_rng(seed).random(n_valid)
    return DepthFrame(200, 100, depth.reshape(100, 200), 100.0, 99.5, 49.5)


def test_perturb_identity_and_extremes():
    f = _frame_with_valid(10000)
    assert np.array_equal(perturb_depth(f, 0.0, 0.0, 1).depth, f.depth)
    assert np.all(perturb_depth(f, 1.0, 0.0, 1).depth == DEPTH_MISSING)
    kept = perturb_depth(f, 0.5, 0.0, 7).valid.sum()
    assert abs(kept - 5000) <= 150
    with pytest.raises(InvalidInput):
        perturb_depth(f, 1.5, 0.0, 0)
    with pytest.raises(InvalidInput):
        perturb_depth(f, 0.5, -1.0, 0)


@settings(max_examples=40, deadline=None)
@given(p=st.floats(0, 1), sigma=st.floats(0, 0.5), seed=st.integers(0, 2**31), n=st.integers(0, 20000))
def test_perturb_never_creates_pixels(p, sigma, seed, n):
    f = _frame_with_valid(n, seed % 7)
    g = perturb_depth(f, p, sigma, seed)
    assert not np.any(g.valid & ~f.valid)
    assert np.array_equal(g.depth, perturb_depth(f, p, sigma, seed).depth)


# -- files ----------------------------------------------------------------------


def test_scene_roundtrip(tmp_path):
    scene = Scene(tuple(PanelGeometry().boxes_at(3, 4, 0.5)), (-50, -50, 50, 50))
    save_scene(scene, tmp_path / "s.json")
    assert load_scene(tmp_path / "s.json") == scene


def test_scan_roundtrip(tmp_path):
    scan = raycast_scan(Scene(tuple(PanelGeometry().boxes_at(5, 0, 0))), Pose3(0, 0, 0.9),
                        LidarModel(range_noise_sigma=0.01), seed=3, timestamp=1.5)
    write_scan(scan, tmp_path / "a.scan")
    back = read_scan(tmp_path / "a.scan")
    assert back.timestamp == 1.5 and back.sensor_pose == scan.sensor_pose
    for a, b in zip(scan.rings, back.rings):
        assert np.array_equal(b.ranges, a.ranges.astype(np.float32).astype(np.float64))
    write_scan_csv(scan, tmp_path / "a.csv")
    with open(tmp_path / "a.csv") as f:
        assert f.readline().strip() == "ring,index,elevation,azimuth,range"


def test_frame_roundtrip(tmp_path):
    f = render_depth_frame(_stem_scene(), look_at((0, 0, 0.5), (1, 0, 0.5)), FrameSpec(), 0)
    write_depth_frame(f, tmp_path / "f.bin")
    g = read_depth_frame(tmp_path / "f.bin")
    assert g.spec == f.spec
    assert np.array_equal(g.depth, f.depth.astype(np.float32).astype(np.float64))
    write_depth_csv(f, tmp_path / "f.csv")
    with open(tmp_path / "f.csv") as fh:
        assert sum(1 for _ in fh) == f.width * f.height + 1


def test_bad_files_rejected(tmp_path):
    p = tmp_path / "junk"
    p.write_bytes(b"\0" * 200)
    with pytest.raises(InvalidInput):
        read_scan(p)
    with pytest.raises(InvalidInput):
        read_depth_frame(p)
