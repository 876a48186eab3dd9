"""Deterministic synthetic sensors: spinning multi-ring LiDAR, close-range depth camera,
and the depth perturbation operator used by the robustness experiments.

Scenes are made of yawed boxes standing on a ground plane at z=0. The LiDAR sees the
ground and the boxes; the depth camera renders boxes only.
"""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidInput
from .geometry import Pose3, rot_rpy, rot_z

DEPTH_MISSING = 0.0
SCENE_FORMAT = "valvebot.scene"
SCENE_VERSION = 1


@dataclass(frozen=True)
class Box:
    center: tuple
    extents: tuple
    yaw: float = 0.0
    name: str = ""

    def __post_init__(self):
        if len(self.center) != 3 or len(self.extents) != 3:
            raise InvalidInput("box center and extents must be 3-vectors")
        if min(self.extents) <= 0:
            raise InvalidInput(f"box extents must be positive, got {self.extents}")

    def corners(self):
        half = np.asarray(self.extents) / 2.0
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        return (signs * half) @ rot_z(self.yaw).T + np.asarray(self.center)


@dataclass(frozen=True)
class Scene:
    boxes: tuple = ()
    arena_bounds: tuple = (-100.0, -100.0, 100.0, 100.0)

    def __post_init__(self):
        x0, y0, x1, y1 = self.arena_bounds
        if not (x1 > x0 and y1 > y0):
            raise InvalidInput(f"degenerate arena bounds {self.arena_bounds}")
        object.__setattr__(self, "boxes", tuple(self.boxes))

    def with_boxes(self, boxes):
        return replace(self, boxes=tuple(self.boxes) + tuple(boxes))


@dataclass(frozen=True)
class PanelGeometry:
    """Valve panel mock-up: a tall body with a low foot protruding from its front face.

    The panel frame has its origin at the footprint centre on the ground, +x pointing
    out of the front face. The foot breaks the front/back symmetry near the ground.
    """

    depth: float = 0.76
    width: float = 1.0
    height: float = 1.5
    foot_depth: float = 0.3
    foot_height: float = 0.3

    @property
    def front_face_x(self):
        """x of the body's front face (where wrenches hang and the stem protrudes)."""
        return self.depth / 2.0 - self.foot_depth

    def local_boxes(self):
        body_depth = self.depth - self.foot_depth
        body = Box((-self.depth / 2.0 + body_depth / 2.0, 0.0, self.height / 2.0),
                   (body_depth, self.width, self.height), 0.0, "panel_body")
        foot = Box((self.depth / 2.0 - self.foot_depth / 2.0, 0.0, self.foot_height / 2.0),
                   (self.foot_depth, self.width, self.foot_height), 0.0, "panel_foot")
        return [body, foot]

    def boxes_at(self, x, y, yaw):
        out = []
        R = rot_z(yaw)
        for b in self.local_boxes():
            c = R @ np.asarray(b.center) + np.array([x, y, 0.0])
            out.append(Box(tuple(float(v) for v in c), b.extents, float(yaw + b.yaw), b.name))
        return out


@dataclass(frozen=True)
class LidarModel:
    ring_count: int = 16
    ring_elevation_spacing: float = math.radians(2.0)
    azimuth_step: float = math.radians(0.2)
    mount_pitch: float = math.radians(10.0)
    max_range: float = 100.0
    range_noise_sigma: float = 0.0
    revolution_rate: float = 10.0

    def __post_init__(self):
        if self.ring_count < 1:
            raise InvalidInput("ring_count must be >= 1")
        if self.azimuth_step <= 0 or self.max_range <= 0:
            raise InvalidInput("azimuth_step and max_range must be positive")

    @property
    def samples_per_ring(self):
        return int(round(2.0 * math.pi / self.azimuth_step))

    def elevations(self):
        i = np.arange(self.ring_count)
        return (i - (self.ring_count - 1) / 2.0) * self.ring_elevation_spacing

    def azimuths(self):
        n = self.samples_per_ring
        return np.arange(n) * (2.0 * math.pi / n)


@dataclass
class ScanRing:
    ranges: np.ndarray
    azimuths: np.ndarray
    elevation: float

    def __post_init__(self):
        if len(self.ranges) != len(self.azimuths):
            raise InvalidInput("ranges and azimuths differ in length")

    @property
    def azimuth_step(self):
        return 2.0 * math.pi / len(self.ranges)


@dataclass
class Scan:
    rings: list
    sensor_pose: Pose3
    timestamp: float = 0.0
    mount_pitch: float = 0.0
    max_range: float = 100.0

    def directions(self, ring_index, indices=None):
        """Unit ray directions in the world frame for samples of one ring."""
        ring = self.rings[ring_index]
        az = ring.azimuths if indices is None else ring.azimuths[indices]
        return _ray_dirs(az, ring.elevation, self.mount_pitch, self.sensor_pose)

    def points(self, ring_index, indices=None):
        ring = self.rings[ring_index]
        r = ring.ranges if indices is None else ring.ranges[indices]
        return self.sensor_pose.translation + self.directions(ring_index, indices) * r[:, None]

    def valid_points(self):
        """All non-sentinel samples as world points, shape (n, 3)."""
        pts = []
        for k, ring in enumerate(self.rings):
            idx = np.nonzero(ring.ranges < self.max_range)[0]
            if idx.size:
                pts.append(self.points(k, idx))
        return np.concatenate(pts) if pts else np.zeros((0, 3))


def _ray_dirs(az, elevation, mount_pitch, sensor_pose):
    az = np.asarray(az, dtype=float)
    ce = math.cos(elevation)
    d = np.stack([ce * np.cos(az), ce * np.sin(az), np.full_like(az, math.sin(elevation))], axis=-1)
    R = sensor_pose.rotation() @ rot_rpy(0.0, mount_pitch, 0.0)
    return d @ R.T


def ray_box_distances(origin, dirs, box):
    """Entry distance along each ray into a yawed box (inf where missed).

    Rays starting inside a box report the exit distance.
    """
    R = rot_z(box.yaw)
    o = (np.asarray(origin, dtype=float) - np.asarray(box.center)) @ R
    d = np.asarray(dirs, dtype=float) @ R
    half = np.asarray(box.extents) / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    # parallel axes: inside slab -> unbounded, outside -> miss
    par = d == 0.0
    inside = np.abs(o) <= half
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    tn = tmin.max(axis=-1)
    tf = tmax.min(axis=-1)
    hit = (tn <= tf) & (tf > 0)
    t = np.where(tn > 0, tn, tf)
    return np.where(hit, t, np.inf)


def first_hits(origin, dirs, boxes, ground=True):
    """Distance to the first surface along each ray; inf when nothing is hit."""
    dirs = np.asarray(dirs, dtype=float)
    best = np.full(dirs.shape[:-1], np.inf)
    for box in boxes:
        best = np.minimum(best, ray_box_distances(origin, dirs, box))
    if ground:
        oz = float(np.asarray(origin)[2])
        dz = dirs[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            tg = np.where(dz < 0, -oz / dz, np.inf)
        tg = np.where(tg > 0, tg, np.inf)
        best = np.minimum(best, tg)
    return best


def raycast_scan(scene: Scene, sensor_pose: Pose3, model: LidarModel, seed: int, timestamp=0.0) -> Scan:
    """Simulate one LiDAR revolution.

    Each sample is the first box/ground intersection along its ray plus Gaussian range
    noise. Rays that hit nothing within ``max_range`` return ``max_range``.
    """
    rng = np.random.default_rng(seed)
    az = model.azimuths()
    elev = model.elevations()
    noise = rng.normal(0.0, 1.0, size=(len(elev), len(az))) * model.range_noise_sigma
    origin = sensor_pose.translation
    rings = []
    for k, e in enumerate(elev):
        dirs = _ray_dirs(az, float(e), model.mount_pitch, sensor_pose)
        t = first_hits(origin, dirs, scene.boxes)
        hit = t <= model.max_range
        r = np.where(hit, t + noise[k], model.max_range)
        r = np.clip(r, 1e-6, model.max_range)
        rings.append(ScanRing(r, az.copy(), float(e)))
    return Scan(rings, sensor_pose, float(timestamp), model.mount_pitch, model.max_range)


# -- depth camera -------------------------------------------------------------


@dataclass(frozen=True)
class FrameSpec:
    """Depth camera header: image size and pinhole intrinsics (pixels)."""

    width: int = 224
    height: int = 171
    focal: float = 210.0
    cx: float = 111.5
    cy: float = 85.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.focal <= 0 or self.width <= 0 or self.height <= 0:
            raise InvalidInput("invalid depth camera intrinsics")


@dataclass
class DepthFrame:
    width: int
    height: int
    depth: np.ndarray  # (height, width), metres along the optical axis; DEPTH_MISSING where invalid
    focal: float
    cx: float
    cy: float
    camera_pose: Pose3 = field(default_factory=Pose3)

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64).reshape(self.height, self.width)
        if self.focal <= 0:
            raise InvalidInput("focal length must be positive")

    @property
    def spec(self):
        return FrameSpec(self.width, self.height, self.focal, self.cx, self.cy)

    @property
    def valid(self):
        return self.depth > DEPTH_MISSING

    def with_depth(self, depth):
        return DepthFrame(self.width, self.height, depth, self.focal, self.cx, self.cy, self.camera_pose)

    def backproject(self, rows, cols):
        """Camera-frame 3D points (x right, y down, z forward) for the given pixels."""
        z = self.depth[rows, cols]
        x = (np.asarray(cols) - self.cx) * z / self.focal
        y = (np.asarray(rows) - self.cy) * z / self.focal
        return np.stack([x, y, z], axis=-1)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose3:
    """Optical-frame pose (z forward, x right, y down) at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=float))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    T = np.eye(4)
    T[:3, :3] = np.stack([x, y, z], axis=1)
    T[:3, 3] = eye
    return Pose3.from_matrix(T)


def render_depth_frame(scene: Scene, camera_pose: Pose3, frame_spec: FrameSpec, seed: int) -> DepthFrame:
    """Pinhole z-buffer render of the scene boxes; the ground plane is not rendered."""
    spec = frame_spec
    cols, rows = np.meshgrid(np.arange(spec.width, dtype=float), np.arange(spec.height, dtype=float))
    dirs_cam = np.stack([(cols - spec.cx) / spec.focal, (rows - spec.cy) / spec.focal,
                         np.ones_like(cols)], axis=-1)
    R = camera_pose.rotation()
    dirs = dirs_cam @ R.T
    # t is measured along rays whose optical-axis component is 1, so t equals depth
    t = first_hits(camera_pose.translation, dirs, scene.boxes, ground=False)
    depth = np.where(np.isfinite(t), t, DEPTH_MISSING)
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        noisy = depth + rng.normal(0.0, spec.noise_sigma, size=depth.shape)
        depth = np.where(depth > DEPTH_MISSING, np.maximum(noisy, 1e-6), DEPTH_MISSING)
    return DepthFrame(spec.width, spec.height, depth, spec.focal, spec.cx, spec.cy, camera_pose)


def perturb_depth(frame: DepthFrame, p_missing: float, sigma: float, seed: int) -> DepthFrame:
    """Drop each valid pixel with probability ``p_missing``; add N(0, sigma) to survivors."""
    if not 0.0 <= p_missing <= 1.0:
        raise InvalidInput(f"p_missing must be in [0, 1], got {p_missing}")
    if sigma < 0:
        raise InvalidInput("sigma must be >= 0")
    rng = np.random.default_rng(seed)
    drop = rng.random(frame.depth.shape) < p_missing
    noise = rng.normal(0.0, 1.0, size=frame.depth.shape) * sigma
    keep = frame.valid & ~drop
    depth = np.where(keep, frame.depth + noise, DEPTH_MISSING)
    # noise pushing a pixel through the camera plane is a dropout, not a valid reading
    depth = np.where(depth > DEPTH_MISSING, depth, DEPTH_MISSING)
    return frame.with_depth(depth)


# -- files ----------------------------------------------------------------------


def scene_to_dict(scene: Scene):
    return {
        "format": SCENE_FORMAT,
        "version": SCENE_VERSION,
        "arena_bounds": list(scene.arena_bounds),
        "boxes": [{"name": b.name, "center": list(b.center), "extents": list(b.extents), "yaw": b.yaw}
                  for b in scene.boxes],
    }


def scene_from_dict(d) -> Scene:
    if d.get("format") != SCENE_FORMAT:
        raise InvalidInput(f"not a scene document: format={d.get('format')!r}")
    if d.get("version") != SCENE_VERSION:
        raise InvalidInput(f"unsupported scene version {d.get('version')}")
    boxes = [Box(tuple(b["center"]), tuple(b["extents"]), float(b.get("yaw", 0.0)), b.get("name", ""))
             for b in d.get("boxes", [])]
    return Scene(tuple(boxes), tuple(d.get("arena_bounds", Scene.arena_bounds)))


def save_scene(scene, path):
    with open(path, "w") as f:
        json.dump(scene_to_dict(scene), f, indent=2)


def load_scene(path) -> Scene:
    with open(path) as f:
        return scene_from_dict(json.load(f))


_SCAN_MAGIC = b"VSCN"
_SCAN_HEADER = struct.Struct("<4sIII3d6d")
_FRAME_MAGIC = b"VDPT"
_FRAME_HEADER = struct.Struct("<4sIII4d6d")
_FILE_VERSION = 1


def write_scan(scan: Scan, path):
    """Flat binary: a header, then per ring the elevation followed by the azimuth and range arrays (float32 LE)."""
    n = len(scan.rings[0].ranges) if scan.rings else 0
    with open(path, "wb") as f:
        f.write(_SCAN_HEADER.pack(_SCAN_MAGIC, _FILE_VERSION, len(scan.rings), n, scan.max_range,
                                  scan.timestamp, scan.mount_pitch, *scan.sensor_pose.as_tuple()))
        for ring in scan.rings:
            f.write(np.asarray([ring.elevation], dtype="<f4").tobytes())
            f.write(np.asarray(ring.azimuths, dtype="<f4").tobytes())
            f.write(np.asarray(ring.ranges, dtype="<f4").tobytes())


def read_scan(path) -> Scan:
    with open(path, "rb") as f:
        raw = f.read()
    magic, version, ring_count, n, max_range, ts, pitch, *pose = _SCAN_HEADER.unpack_from(raw, 0)
    if magic != _SCAN_MAGIC or version != _FILE_VERSION:
        raise InvalidInput(f"{path}: not a version-{_FILE_VERSION} scan file")
    body = np.frombuffer(raw, dtype="<f4", offset=_SCAN_HEADER.size).astype(np.float64)
    stride = 1 + 2 * n
    if body.size != ring_count * stride:
        raise InvalidInput(f"{path}: truncated scan file")
    rings = []
    for k in range(ring_count):
        chunk = body[k * stride:(k + 1) * stride]
        rings.append(ScanRing(chunk[1 + n:].copy(), chunk[1:1 + n].copy(), float(chunk[0])))
    return Scan(rings, Pose3(*pose), ts, pitch, max_range)


def write_scan_csv(scan: Scan, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["ring", "index", "elevation", "azimuth", "range"])
        for k, ring in enumerate(scan.rings):
            for i, (a, r) in enumerate(zip(ring.azimuths, ring.ranges)):
                w.writerow([k, i, repr(float(ring.elevation)), repr(float(a)), repr(float(r))])


def write_depth_frame(frame: DepthFrame, path):
    with open(path, "wb") as f:
        f.write(_FRAME_HEADER.pack(_FRAME_MAGIC, _FILE_VERSION, frame.width, frame.height, frame.focal,
                                   frame.cx, frame.cy, DEPTH_MISSING, *frame.camera_pose.as_tuple()))
        f.write(np.asarray(frame.depth, dtype="<f4").tobytes())


def read_depth_frame(path) -> DepthFrame:
    with open(path, "rb") as f:
        raw = f.read()
    magic, version, w, h, focal, cx, cy, _missing, *pose = _FRAME_HEADER.unpack_from(raw, 0)
    if magic != _FRAME_MAGIC or version != _FILE_VERSION:
        raise InvalidInput(f"{path}: not a version-{_FILE_VERSION} depth frame")
    depth = np.frombuffer(raw, dtype="<f4", offset=_FRAME_HEADER.size).astype(np.float64)
    if depth.size != w * h:
        raise InvalidInput(f"{path}: truncated depth frame")
    return DepthFrame(w, h, depth.reshape(h, w), focal, cx, cy, Pose3(*pose))


def write_depth_csv(frame: DepthFrame, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["row", "col", "depth"])
        for r in range(frame.height):
            for c in range(frame.width):
                w.writerow([r, c, repr(float(frame.depth[r, c]))])
