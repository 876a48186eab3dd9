"""Valve stem and wrench mouth geometry from a close-range depth frame.

Near pixels are split into connected regions; the largest region in the upper half of the
image is the wrench mouth (held fixed in front of the camera), the largest in the lower
half is the stem. The stem's orientation and width come from the minimum-area rectangle of
its points projected onto the camera plane.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DegenerateGeometry, InvalidInput, RegionMissing, TipsNotFound
from .scansim import Box, DepthFrame, FrameSpec, Scene, look_at, perturb_depth, render_depth_frame


@dataclass(frozen=True)
class RotatedBox:
    """Rectangle with side lengths ``lengths`` along ``angle`` and along ``angle + pi/2``."""

    center: tuple
    lengths: tuple
    angle: float  # edge direction, reduced to [0, pi/2)

    @property
    def extents(self):
        """(short, long) side lengths."""
        return tuple(sorted(self.lengths))

    @property
    def area(self):
        return self.lengths[0] * self.lengths[1]

    def _axes(self):
        c, s = math.cos(self.angle), math.sin(self.angle)
        return np.array([c, s]), np.array([-s, c])

    def corners(self):
        u, v = self._axes()
        hu, hv = 0.5 * self.lengths[0], 0.5 * self.lengths[1]
        ctr = np.asarray(self.center)
        return np.array([ctr + a * hu * u + b * hv * v for a, b in ((-1, -1), (1, -1), (1, 1), (-1, 1))])

    def local(self, pts):
        """Coordinates of ``pts`` along the two box axes, relative to the centre."""
        u, v = self._axes()
        rel = np.atleast_2d(pts) - np.asarray(self.center)
        return rel @ u, rel @ v

    def contains(self, pts, eps=1e-9):
        a, b = self.local(pts)
        return (np.abs(a) <= 0.5 * self.lengths[0] + eps) & (np.abs(b) <= 0.5 * self.lengths[1] + eps)


@dataclass(frozen=True)
class StemPose:
    """Stem front-face centre and roll in the camera frame (x right, y down, z forward)."""

    position: tuple
    angle: float  # roll about the camera axis, [0, pi/2)
    width: float
    normal: tuple = (0.0, 0.0, -1.0)  # face normal, pointing back at the camera

    def __post_init__(self):
        if not self.width > 0:
            raise InvalidInput("stem width must be positive")


@dataclass(frozen=True)
class ValvePerceptParams:
    fg_threshold: float = 0.3
    cluster_tolerance: float = 0.008  # max depth step between neighbouring pixels of one region
    min_cluster_px: int = 50
    success_tol: float = 0.01
    face_margin: float = 0.2  # fraction of each rectangle extent trimmed to pick front-face points

    def __post_init__(self):
        if min(self.fg_threshold, self.cluster_tolerance, self.success_tol) <= 0 or self.min_cluster_px < 1:
            raise InvalidInput("valve perception thresholds must be positive")
        if not 0 <= self.face_margin < 0.5:
            raise InvalidInput("face_margin must lie in [0, 0.5)")


def extract_foreground(frame: DepthFrame, fg_threshold=0.3):
    return frame.valid & (frame.depth < fg_threshold)


def split_regions(mask, frame: DepthFrame, params=ValvePerceptParams()):
    """Largest region in the upper and in the lower half of the image.

    :returns: (mouth, stem) as (rows, cols) index arrays
    :raises RegionMissing: naming the half with no region of ``min_cluster_px`` pixels
    """
    labels = kernels.label_depth_gated(mask, frame.depth, params.cluster_tolerance)
    n = int(labels.max())
    flat = labels.ravel()
    sizes = np.bincount(flat, minlength=n + 1)
    rows = np.arange(frame.height).repeat(frame.width)
    row_sum = np.bincount(flat, weights=rows, minlength=n + 1)
    mid = 0.5 * (frame.height - 1)
    best = {"mouth": (0, 0), "stem": (0, 0)}
    for k in range(1, n + 1):
        if sizes[k] < params.min_cluster_px:
            continue
        half = "mouth" if row_sum[k] / sizes[k] < mid else "stem"
        if sizes[k] > best[half][0]:
            best[half] = (int(sizes[k]), k)
    out = []
    for half in ("mouth", "stem"):
        if best[half][0] == 0:
            raise RegionMissing(half)
        out.append(np.nonzero(labels == best[half][1]))
    return tuple(out)


def _bottom_profile(rows, cols):
    c0 = cols.min()
    prof = np.full(cols.max() - c0 + 1, -1)
    np.maximum.at(prof, cols - c0, rows)
    return c0, prof


def wrench_tips(mouth, frame: DepthFrame, min_separation=None):
    """The two lowest points of the mouth's lower boundary, as camera-frame 3D points.

    Candidates are the plateaus of the per-column bottom row that no nearby column goes
    below. The deepest is taken first, then the deepest at least ``min_separation`` columns
    away (default a quarter of the region's width); ties go to the wider pair.

    :raises TipsNotFound: when two separated candidates do not exist
    """
    rows, cols = np.asarray(mouth[0]), np.asarray(mouth[1])
    if rows.size == 0 or cols.max() - cols.min() < 1:
        raise TipsNotFound("mouth region narrower than two columns")
    c0, prof = _bottom_profile(rows, cols)
    width = prof.size
    sep = max(2, width // 4) if min_separation is None else min_separation
    # plateau-aware local maxima: a column qualifies if nothing within sep // 2 is lower in the image
    half = max(1, sep // 2)
    padded = np.concatenate([np.full(half, -1), prof, np.full(half, -1)])
    win = np.lib.stride_tricks.sliding_window_view(padded, 2 * half + 1).max(axis=1)
    cand = np.nonzero((prof >= 0) & (prof == win))[0]
    if cand.size == 0:
        raise TipsNotFound("no boundary extrema")
    # collapse plateaus to their centre column
    groups = np.split(cand, np.nonzero((np.diff(cand) > 1) | (np.diff(prof[cand]) != 0))[0] + 1)
    peaks = [(int(prof[g[0]]), float(g.mean())) for g in groups]
    peaks.sort(key=lambda p: -p[0])
    first = peaks[0]
    rest = [p for p in peaks[1:] if abs(p[1] - first[1]) >= sep]
    if not rest:
        raise TipsNotFound("fewer than two separated extrema")
    top = max(p[0] for p in rest)
    second = max((p for p in rest if p[0] == top), key=lambda p: abs(p[1] - first[1]))
    tips = sorted([first, second], key=lambda p: p[1])
    out = []
    for r, c in tips:
        col = int(round(c)) + c0
        z = frame.depth[r, col]
        if not z > 0:
            z = float(np.median(frame.depth[rows, cols]))
        out.append(np.array([(col - frame.cx) * z / frame.focal, (r - frame.cy) * z / frame.focal, z]))
    return out[0], out[1]


# -- minimum-area rectangle -----------------------------------------------------------


def convex_hull(points):
    """Monotone-chain convex hull, counter-clockwise, without collinear points."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=float))))
    if len(pts) < 3:
        return np.array(pts, dtype=float).reshape(-1, 2)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=float)


def min_area_rect(points):
    """Minimum-area enclosing rectangle by rotating calipers over the hull edges.

    :raises DegenerateGeometry: for fewer than three non-collinear points
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or not np.all(np.isfinite(pts)):
        raise InvalidInput("expected finite (N, 2) points")
    hull = convex_hull(pts)
    if len(hull) < 3:
        raise DegenerateGeometry("points are collinear")
    edges = np.roll(hull, -1, axis=0) - hull
    lens = np.hypot(edges[:, 0], edges[:, 1])
    scale = np.ptp(pts, axis=0).max()
    u = edges / lens[:, None]
    v = np.stack([-u[:, 1], u[:, 0]], axis=1)
    pu = hull @ u.T  # (hull, edges)
    pv = hull @ v.T
    w = pu.max(axis=0) - pu.min(axis=0)
    h = pv.max(axis=0) - pv.min(axis=0)
    area = w * h
    k = int(np.argmin(area))
    if area[k] <= 1e-24 * scale * scale:
        raise DegenerateGeometry("points are collinear")
    cu = 0.5 * (pu[:, k].max() + pu[:, k].min())
    cv = 0.5 * (pv[:, k].max() + pv[:, k].min())
    center = cu * u[k] + cv * v[k]
    theta = math.atan2(u[k, 1], u[k, 0])
    angle = theta % (math.pi / 2)
    # reducing the angle by an odd number of quarter turns swaps the side lengths
    quarter = int(round((theta - angle) / (math.pi / 2))) % 2
    lengths = (float(w[k]), float(h[k])) if quarter == 0 else (float(h[k]), float(w[k]))
    if angle >= math.pi / 2 - 1e-15:
        angle, lengths = 0.0, (lengths[1], lengths[0])
    return RotatedBox((float(center[0]), float(center[1])), lengths, float(angle))


# -- stem pose -----------------------------------------------------------------------


def stem_pose(stem, frame: DepthFrame, params=ValvePerceptParams()):
    """Stem roll and width from the camera-plane rectangle; position from front-face points.

    Front-face points are those whose camera-plane projection lies inside the rectangle
    shrunk by ``face_margin`` on each side; the stem's visible side faces project onto
    the rectangle's border and drop out.
    """
    rows, cols = np.asarray(stem[0]), np.asarray(stem[1])
    pts = frame.backproject(rows, cols)
    box = min_area_rect(pts[:, :2])
    a, b = box.local(pts[:, :2])
    m = 0.5 - params.face_margin
    face = (np.abs(a) <= m * box.lengths[0]) & (np.abs(b) <= m * box.lengths[1])
    if not face.any():
        face = np.ones(len(pts), dtype=bool)
    pos = pts[face].mean(axis=0)
    return StemPose(tuple(float(v) for v in pos), box.angle, box.extents[0])


def perceive_valve(frame: DepthFrame, params=ValvePerceptParams()):
    """Full pipeline; returns (stem pose, wrench tips)."""
    mouth, stem = split_regions(extract_foreground(frame, params.fg_threshold), frame, params)
    return stem_pose(stem, frame, params), wrench_tips(mouth, frame)


def perceive_stem(frame: DepthFrame, params=ValvePerceptParams()):
    _, stem = split_regions(extract_foreground(frame, params.fg_threshold), frame, params)
    return stem_pose(stem, frame, params)


def robustness_trial(frames, truth, p_missing, sigma, repeats=5, params=ValvePerceptParams(), seed=0):
    """Success rate of the stem pipeline on perturbed copies of ``frames``.

    Trial ``(i, r)`` uses seed ``seed * 1_000_003 + i * repeats + r`` whatever ``p_missing``
    and ``sigma`` are, so sweeps share their random draws.
    """
    if repeats < 1:
        raise InvalidInput("repeats must be >= 1")
    ok = n = 0
    for i, (frame, t) in enumerate(zip(frames, truth)):
        for r in range(repeats):
            n += 1
            noisy = perturb_depth(frame, p_missing, sigma, seed * 1_000_003 + i * repeats + r)
            try:
                est = perceive_stem(noisy, params)
            except (RegionMissing, DegenerateGeometry):
                continue
            ok += np.linalg.norm(np.subtract(est.position, t.position)) <= params.success_tol
    return ok / n


# -- synthetic frames ------------------------------------------------------------------


@dataclass(frozen=True)
class ValveRig:
    """Synthetic close-range view: camera looking straight down at a vertical stem.

    With no camera roll, image right is world +x and image up is world +y, so a roll of
    the stem about its axis is a box yaw; in the image (y down) it appears mirrored.
    """

    stem_width: float = 0.019
    stem_length: float = 0.05
    stem_depth: float = 0.15  # camera to stem front face
    stem_offset: tuple = (0.0, -0.022)  # world (x, y) of the stem axis relative to the camera
    stem_roll: float = 0.0
    mouth_depth: float = 0.10
    mouth_gap: float = 0.021
    prong_width: float = 0.008
    prong_length: float = 0.025
    mouth_tip_y: float = -0.004  # world y of the prong tips relative to the camera
    wrench_thickness: float = 0.006
    background_depth: float = 0.6
    camera_height: float = 1.0
    camera_roll: float = 0.0  # extra rotation of the camera about its optical axis

    def camera_pose(self):
        up = (-math.sin(self.camera_roll), math.cos(self.camera_roll), 0.0)
        return look_at((0.0, 0.0, self.camera_height), (0.0, 0.0, 0.0), up)

    def scene(self):
        h = self.camera_height
        sx, sy = self.stem_offset
        top = h - self.stem_depth
        stem = Box((sx, sy, top - 0.5 * self.stem_length), (self.stem_width, self.stem_width, self.stem_length),
                   self.stem_roll, "stem")
        back = Box((0.0, 0.0, h - self.background_depth - 0.005), (1.0, 1.0, 0.01), 0.0, "plate")
        zc = h - self.mouth_depth - 0.5 * self.wrench_thickness
        t = self.wrench_thickness
        pl, pw, gap = self.prong_length, self.prong_width, self.mouth_gap
        ymid = self.mouth_tip_y + 0.5 * pl
        boxes = [stem, back]
        for side in (-1, 1):
            boxes.append(Box((side * 0.5 * (gap + pw), ymid, zc), (pw, pl, t), 0.0, "prong"))
        bar_y = self.mouth_tip_y + pl + 0.005
        boxes.append(Box((0.0, bar_y, zc), (gap + 2 * pw, 0.01, t), 0.0, "mouth_bar"))
        boxes.append(Box((0.0, bar_y + 0.05, zc), (0.015, 0.1, t), 0.0, "handle"))
        return Scene(tuple(boxes))

    def truth(self):
        """Stem pose in the camera frame."""
        cam = self.camera_pose()
        sx, sy = self.stem_offset
        p = cam.inverse().transform_points([[sx, sy, self.camera_height - self.stem_depth]])[0]
        edge = cam.rotation().T @ [math.cos(self.stem_roll), math.sin(self.stem_roll), 0.0]
        angle = math.atan2(edge[1], edge[0]) % (math.pi / 2)
        return StemPose(tuple(float(v) for v in p), angle, self.stem_width)

    def tips_truth(self):
        """Prong tip centres (camera frame) at the wrench face nearest the camera."""
        cam = self.camera_pose()
        z = self.camera_height - self.mouth_depth
        pts = [[s * 0.5 * (self.mouth_gap + self.prong_width), self.mouth_tip_y, z] for s in (-1, 1)]
        return cam.inverse().transform_points(pts)

    def render(self, spec=FrameSpec(), seed=0):
        return render_depth_frame(self.scene(), self.camera_pose(), spec, seed)


def synthetic_valve_frames(n=4, spec=FrameSpec()):
    """``n`` clean frames with varied stem roll and offset; returns (frames, truths)."""
    rolls = [0.0, 20.0, 35.0, 60.0, 75.0, 10.0, 50.0, 85.0]
    offsets = [(0.0, -0.022), (0.006, -0.025), (-0.008, -0.02), (0.003, -0.028)]
    frames, truths = [], []
    for i in range(n):
        rig = ValveRig(stem_roll=math.radians(rolls[i % len(rolls)]), stem_offset=offsets[i % len(offsets)])
        frames.append(rig.render(spec, seed=i))
        truths.append(rig.truth())
    return frames, truths

