"""Wrench selection from head and mouth end detections.

Detections come from a provider (a synthetic generator here, or recorded detector output
read from JSON). Heads are regressed onto a common line and mouths are snapped to the
nearest strong vertical edge. Heads and mouths are then paired greedily by horizontal
offset. Pair lengths are converted to metres through the registered panel plane, and the
wrench whose length is closest to the requested one is picked.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import InsufficientDetections, InvalidGeometry, InvalidInput, SelectionFailed
from .geometry import Pose3
from .registration import PanelPose
from .scansim import PanelGeometry, look_at

HEAD = "head"
MOUTH = "mouth"
DEFAULT_LENGTHS = (0.16, 0.18, 0.20, 0.22, 0.25, 0.30)


@dataclass(frozen=True)
class Detection:
    cls: str
    center: tuple
    box: tuple = (40.0, 40.0)
    confidence: float = 1.0

    def __post_init__(self):
        if self.cls not in (HEAD, MOUTH):
            raise InvalidInput(f"unknown detection class {self.cls!r}")
        if min(self.box) <= 0:
            raise InvalidInput("detection box must be positive")
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidInput("confidence must lie in [0, 1]")

    @property
    def x(self):
        return float(self.center[0])

    @property
    def y(self):
        return float(self.center[1])


@dataclass
class IntensityImage:
    width: int
    height: int
    values: np.ndarray  # (height, width) luminance

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(self.height, self.width)


@dataclass
class WrenchHypothesis:
    head: Detection
    mouth: Detection
    pixel_length: float
    metric_length: float = None
    match_cost: float = 0.0


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera; ``pose`` is the optical frame (z forward, x right, y down) in the world."""

    focal: float = 3500.0
    cx: float = 960.0
    cy: float = 600.0
    width: int = 1920
    height: int = 1200
    pose: Pose3 = Pose3()

    def __post_init__(self):
        if self.focal <= 0:
            raise InvalidInput("focal length must be positive")

    def project(self, pts):
        """World points (N, 3) to pixel coordinates (N, 2); points behind the camera give nan."""
        cam = self.pose.inverse().transform_points(np.atleast_2d(pts))
        z = np.where(cam[:, 2] > 0, cam[:, 2], np.nan)
        return np.stack([self.focal * cam[:, 0] / z + self.cx, self.focal * cam[:, 1] / z + self.cy], axis=1)

    def ray(self, u, v):
        """World-frame origin and direction (optical-axis component 1) through pixel (u, v)."""
        d = np.array([(u - self.cx) / self.focal, (v - self.cy) / self.focal, 1.0])
        return self.pose.translation, self.pose.rotation() @ d


def panel_plane(panel: PanelPose, geometry=PanelGeometry()):
    """Point and unit normal of the panel's front face in the world."""
    n = np.array([math.cos(panel.yaw), math.sin(panel.yaw), 0.0])
    p = np.array([panel.x, panel.y, 0.0]) + geometry.front_face_x * n
    return p, n


def intersect_plane(cam: CameraModel, u, v, plane):
    """World point where the ray through pixel (u, v) meets ``plane``, plus its depth.

    :raises InvalidGeometry: if the plane is parallel to the ray or behind the camera
    """
    o, d = cam.ray(u, v)
    p, n = plane
    den = float(d @ n)
    if abs(den) < 1e-12:
        raise InvalidGeometry("ray parallel to panel plane")
    t = float((p - o) @ n) / den
    if t <= 0:
        raise InvalidGeometry("panel plane behind camera")
    return o + t * d, t


# -- post-processing ---------------------------------------------------------------


def refine_heads(heads):
    """Project head centres vertically onto their least-squares line ``y = a x + b``.

    :raises InsufficientDetections: with fewer than two heads
    """
    if len(heads) < 2:
        raise InsufficientDetections("need at least two heads for the line fit")
    x = np.array([h.x for h in heads])
    y = np.array([h.y for h in heads])
    if np.ptp(x) == 0:
        raise InsufficientDetections("head centres share one column")
    a, b = np.polyfit(x, y, 1)
    return [replace(h, center=(h.x, float(a * h.x + b))) for h in heads]


def vertical_gradient(image: IntensityImage):
    """``|I[r] - I[r - 1]|`` per pixel; row 0 is zero."""
    g = np.zeros_like(image.values)
    g[1:] = np.abs(np.diff(image.values, axis=0))
    return g


def snap_mouths(mouths, image: IntensityImage, search_radius=10, floor=0.25):
    """Move each mouth to the row of strongest vertical edge within ``search_radius``.

    The edge strength of a row is the gradient averaged over the central half of the
    detection box. Mouths without an edge above ``floor`` in range are left as they are.
    """
    g = vertical_gradient(image)
    out = []
    for m in mouths:
        half = max(1, int(round(m.box[0] / 4)))
        c0, c1 = max(0, int(round(m.x)) - half), min(image.width, int(round(m.x)) + half + 1)
        r = int(round(m.y))
        r0, r1 = max(0, r - search_radius), min(image.height, r + search_radius + 1)
        if c0 >= c1 or r0 >= r1:
            out.append(m)
            continue
        prof = g[r0:r1, c0:c1].mean(axis=1)
        k = int(np.argmax(prof))
        out.append(replace(m, center=(m.x, float(r0 + k))) if prof[k] > floor else m)
    return out


def match_wrenches(heads, mouths):
    """Greedy one-to-one pairing, cheapest horizontal offset first."""
    cand = sorted((abs(h.x - m.x), i, j) for i, h in enumerate(heads) for j, m in enumerate(mouths))
    used_h, used_m, out = set(), set(), []
    for cost, i, j in cand:
        if i in used_h or j in used_m:
            continue
        used_h.add(i)
        used_m.add(j)
        h, m = heads[i], mouths[j]
        out.append(WrenchHypothesis(h, m, math.hypot(h.x - m.x, h.y - m.y), None, cost))
    return out


def estimate_lengths(pairs, panel: PanelPose, cam: CameraModel, geometry=PanelGeometry()):
    """Metric length of each pair: pixel length times the depth of the panel plane at the
    pair's midpoint, over the focal length.

    :raises InvalidGeometry: when the panel plane is behind the camera
    """
    plane = panel_plane(panel, geometry)
    out = []
    for p in pairs:
        u = 0.5 * (p.head.x + p.mouth.x)
        v = 0.5 * (p.head.y + p.mouth.y)
        _, depth = intersect_plane(cam, u, v, plane)
        out.append(replace(p, metric_length=p.pixel_length * depth / cam.focal))
    return out


def select_wrench(pairs, expected_lengths, target_index):
    """Pair whose nearest expected length is ``target_index``, smallest error first.

    :raises SelectionFailed: if no pair maps to the target length
    """
    if not pairs:
        raise SelectionFailed("no wrench pairs")
    exp = np.asarray(expected_lengths, dtype=float)
    if not 0 <= target_index < len(exp):
        raise InvalidInput("target index out of range")
    best, best_err = None, math.inf
    for p in pairs:
        err = np.abs(exp - p.metric_length)
        k = int(np.argmin(err))
        if k == target_index and err[k] < best_err:
            best, best_err = p, float(err[k])
    if best is None:
        raise SelectionFailed(f"no wrench matches expected length {exp[target_index]:.3f} m")
    return best


def stereo_agree(a, b, tol=0.025):
    """Mean of two 3D points when they lie within ``tol`` of each other, else None."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if np.linalg.norm(a - b) > tol:
        return None
    return 0.5 * (a + b)


def grasp_point(hyp: WrenchHypothesis, panel: PanelPose, cam: CameraModel, geometry=PanelGeometry()):
    """3D grasp point: the head centre's ray cut with the panel plane."""
    pt, _ = intersect_plane(cam, hyp.head.x, hyp.head.y, panel_plane(panel, geometry))
    return pt


def locate_wrench(heads, mouths, image, panel, cam, expected_lengths, target_index, search_radius=10):
    """Single-camera pipeline: refine, snap, match, measure, select; returns (hypothesis, grasp point)."""
    pairs = match_wrenches(refine_heads(heads), snap_mouths(mouths, image, search_radius))
    hyp = select_wrench(estimate_lengths(pairs, panel, cam), expected_lengths, target_index)
    return hyp, grasp_point(hyp, panel, cam)


# -- synthetic scenes and providers ------------------------------------------------


@dataclass(frozen=True)
class WrenchShape:
    """Rendered silhouette sizes in metres."""

    ring_radius: float = 0.018
    shaft_width: float = 0.012
    jaw_width: float = 0.03
    jaw_length: float = 0.025


@dataclass
class WrenchScene:
    """Wrenches hanging on the panel's front face.

    ``wrenches`` holds (length, lateral position) pairs, the position measured along the
    panel's +y axis; every head hangs at ``head_height``, mouths point down.
    """

    wrenches: list
    panel: PanelPose = PanelPose(0.0, 0.0, 0.0)
    head_height: float = 1.3
    hang_offset: float = 0.0
    geometry: PanelGeometry = PanelGeometry()

    def endpoints(self):
        """World (head, mouth) points, shape (N, 2, 3)."""
        c, s = math.cos(self.panel.yaw), math.sin(self.panel.yaw)
        fx = self.geometry.front_face_x + self.hang_offset
        out = []
        for length, lat in self.wrenches:
            base = np.array([self.panel.x + c * fx - s * lat, self.panel.y + s * fx + c * lat, 0.0])
            out.append([base + [0, 0, self.head_height], base + [0, 0, self.head_height - length]])
        return np.array(out, dtype=float).reshape(-1, 2, 3)


def capture_camera(scene: WrenchScene, distance=1.0, lateral=0.0, height=None, **kw):
    """Camera facing the panel front ``distance`` metres from the wrench plane."""
    p, n = panel_plane(scene.panel, scene.geometry)
    side = np.array([-n[1], n[0], 0.0])
    z = scene.head_height - 0.15 if height is None else height
    target = p + lateral * side + [0, 0, z]
    eye = target + distance * n
    return CameraModel(pose=look_at(eye, target), **kw)


def _fill_convex(img, poly, value=1.0):
    """Set pixels whose centres fall inside the convex polygon ``poly`` (N, 2) in (u, v)."""
    h, w = img.shape
    u0, v0 = np.floor(poly.min(axis=0)).astype(int)
    u1, v1 = np.ceil(poly.max(axis=0)).astype(int)
    u0, v0, u1, v1 = max(u0, 0), max(v0, 0), min(u1, w - 1), min(v1, h - 1)
    if u0 > u1 or v0 > v1:
        return
    uu, vv = np.meshgrid(np.arange(u0, u1 + 1, dtype=float), np.arange(v0, v1 + 1, dtype=float))
    inside = np.ones(uu.shape, dtype=bool)
    n = len(poly)
    area = 0.5 * sum(poly[i, 0] * poly[(i + 1) % n, 1] - poly[(i + 1) % n, 0] * poly[i, 1] for i in range(n))
    sgn = 1.0 if area >= 0 else -1.0
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        cross = (b[0] - a[0]) * (vv - a[1]) - (b[1] - a[1]) * (uu - a[0])
        inside &= sgn * cross >= 0
    img[v0:v1 + 1, u0:u1 + 1][inside] = value


def render_wrenches(scene: WrenchScene, cam: CameraModel, shape=WrenchShape(), ring_sides=24):
    """White-on-black silhouettes: ring at the head, shaft, solid jaw ending at the mouth tip."""
    img = np.zeros((cam.height, cam.width))
    c, s = math.cos(scene.panel.yaw), math.sin(scene.panel.yaw)
    side = np.array([-s, c, 0.0])
    up = np.array([0.0, 0.0, 1.0])
    ang = np.linspace(0, 2 * math.pi, ring_sides, endpoint=False)
    for head, mouth in scene.endpoints():
        ring = head + shape.ring_radius * (np.cos(ang)[:, None] * side + np.sin(ang)[:, None] * up)
        shaft = [head + 0.5 * shape.shaft_width * side, head - 0.5 * shape.shaft_width * side,
                 mouth - 0.5 * shape.shaft_width * side, mouth + 0.5 * shape.shaft_width * side]
        jaw_top = mouth + shape.jaw_length * up
        jaw = [jaw_top + 0.5 * shape.jaw_width * side, jaw_top - 0.5 * shape.jaw_width * side,
               mouth - 0.5 * shape.jaw_width * side, mouth + 0.5 * shape.jaw_width * side]
        for poly in (ring, np.array(shaft), np.array(jaw)):
            _fill_convex(img, cam.project(poly))
    return IntensityImage(cam.width, cam.height, img)


def synth_detections(scene: WrenchScene, cam: CameraModel, jitter=0.0, seed=0, box=(60.0, 60.0), render=True):
    """Detections at the projected head and mouth points plus Gaussian pixel jitter.

    :returns: (heads, mouths, image); image is None when ``render`` is False
    """
    rng = np.random.default_rng(seed)
    ends = scene.endpoints()
    px = cam.project(ends.reshape(-1, 3)).reshape(-1, 2, 2)
    noisy = px + rng.normal(0.0, jitter, px.shape) if jitter > 0 else px
    heads = [Detection(HEAD, (float(u), float(v)), box) for u, v in noisy[:, 0]]
    mouths = [Detection(MOUTH, (float(u), float(v)), box) for u, v in noisy[:, 1]]
    image = render_wrenches(scene, cam) if render else None
    return heads, mouths, image


class DetectionProvider:
    """Source of (heads, mouths, image) captures."""

    def capture(self):
        raise NotImplementedError


@dataclass
class SyntheticProvider(DetectionProvider):
    scene: WrenchScene
    cam: CameraModel
    jitter: float = 0.0
    seed: int = 0
    _count: int = field(default=0, repr=False)

    def capture(self):
        self._count += 1
        return synth_detections(self.scene, self.cam, self.jitter, self.seed * 1000003 + self._count)


def detections_to_dict(heads, mouths):
    return {"format": "valvebot.detections", "detections": [asdict(d) for d in list(heads) + list(mouths)]}


def detections_from_dict(d):
    if d.get("format") != "valvebot.detections":
        raise InvalidInput("not a detections document")
    dets = [Detection(x["cls"], tuple(x["center"]), tuple(x["box"]), float(x["confidence"]))
            for x in d["detections"]]
    return [x for x in dets if x.cls == HEAD], [x for x in dets if x.cls == MOUTH]


@dataclass
class FileProvider(DetectionProvider):
    """Replays recorded detections (JSON) with an optional ``.npy`` intensity image."""

    path: str
    image_path: str = None

    def capture(self):
        with open(self.path) as f:
            heads, mouths = detections_from_dict(json.load(f))
        image = None
        if self.image_path is not None:
            v = np.load(self.image_path)
            image = IntensityImage(v.shape[1], v.shape[0], v)
        return heads, mouths, image


# -- experiment ----------------------------------------------------------------------


def random_wrench_scene(rng, lengths=DEFAULT_LENGTHS, spacing=0.08):
    """Six wrenches in random order, evenly spaced about the panel centre line."""
    order = rng.permutation(len(lengths))
    lat = (np.arange(len(lengths)) - 0.5 * (len(lengths) - 1)) * spacing
    return WrenchScene([(float(lengths[k]), float(y)) for k, y in zip(order, lat)])


@dataclass
class SelectionTrial:
    correct: bool
    grasp_error: float  # metres; inf when the stereo pair disagreed
    agreed: bool


def selection_trial(seed, jitter=0.5 * 3500 / 100 / 3, lengths=DEFAULT_LENGTHS, baseline=0.1, distance=1.0):
    """One stereo selection on a random six-wrench scene.

    The default jitter puts 3 sigma at 0.5 cm on the panel plane at 1 m with f = 3500 px.
    """
    rng = np.random.default_rng(seed)
    scene = random_wrench_scene(rng, lengths)
    target = int(rng.integers(len(lengths)))
    truth_idx = [k for k, (length, _) in enumerate(scene.wrenches) if length == lengths[target]][0]
    heads_true = scene.endpoints()[:, 0]
    truth = heads_true[truth_idx]
    pts = []
    for lateral in (-0.5 * baseline, 0.5 * baseline):
        cam = capture_camera(scene, distance, lateral)
        heads, mouths, image = synth_detections(scene, cam, jitter, int(rng.integers(2**31)))
        try:
            _, pt = locate_wrench(heads, mouths, image, scene.panel, cam, lengths, target)
        except (SelectionFailed, InsufficientDetections):
            return SelectionTrial(False, math.inf, False)
        pts.append(pt)
    mean = stereo_agree(pts[0], pts[1])
    if mean is None:
        return SelectionTrial(False, math.inf, False)
    err = float(np.linalg.norm(mean - truth))
    # the pick is right when the nearest true head is the target's
    correct = int(np.argmin(np.linalg.norm(heads_true - mean, axis=1))) == truth_idx
    return SelectionTrial(correct, err, True)
