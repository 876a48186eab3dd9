"""Panel pose registration: multi-start SE(2) ICP, visibility/ground weighted scoring and
a pose low-pass whose blend factor shrinks while the robot turns.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateRegistration, InvalidInput, RegistrationFailed
from .geometry import Pose3, wrap_angle
from .scansim import PanelGeometry

MODEL_FORMAT = "valvebot.panel_model"


def _sample_face(center, u, v, nu, nv, rng):
    # one jittered sample per grid cell: a regular lattice would let a copy of the model
    # shifted by part of a cell lock onto neighbouring lattice points during ICP
    a = (np.arange(nu) + 0.5) / nu - 0.5
    b = (np.arange(nv) + 0.5) / nv - 0.5
    A, B = np.meshgrid(a, b, indexing="ij")
    A = A + rng.uniform(-0.45, 0.45, A.shape) / nu
    B = B + rng.uniform(-0.45, 0.45, B.shape) / nv
    return center + A.reshape(-1, 1) * u + B.reshape(-1, 1) * v


def _box_surface(box, spacing, rng):
    """Points on the five non-bottom faces of an axis-aligned (yaw 0) box."""
    c = np.asarray(box.center, dtype=float)
    ex, ey, ez = box.extents
    X, Y, Z = np.eye(3)
    n = lambda length: max(1, int(math.ceil(length / spacing)))  # noqa: E731
    faces = [
        _sample_face(c + X * ex / 2, Y * ey, Z * ez, n(ey), n(ez), rng),
        _sample_face(c - X * ex / 2, Y * ey, Z * ez, n(ey), n(ez), rng),
        _sample_face(c + Y * ey / 2, X * ex, Z * ez, n(ex), n(ez), rng),
        _sample_face(c - Y * ey / 2, X * ex, Z * ez, n(ex), n(ez), rng),
        _sample_face(c + Z * ez / 2, X * ex, Y * ey, n(ex), n(ey), rng),
    ]
    return np.concatenate(faces)


def _inside_closed(pts, box, eps=1e-9):
    half = np.asarray(box.extents) / 2.0 + eps
    return np.all(np.abs(pts - np.asarray(box.center)) <= half, axis=1)


@dataclass
class PanelModel:
    """Panel surface as a point cloud in the panel frame (origin at the footprint centre)."""

    points: np.ndarray
    footprint: tuple = (0.76, 1.0)
    spacing: float = None
    tree: cKDTree = field(init=False, repr=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(self.points) == 0:
            raise InvalidInput("panel model must contain points")
        self.tree = cKDTree(self.points)
        if self.spacing is None:
            if len(self.points) > 1:
                d, _ = self.tree.query(self.points, k=2)
                self.spacing = float(np.median(d[:, 1]))
            else:
                self.spacing = 0.0

    @classmethod
    def from_geometry(cls, geometry: PanelGeometry = PanelGeometry(), spacing=0.02, seed=0):
        """Sample the outer surface of the composite panel, dropping faces shared between parts."""
        rng = np.random.default_rng(seed)
        boxes = geometry.local_boxes()
        pts = []
        for i, b in enumerate(boxes):
            s = _box_surface(b, spacing, rng)
            for j, other in enumerate(boxes):
                if j != i:
                    s = s[~_inside_closed(s, other)]
            pts.append(s)
        return cls(np.concatenate(pts), (geometry.depth, geometry.width), spacing)

    def to_dict(self):
        return {"format": MODEL_FORMAT, "version": 1, "footprint": list(self.footprint),
                "spacing": self.spacing, "points": self.points.tolist()}

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != MODEL_FORMAT:
            raise InvalidInput("not a panel model document")
        return cls(np.asarray(d["points"], dtype=float), tuple(d.get("footprint", (0.76, 1.0))),
                   d.get("spacing"))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass(frozen=True)
class PanelPose:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0
    score: float = 0.0
    timestamp: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    def apply(self, pts):
        """Map panel-frame points to the world (z untouched)."""
        pts = np.asarray(pts, dtype=float)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        out = pts.copy()
        out[:, 0] = c * pts[:, 0] - s * pts[:, 1] + self.x
        out[:, 1] = s * pts[:, 0] + c * pts[:, 1] + self.y
        return out

    def apply_inverse(self, pts):
        pts = np.asarray(pts, dtype=float)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx, dy = pts[:, 0] - self.x, pts[:, 1] - self.y
        out = pts.copy()
        out[:, 0] = c * dx + s * dy
        out[:, 1] = -s * dx + c * dy
        return out

    def pose3(self):
        return Pose3(self.x, self.y, 0.0, 0.0, 0.0, self.yaw)


@dataclass(frozen=True)
class RegistrationParams:
    seed_yaw_step: float = math.radians(30.0)
    max_iterations: int = 60
    convergence_eps: float = 1e-6
    correspondence_cutoff: float = 0.5
    ground_weight_scale: float = 4.0
    ground_ref_height: float = 0.5
    model_term_weight: float = 1.0
    cluster_term_weight: float = 1.0
    visibility_resolution: float = math.radians(0.2)
    visibility_depth_tol: float = 0.05
    visibility_coverage: float = 1.5
    visibility_rounds: int = 2
    # ICP runs on an evenly strided subset of larger clusters; scoring always uses every point
    max_icp_points: int = 800

    def __post_init__(self):
        k = 2.0 * math.pi / self.seed_yaw_step
        if self.seed_yaw_step <= 0 or abs(k - round(k)) > 1e-9:
            raise InvalidInput("seed_yaw_step must divide 2*pi")
        if min(self.model_term_weight, self.cluster_term_weight, self.ground_weight_scale) < 0:
            raise InvalidInput("score weights must be >= 0")
        if self.max_iterations < 1 or self.correspondence_cutoff <= 0:
            raise InvalidInput("max_iterations and correspondence_cutoff must be positive")


def _cluster_points(cluster):
    pts = getattr(cluster, "points", cluster)
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise InvalidInput("cluster must be non-empty")
    return pts


def _truncated_rms(d, cutoff):
    return float(math.sqrt(np.mean(np.minimum(d, cutoff) ** 2)))


def _se2_fit(src, dst, yaw_prev):
    """Least-squares (yaw, t) with R(yaw) src + t ~= dst, for 2D point pairs."""
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - ms, dst - md
    sin_sum = float(np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]))
    cos_sum = float(np.sum(a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1]))
    # a single correspondence (or coincident points) constrains translation only
    yaw = math.atan2(sin_sum, cos_sum) if abs(sin_sum) + abs(cos_sum) > 1e-15 else yaw_prev
    c, s = math.cos(yaw), math.sin(yaw)
    t = md - np.array([c * ms[0] - s * ms[1], s * ms[0] + c * ms[1]])
    return yaw, t


def icp_se2(model: PanelModel, cluster, init: PanelPose, params=RegistrationParams(), history=None):
    """Align ``model`` to ``cluster`` with translation on the ground plane and yaw only.

    Each cluster point is matched to its nearest model point; pairs farther apart than
    the cutoff are ignored. The cost is the truncated sum ``sum(min(d, cutoff)**2)``, so
    the returned residual (its RMS) never increases from one iteration to the next.

    :param history: optional list, receives the residual before every update and at the end
    :return: (PanelPose, residual in metres)
    """
    q = _cluster_points(cluster)
    cutoff = params.correspondence_cutoff
    pose = PanelPose(init.x, init.y, init.yaw, 0.0, init.timestamp)
    for _ in range(params.max_iterations):
        d, idx = model.tree.query(pose.apply_inverse(q), distance_upper_bound=cutoff)
        inl = np.isfinite(d)
        if history is not None:
            history.append(_truncated_rms(d, cutoff))
        if not inl.any():
            raise DegenerateRegistration("no correspondences within the cutoff")
        yaw, t = _se2_fit(model.points[idx[inl], :2], q[inl, :2], pose.yaw)
        change = math.hypot(t[0] - pose.x, t[1] - pose.y) + abs(wrap_angle(yaw - pose.yaw))
        pose = PanelPose(float(t[0]), float(t[1]), yaw, 0.0, init.timestamp)
        if change < params.convergence_eps:
            break
    d, _ = model.tree.query(pose.apply_inverse(q), distance_upper_bound=cutoff)
    residual = _truncated_rms(d, cutoff)
    if history is not None:
        history.append(residual)
    return pose, residual


def visible_subset(model: PanelModel, pose: PanelPose, sensor_pose: Pose3, params=RegistrationParams(),
                   return_mask=False):
    """Model points (world frame) not occluded by other model points, seen from the sensor.

    Points are binned into an azimuth/elevation range image; a point is visible when its
    range is within the depth tolerance of the nearest range in its bin. Bins are never
    finer than ``visibility_coverage`` times the model's angular point spacing at its
    closest point, otherwise a near surface would leave empty bins through which the
    hidden far side shows.
    """
    world = pose.apply(model.points)
    rel = (world - sensor_pose.translation) @ sensor_pose.rotation()
    r = np.linalg.norm(rel, axis=1)
    # azimuth relative to the model's mean direction keeps the image clear of the +-pi seam
    mean_dir = rel.mean(axis=0)
    az = wrap_angle(np.arctan2(rel[:, 1], rel[:, 0]) - math.atan2(mean_dir[1], mean_dir[0]))
    el = np.arctan2(rel[:, 2], np.hypot(rel[:, 0], rel[:, 1]))
    res = params.visibility_resolution
    if model.spacing > 0:
        res = max(res, params.visibility_coverage * model.spacing / max(float(r.min()), 1e-9))
    ia = np.floor(az / res).astype(np.int64)
    ie = np.floor(el / res).astype(np.int64)
    ia -= ia.min()
    ie -= ie.min()
    image = np.full((ia.max() + 1, ie.max() + 1), np.inf)
    np.minimum.at(image, (ia, ie), r)
    mask = r <= image[ia, ie] + params.visibility_depth_tol
    if return_mask:
        return mask
    return world[mask]


def score_pose(model: PanelModel, cluster, pose: PanelPose, sensor_pose: Pose3, params=RegistrationParams()):
    """Lower is better.

    ``model_term_weight * mean(visible model -> nearest cluster point)
    + cluster_term_weight * sum(w(z) * cluster point -> nearest model point)``
    with ``w(z) = 1 + ground_weight_scale * max(0, ground_ref_height - z)`` so returns
    near the ground, where the panel's front and back differ, count more.
    """
    q = _cluster_points(cluster)
    vis = visible_subset(model, pose, sensor_pose, params)
    d_model, _ = cKDTree(q).query(vis)
    d_cluster, _ = model.tree.query(pose.apply_inverse(q))
    w = 1.0 + params.ground_weight_scale * np.maximum(0.0, params.ground_ref_height - q[:, 2])
    return float(params.model_term_weight * np.mean(d_model)
                 + params.cluster_term_weight * np.sum(w * d_cluster))


def seed_poses(model: PanelModel, cluster, params=RegistrationParams(), sensor_pose=None):
    """Yaw seeds every ``seed_yaw_step``, each centred on the cluster centroid.

    Without ``sensor_pose`` the model centroid is placed on the cluster centroid. With it,
    the centroid of the model points visible at the seed is used instead, which is where
    the cluster (one or two faces of the panel) actually sits.
    """
    q = _cluster_points(cluster)
    cq = q[:, :2].mean(axis=0)
    cm = model.points[:, :2].mean(axis=0)
    k = int(round(2.0 * math.pi / params.seed_yaw_step))
    seeds = []
    for i in range(k):
        yaw = i * params.seed_yaw_step
        c, s = math.cos(yaw), math.sin(yaw)
        t = cq - np.array([c * cm[0] - s * cm[1], s * cm[0] + c * cm[1]])
        pose = PanelPose(float(t[0]), float(t[1]), yaw)
        if sensor_pose is not None:
            for _ in range(2):
                shift = cq - visible_subset(model, pose, sensor_pose, params)[:, :2].mean(axis=0)
                pose = PanelPose(pose.x + shift[0], pose.y + shift[1], yaw)
        seeds.append(pose)
    return seeds


def refine_visible(model: PanelModel, cluster, init: PanelPose, sensor_pose: Pose3, params=RegistrationParams()):
    """ICP against only the model points visible from the sensor, re-rendering visibility between rounds.

    A scan never sees the far side of the panel; matching against it lets the near face
    slide onto the far face.
    """
    pose, residual = init, math.inf
    for _ in range(params.visibility_rounds):
        mask = visible_subset(model, pose, sensor_pose, params, return_mask=True)
        pose, residual = icp_se2(PanelModel(model.points[mask], model.footprint, model.spacing), cluster,
                                 pose, params)
    return pose, residual


def register_panel(model: PanelModel, cluster, sensor_pose: Pose3, params=RegistrationParams(),
                   timestamp=0.0, return_candidates=False):
    """Multi-start ICP; the converged result with the lowest :func:`score_pose` wins.

    :raises RegistrationFailed: when every seed is degenerate
    """
    q = _cluster_points(cluster)
    sub = q
    if len(q) > params.max_icp_points:
        sub = q[np.linspace(0, len(q) - 1, params.max_icp_points).astype(np.int64)]
    candidates = []
    for seed in seed_poses(model, q, params, sensor_pose):
        try:
            pose, _ = refine_visible(model, sub, seed, sensor_pose, params)
        except DegenerateRegistration:
            continue
        candidates.append(PanelPose(pose.x, pose.y, pose.yaw, score_pose(model, q, pose, sensor_pose, params),
                                    timestamp))
    if not candidates:
        raise RegistrationFailed("all registration seeds were degenerate")
    # deterministic tie-break on seed order
    best = min(range(len(candidates)), key=lambda i: (candidates[i].score, i))
    if return_candidates:
        return candidates[best], candidates
    return candidates[best]


def lowpass_pose(prev: PanelPose, new: PanelPose, robot_yaw_rate, lam0=0.5, k=1.0):
    """Blend ``new`` into ``prev`` with ``lam = lam0 / (1 + k |omega|)``; yaw along the shorter arc."""
    if not 0.0 < lam0 <= 1.0:
        raise InvalidInput("lam0 must be in (0, 1]")
    if k < 0:
        raise InvalidInput("k must be >= 0")
    lam = lam0 / (1.0 + k * abs(robot_yaw_rate))
    return PanelPose(
        prev.x + lam * (new.x - prev.x),
        prev.y + lam * (new.y - prev.y),
        prev.yaw + lam * wrap_angle(new.yaw - prev.yaw),
        new.score,
        new.timestamp,
    )
