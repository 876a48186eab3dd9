"""Width-specific object detection in LiDAR scan rings.

Each ring is filtered with two circular median kernels whose sizes follow from the
target width and the measured range of each sample. Samples where the small (noise)
kernel responds closer than the large (background) kernel by more than the response
threshold are detections. Detections from all rings are clustered and filtered, then
tracked across frames.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from . import kernels
from .errors import InvalidInput


@dataclass(frozen=True)
class DetectorParams:
    # apparent widths in roughly (w, 1.5 w) respond; 0.75 m centres a 1 m panel in that band
    object_width: float = 0.75
    response_threshold: float = 0.61
    background_factor: float = 1.5
    cluster_tolerance: float = 0.5
    min_cluster_points: int = 3
    panel_max_dims: tuple = (1.5, 1.5, 1.6)
    arena_bounds: tuple = (-100.0, -100.0, 100.0, 100.0)
    min_mean_height: float = 0.1
    max_range: float = 100.0

    def __post_init__(self):
        if self.object_width <= 0 or self.response_threshold <= 0:
            raise InvalidInput("object_width and response_threshold must be positive")
        if self.background_factor <= 1:
            raise InvalidInput("background_factor must exceed 1")


@dataclass
class Cluster:
    points: np.ndarray
    centroid: np.ndarray = None
    bbox_dims: np.ndarray = None
    first_seen: float = 0.0
    last_seen: float = 0.0
    track_id: int = -1
    hits: int = 1

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(self.points) == 0:
            raise InvalidInput("cluster must contain points")
        if self.centroid is None:
            self.centroid = self.points.mean(axis=0)
        if self.bbox_dims is None:
            self.bbox_dims = self.points.max(axis=0) - self.points.min(axis=0)
        self.centroid = np.asarray(self.centroid, dtype=float)
        self.bbox_dims = np.asarray(self.bbox_dims, dtype=float)


def _next_odd(x):
    m = np.ceil(np.asarray(x, dtype=float) - 1e-9).astype(np.int64)
    return np.where(m % 2 == 0, m + 1, m)


def kernel_sizes_array(w, distances, azimuth_step, background_factor=1.5):
    """Vectorised :func:`kernel_sizes` over an array of ranges."""
    d = np.asarray(distances, dtype=float)
    beta = np.arctan(0.5 * w / d)
    n = np.floor(2.0 * beta / azimuth_step + 0.5)
    noise_k = np.maximum(_next_odd(2.0 * n), 3)
    bg_k = _next_odd(background_factor * noise_k)
    bg_k = np.where(bg_k > noise_k, bg_k, noise_k + 2)
    return noise_k, bg_k


def kernel_sizes(w, distance, azimuth_step, background_factor=1.5):
    """Noise and background median kernel sizes for a sample at ``distance``.

    The object's half-angle is ``arctan(0.5 w / d)``; the expected number of returns on
    it, ``n``, is twice that over the azimuth step. The noise kernel is the next odd size
    of at least ``2 n`` (minimum 3); the background kernel the next odd size of at least
    ``background_factor`` times the noise kernel.

    >>> kernel_sizes(0.5, 10.0, math.radians(0.2))
    (29, 45)
    """
    if distance <= 0 or azimuth_step <= 0 or w < 0:
        raise InvalidInput(f"kernel_sizes needs positive inputs, got w={w} d={distance}")
    nk, bk = kernel_sizes_array(w, [distance], azimuth_step, background_factor)
    return int(nk[0]), int(bk[0])


def ring_responses(ring, params: DetectorParams):
    """Per-sample (noise median, background median) of one ring."""
    n = len(ring.ranges)
    noise_k, bg_k = kernel_sizes_array(params.object_width, ring.ranges, ring.azimuth_step,
                                       params.background_factor)
    # a window can never usefully exceed the ring itself
    cap = n if n % 2 else n - 1
    noise_k = np.minimum(noise_k, cap)
    bg_k = np.minimum(bg_k, cap)
    return kernels.ring_medians(ring.ranges, noise_k, bg_k)


def detect_ring(ring, params: DetectorParams):
    """Indices of ring samples whose noise response beats the background by the response threshold."""
    if len(ring.ranges) == 0:
        return np.zeros(0, dtype=np.int64)
    m_noise, m_bg = ring_responses(ring, params)
    valid = ring.ranges < params.max_range
    sel = valid & (m_noise < m_bg) & (m_bg - m_noise > params.response_threshold)
    return np.nonzero(sel)[0]


def cluster_detections(points, params: DetectorParams):
    """Euclidean clustering: connected components under distance <= cluster_tolerance."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return []
    pairs = cKDTree(pts).query_pairs(params.cluster_tolerance, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(len(pts), len(pts)))
    _, labels = connected_components(graph, directed=False)
    _, first = np.unique(labels, return_index=True)
    out = []
    for lab in labels[np.sort(first)]:
        members = pts[labels == lab]
        if len(members) >= params.min_cluster_points:
            out.append(Cluster(members))
    return out


def support_extent(points, center, radius, min_height):
    """Horizontal diameter of the above-ground returns within ``radius`` of ``center``."""
    d = np.hypot(points[:, 0] - center[0], points[:, 1] - center[1])
    sup = points[(d <= radius) & (points[:, 2] > min_height), :2]
    if len(sup) < 2:
        return 0.0
    # diameter of the support via its convex hull is overkill; the bbox diagonal over
    # a few rotations bounds it closely enough for a size gate
    best = 0.0
    for a in np.linspace(0.0, np.pi / 2, 7)[:-1]:
        c, s = np.cos(a), np.sin(a)
        u = sup @ np.array([c, s])
        v = sup @ np.array([-s, c])
        best = max(best, u.max() - u.min(), v.max() - v.min())
    return float(best)


def filter_clusters(clusters, params: DetectorParams, scan_points=None):
    """Drop clusters whose size or position rules out the panel.

    With ``scan_points`` (all valid returns of the scan) a cluster is also dropped when the
    object it lies on extends beyond the panel's horizontal size: a ring sliding over the
    top of a long wall produces a panel-wide run, but the wall's other returns betray it.
    """
    x0, y0, x1, y1 = params.arena_bounds
    dims = np.asarray(params.panel_max_dims)
    max_horizontal = float(max(dims[0], dims[1]))
    kept = []
    for c in clusters:
        if np.any(c.bbox_dims > dims):
            continue
        if scan_points is not None and len(scan_points):
            ext = support_extent(scan_points, c.centroid, max_horizontal, params.min_mean_height)
            if ext > max_horizontal:
                continue
        if not (x0 <= c.centroid[0] <= x1 and y0 <= c.centroid[1] <= y1):
            continue
        if c.centroid[2] < params.min_mean_height:
            continue
        kept.append(c)
    return kept


def track_clusters(tracks, new, now, gate, timeout):
    """Nearest-neighbour association of new clusters to existing tracks.

    Pairs are accepted in order of increasing distance, one-to-one, within ``gate``.
    Matched tracks take the running mean of their centroids and unmatched clusters open
    new tracks. A track not seen for more than ``timeout`` is dropped.
    """
    tracks = [replace(t) for t in tracks]
    next_id = max((t.track_id for t in tracks), default=-1) + 1
    cand = []
    for i, t in enumerate(tracks):
        for j, c in enumerate(new):
            d = float(np.linalg.norm(t.centroid[:2] - c.centroid[:2]))
            if d <= gate:
                cand.append((d, i, j))
    cand.sort()
    used_t, used_c = set(), set()
    for _, i, j in cand:
        if i in used_t or j in used_c:
            continue
        used_t.add(i)
        used_c.add(j)
        t, c = tracks[i], new[j]
        t.centroid = (t.centroid * t.hits + c.centroid) / (t.hits + 1)
        t.hits += 1
        t.points = c.points
        t.bbox_dims = c.bbox_dims
        t.last_seen = now
    for j, c in enumerate(new):
        if j in used_c:
            continue
        tracks.append(Cluster(c.points, c.centroid.copy(), c.bbox_dims.copy(), now, now, next_id, 1))
        next_id += 1
    return [t for t in tracks if now - t.last_seen <= timeout]


def detection_points(scan, params: DetectorParams):
    """World-frame points of every detected sample in a scan."""
    pts = []
    for k, ring in enumerate(scan.rings):
        idx = detect_ring(ring, params)
        if idx.size:
            pts.append(scan.points(k, idx))
    return np.concatenate(pts) if pts else np.zeros((0, 3))


def detect_scan(scan, params: DetectorParams):
    """Panel candidates in one scan, clustered and then filtered."""
    clusters = cluster_detections(detection_points(scan, params), params)
    if not clusters:
        return []
    return filter_clusters(clusters, params, scan.valid_points())


def gather_points(scan, center, radius, min_height=0.05):
    """All scan returns within ``radius`` (ground plane distance) of ``center`` and above the ground.

    Detections only cover the part of a face where the medians disagree; registration
    works better on every return of the object, so candidates are re-grown here.
    """
    pts = scan.valid_points()
    if len(pts) == 0:
        return pts
    d = np.hypot(pts[:, 0] - center[0], pts[:, 1] - center[1])
    return pts[(d <= radius) & (pts[:, 2] > min_height)]


def closest_cluster(clusters, position):
    if not clusters:
        return None
    d = [math.hypot(c.centroid[0] - position[0], c.centroid[1] - position[1]) for c in clusters]
    return clusters[int(np.argmin(d))]


def clusters_to_dict(clusters):
    return {
        "format": "valvebot.clusters",
        "version": 1,
        "clusters": [
            {
                "track_id": int(c.track_id),
                "centroid": [float(v) for v in c.centroid],
                "bbox_dims": [float(v) for v in c.bbox_dims],
                "first_seen": c.first_seen,
                "last_seen": c.last_seen,
                "points": [[float(v) for v in p] for p in c.points],
            }
            for c in clusters
        ],
    }


def clusters_from_dict(d):
    if d.get("format") != "valvebot.clusters":
        raise InvalidInput("not a cluster document")
    return [Cluster(np.asarray(c["points"]), np.asarray(c["centroid"]), np.asarray(c["bbox_dims"]),
                    c.get("first_seen", 0.0), c.get("last_seen", 0.0), c.get("track_id", -1))
            for c in d["clusters"]]
