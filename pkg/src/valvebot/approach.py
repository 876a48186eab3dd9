"""Approach control for an omnidirectional base.

The robot drives waypoints while searching and then runs toward the detected panel. A
circling controller swings it round to the panel's front while keeping the panel in view,
and a local approach closes the last metre. The module also holds a kinematic base
simulator with differential-GPS localization. A closed-loop simulation wires both to the
simulated LiDAR and the perception modules.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .detector import DetectorParams, closest_cluster, detect_scan, gather_points, track_clusters
from .errors import GpsStale, InvalidInput, RegistrationFailed, SearchExhausted
from .geometry import Pose2, Pose3, wrap_angle
from .registration import PanelModel, PanelPose, RegistrationParams, lowpass_pose, register_panel
from .scansim import LidarModel, PanelGeometry, Scene, raycast_scan


class Phase(IntEnum):
    NAVIGATE = 0
    CIRCLE = 1
    LOCAL_APPROACH = 2
    ARRIVED = 3


@dataclass(frozen=True)
class VelocityCommand:
    vx: float = 0.0
    vy: float = 0.0
    vyaw: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.vx, self.vy, self.vyaw)):
            raise InvalidInput("velocity command must be finite")


@dataclass(frozen=True)
class BaseState:
    """Pose in the world; velocities in the body frame."""

    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    vyaw: float = 0.0
    t: float = 0.0

    @property
    def speed(self):
        return math.hypot(self.vx, self.vy)

    @property
    def pose(self):
        return Pose2(self.x, self.y, self.yaw)


@dataclass(frozen=True)
class ControllerParams:
    v_limit: float = 0.8
    circle_radius: float = 2.5
    period: float = 10.0
    hysteresis: float = math.radians(20.0)
    fade_time: float = 2.0
    # steady-state facing error while circling is omega / yaw_gain with omega = 2 pi / T
    yaw_gain: float = 4.0
    yaw_rate_max: float = 2.0
    arrive_pos_tol: float = 0.05
    arrive_yaw_tol: float = math.radians(3.0)
    switch_angle: float = math.radians(10.0)
    v_max: float = 4.0
    a_max: float = 5.0
    local_v_limit: float = 0.8
    local_yaw_limit: float = 0.8
    approach_standoff: float = 1.2
    circle_entry_range: float = 3.5
    capture_radius: float = 0.5

    def __post_init__(self):
        vals = (self.v_limit, self.circle_radius, self.period, self.hysteresis, self.fade_time, self.yaw_gain,
                self.arrive_pos_tol, self.arrive_yaw_tol, self.switch_angle, self.v_max, self.a_max)
        if min(vals) <= 0:
            raise InvalidInput("controller parameters must be positive")
        if self.hysteresis >= math.pi / 2:
            raise InvalidInput("hysteresis must be below 90 deg")


@dataclass
class ControllerState:
    phase: Phase = Phase.NAVIGATE
    rsgn_sign: int = 0  # 0 until the first call to rsgn
    alpha: float = 0.0


def rsgn(p_theta, state: ControllerState, hysteresis):
    """Signum with memory: flips only once ``p_theta`` leaves the +-hysteresis/2 band on the other side."""
    half = hysteresis / 2.0
    if p_theta > half:
        state.rsgn_sign = 1
    elif p_theta < -half:
        state.rsgn_sign = -1
    elif state.rsgn_sign == 0:
        state.rsgn_sign = -1 if p_theta < 0 else 1
    return state.rsgn_sign


def _clamp(v, lim):
    return max(-lim, min(lim, v))


def panel_angle(panel_ego: PanelPose):
    """Robot's angular position around the panel, 0 when squarely in front of it.

    The panel's +x axis points out of its front face, so a robot facing the front sees
    the panel yawed by pi in its own frame.
    """
    return wrap_angle(math.pi - panel_ego.yaw)


def circle_command(panel_ego: PanelPose, params: ControllerParams, state: ControllerState, dt=0.0):
    """Circling controller: hold distance ``d``, orbit at ``2 pi d / T``, yaw toward the panel.

    ``dt`` advances the fade-in factor before the command is formed.
    """
    state.alpha = min(1.0, state.alpha + dt / params.fade_time)
    vx = _clamp(panel_ego.x - params.circle_radius, params.v_limit)
    s = rsgn(panel_angle(panel_ego), state, params.hysteresis)
    vy = state.alpha * s * params.circle_radius * 2.0 * math.pi / params.period
    vyaw = _clamp(params.yaw_gain * math.atan2(panel_ego.y, panel_ego.x), params.yaw_rate_max)
    return VelocityCommand(vx, vy, vyaw)


def local_approach_command(target_ego, v_limit=0.8, yaw_limit=0.8):
    """Unit-gain proportional command toward ``(x, y, yaw)`` in the robot frame."""
    x, y, yaw = target_ego
    return VelocityCommand(_clamp(x, v_limit), _clamp(y, v_limit), _clamp(wrap_angle(yaw), yaw_limit))


def approach_target(panel_ego: PanelPose, params: ControllerParams):
    """Final robot pose (robot frame): ``approach_standoff`` in front of the panel, facing it."""
    c, s = math.cos(panel_ego.yaw), math.sin(panel_ego.yaw)
    d = params.approach_standoff
    return (panel_ego.x + c * d, panel_ego.y + s * d, wrap_angle(panel_ego.yaw + math.pi))


def step_phase(state: ControllerState, panel_ego, params: ControllerParams):
    """Advance the phase automaton; it only moves forward.

    Navigate -> Circle once a registered panel is within ``circle_entry_range``;
    Circle -> LocalApproach when ``|p_theta| < switch_angle``;
    LocalApproach -> Arrived when the target pose error is within tolerance.
    """
    if panel_ego is None:
        return state
    if state.phase == Phase.NAVIGATE:
        if math.hypot(panel_ego.x, panel_ego.y) <= params.circle_entry_range:
            state.phase = Phase.CIRCLE
            state.alpha = 0.0
    elif state.phase == Phase.CIRCLE:
        if abs(panel_angle(panel_ego)) < params.switch_angle:
            state.phase = Phase.LOCAL_APPROACH
    elif state.phase == Phase.LOCAL_APPROACH:
        x, y, yaw = approach_target(panel_ego, params)
        if math.hypot(x, y) < params.arrive_pos_tol and abs(yaw) < params.arrive_yaw_tol:
            state.phase = Phase.ARRIVED
    return state


def step_base(state: BaseState, cmd: VelocityCommand, params: ControllerParams, dt):
    """Integrate the base one step.

    The body velocity moves toward the command by at most ``a_max * dt`` and is capped at
    ``v_max``; the pose is integrated with the mean of the old and new velocities, rotated
    by the mid-step heading.
    """
    if dt <= 0:
        raise InvalidInput("dt must be positive")
    dvx, dvy = cmd.vx - state.vx, cmd.vy - state.vy
    dv = math.hypot(dvx, dvy)
    step = params.a_max * dt
    if dv > step:
        dvx, dvy = dvx * step / dv, dvy * step / dv
    vx, vy = state.vx + dvx, state.vy + dvy
    sp = math.hypot(vx, vy)
    if sp > params.v_max:
        vx, vy = vx * params.v_max / sp, vy * params.v_max / sp
    vyaw = _clamp(cmd.vyaw, params.yaw_rate_max)
    dyaw = 0.5 * (state.vyaw + vyaw) * dt
    mid = state.yaw + 0.5 * dyaw
    mx, my = 0.5 * (state.vx + vx), 0.5 * (state.vy + vy)
    c, s = math.cos(mid), math.sin(mid)
    return BaseState(
        state.x + (c * mx - s * my) * dt,
        state.y + (s * mx + c * my) * dt,
        wrap_angle(state.yaw + dyaw),
        vx, vy, vyaw,
        state.t + dt,
    )


# -- localization ----------------------------------------------------------------


@dataclass
class GpsFix:
    """Rover fix: position plus compass heading, with a receipt time."""

    x: float
    y: float
    yaw: float
    t: float


@dataclass
class LocalizerState:
    base_station: tuple = (0.0, 0.0)  # surveyed base-station position
    timeout: float = 2.0
    offset: Pose2 = field(default_factory=Pose2)
    last_fix_t: float = None


def localize(odom: Pose2, gps_fix, base_station_fix, state: LocalizerState, now):
    """World pose from odometry plus the last differential-GPS correction.

    On a fix, the common-mode error seen at the base station is removed from the rover fix
    and the offset between the corrected fix and odometry is stored; otherwise the stored
    offset is applied to the current odometry.

    :param gps_fix: :class:`GpsFix` or None when no fix arrived this step
    :param base_station_fix: base station's own measured (x, y), or None
    :raises GpsStale: when the last fix is older than ``state.timeout``
    """
    if gps_fix is not None:
        bx = by = 0.0
        if base_station_fix is not None:
            bx = base_station_fix[0] - state.base_station[0]
            by = base_station_fix[1] - state.base_station[1]
        corrected = Pose2(gps_fix.x - bx, gps_fix.y - by, gps_fix.yaw)
        state.offset = corrected.compose(odom.inverse())
        state.last_fix_t = gps_fix.t
    elif state.last_fix_t is None or now - state.last_fix_t > state.timeout:
        raise GpsStale(f"no GPS fix since {state.last_fix_t}")
    return state.offset.compose(odom)


# -- waypoints -------------------------------------------------------------------


@dataclass
class NavState:
    index: int = 0


def follow_waypoints(state: BaseState, waypoints, params: ControllerParams, nav: NavState, pose=None):
    """Drive to the current waypoint and advance on capture.

    Speed follows ``min(v_max, sqrt(2 a_max s))`` where ``s`` is the remaining path length
    through all outstanding waypoints, so the base brakes in time for the last one. The
    base yaws toward its direction of travel but translation does not depend on heading.

    :raises SearchExhausted: after the last waypoint is captured, or for an empty list
    """
    if len(waypoints) == 0:
        raise SearchExhausted("no waypoints")
    pose = pose or state.pose
    while nav.index < len(waypoints):
        wp = waypoints[nav.index]
        if math.hypot(wp.x - pose.x, wp.y - pose.y) <= params.capture_radius:
            nav.index += 1
        else:
            break
    if nav.index >= len(waypoints):
        raise SearchExhausted("all waypoints visited")
    wp = waypoints[nav.index]
    dx, dy = wp.x - pose.x, wp.y - pose.y
    dist = math.hypot(dx, dy)
    remaining = dist + sum(math.hypot(b.x - a.x, b.y - a.y)
                           for a, b in zip(waypoints[nav.index:], waypoints[nav.index + 1:]))
    speed = min(params.v_max, math.sqrt(2.0 * params.a_max * remaining))
    return _world_to_body_command(dx / dist * speed, dy / dist * speed, math.atan2(dy, dx), pose, params)


def _world_to_body_command(wx, wy, heading, pose, params, face=True):
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    vyaw = _clamp(params.yaw_gain * wrap_angle(heading - pose.yaw), params.yaw_rate_max) if face else 0.0
    return VelocityCommand(c * wx + s * wy, -s * wx + c * wy, vyaw)


def drive_to_panel(pose: Pose2, panel_xy, params: ControllerParams):
    """Full-speed run toward a detected panel, braking to reach ``circle_radius`` from it."""
    dx, dy = panel_xy[0] - pose.x, panel_xy[1] - pose.y
    dist = math.hypot(dx, dy)
    to_go = max(0.0, dist - params.circle_radius)
    speed = min(params.v_max, math.sqrt(2.0 * params.a_max * to_go))
    return _world_to_body_command(dx / dist * speed, dy / dist * speed, math.atan2(dy, dx), pose, params)


# -- closed loop -----------------------------------------------------------------


@dataclass(frozen=True)
class PerceptionConfig:
    lidar: LidarModel = LidarModel(range_noise_sigma=0.01)
    detector: DetectorParams = DetectorParams()
    registration: RegistrationParams = RegistrationParams()
    sensor_height: float = 0.9
    scan_period: float = 0.1
    registration_period: float = 1.0
    registration_range: float = 8.0
    confirm_hits: int = 3
    track_gate: float = 1.0
    track_timeout: float = 2.0
    gather_radius: float = 1.2
    lowpass_lam0: float = 0.5
    lowpass_k: float = 1.0
    gps_period: float = 1.0
    odom_drift: float = 0.01  # odometry scale error per metre travelled


@dataclass
class TrajectorySample:
    t: float
    x: float
    y: float
    yaw: float
    speed: float
    phase: str


@dataclass
class ApproachRun:
    samples: list
    phase_times: dict  # phase label -> first time it was entered
    outcome: str
    reason: str = ""
    panel_estimate: PanelPose = None
    final_state: BaseState = None


def phase_label(state: ControllerState, panel_seen):
    if state.phase == Phase.NAVIGATE:
        return "ApproachPanel" if panel_seen else "Navigate"
    return {Phase.CIRCLE: "Circle", Phase.LOCAL_APPROACH: "LocalApproach", Phase.ARRIVED: "Arrived"}[state.phase]


def _ego(panel_world: PanelPose, pose: Pose2):
    rel = Pose2(panel_world.x, panel_world.y, panel_world.yaw).relative_to(pose)
    return PanelPose(rel.x, rel.y, rel.yaw, panel_world.score, panel_world.timestamp)


def simulate_approach(scene: Scene, start: BaseState, waypoints, params=ControllerParams(),
                      perception=PerceptionConfig(), seed=0, dt=0.02, t_max=120.0,
                      model: PanelModel = None, base_station=(0.0, 0.0)):
    """Closed-loop run from ``start`` until the robot arrives or the run ends early.

    Scans are simulated from the true pose but interpreted with the localized pose.
    Odometry drifts by ``odom_drift`` per metre; differential GPS fixes arrive every
    ``gps_period`` seconds. The panel's world-frame estimate is refreshed by registration
    every ``registration_period`` once it is within ``registration_range``.
    """
    if model is None:
        model = PanelModel.from_geometry()
    rng = np.random.default_rng(seed)
    truth = start
    odom = start.pose
    loc = LocalizerState(base_station=tuple(base_station))
    pose_est = localize(odom, GpsFix(truth.x, truth.y, truth.yaw, truth.t), None, loc, truth.t)
    ctrl = ControllerState()
    nav = NavState()
    tracks = []
    panel_track = None
    panel_est = None
    next_scan = next_reg = next_gps = truth.t
    samples = [TrajectorySample(truth.t, truth.x, truth.y, truth.yaw, truth.speed, "Navigate")]
    phase_times = {"Navigate": truth.t}
    steps = int(round(t_max / dt))
    outcome, reason = "timeout", f"not arrived within {t_max} s"
    for k in range(steps):
        now = truth.t
        if now >= next_gps - 1e-9:
            next_gps += perception.gps_period
            fix = GpsFix(truth.x, truth.y, truth.yaw, now)
            pose_est = localize(odom, fix, None, loc, now)
        else:
            try:
                pose_est = localize(odom, None, None, loc, now)
            except GpsStale:
                pose_est = loc.offset.compose(odom)

        if now >= next_scan - 1e-9:
            next_scan += perception.scan_period
            sensor_true = Pose3(truth.x, truth.y, perception.sensor_height, 0.0, 0.0, truth.yaw)
            scan = raycast_scan(scene, sensor_true, perception.lidar, int(rng.integers(2**31)), now)
            scan.sensor_pose = Pose3(pose_est.x, pose_est.y, perception.sensor_height, 0.0, 0.0, pose_est.yaw)
            if panel_est is None or ctrl.phase == Phase.NAVIGATE:
                tracks = track_clusters(tracks, detect_scan(scan, perception.detector), now,
                                        perception.track_gate, perception.track_timeout)
                confirmed = [t for t in tracks if t.hits >= perception.confirm_hits]
                if confirmed:
                    panel_track = closest_cluster(confirmed, (pose_est.x, pose_est.y))
            # the estimate is frozen for the final approach so the target does not jitter
            if panel_track is not None and ctrl.phase < Phase.LOCAL_APPROACH and now >= next_reg - 1e-9:
                centre = panel_track.centroid if panel_est is None else (panel_est.x, panel_est.y)
                if math.hypot(centre[0] - pose_est.x, centre[1] - pose_est.y) <= perception.registration_range:
                    pts = gather_points(scan, centre, perception.gather_radius)
                    if len(pts) >= perception.detector.min_cluster_points:
                        next_reg = now + perception.registration_period
                        try:
                            reg = register_panel(model, pts, scan.sensor_pose, perception.registration, now)
                            panel_est = reg if panel_est is None else lowpass_pose(
                                panel_est, reg, truth.vyaw, perception.lowpass_lam0, perception.lowpass_k)
                        except RegistrationFailed:
                            pass

        panel_ego = _ego(panel_est, pose_est) if panel_est is not None else None
        step_phase(ctrl, panel_ego, params)
        try:
            if ctrl.phase == Phase.NAVIGATE:
                if panel_track is None:
                    cmd = follow_waypoints(truth, waypoints, params, nav, pose_est)
                else:
                    cmd = drive_to_panel(pose_est, (panel_track.centroid if panel_est is None
                                                    else (panel_est.x, panel_est.y)), params)
            elif ctrl.phase == Phase.CIRCLE:
                cmd = circle_command(panel_ego, params, ctrl, dt)
            elif ctrl.phase == Phase.LOCAL_APPROACH:
                cmd = local_approach_command(approach_target(panel_ego, params), params.local_v_limit,
                                             params.local_yaw_limit)
            else:
                cmd = VelocityCommand()
        except SearchExhausted as e:
            outcome, reason = "failure", f"search-exhausted: {e}"
            break
        label = phase_label(ctrl, panel_track is not None)
        phase_times.setdefault(label, now)
        if ctrl.phase == Phase.ARRIVED:
            outcome, reason = "success", ""
            break

        new = step_base(truth, cmd, params, dt)
        # odometry integrates the true body motion with a scale error
        moved = Pose2(truth.x, truth.y, truth.yaw).inverse().compose(new.pose)
        scale = 1.0 + perception.odom_drift
        odom = odom.compose(Pose2(moved.x * scale, moved.y * scale, moved.yaw))
        truth = new
        samples.append(TrajectorySample(truth.t, truth.x, truth.y, truth.yaw, truth.speed, label))
    return ApproachRun(samples, phase_times, outcome, reason, panel_est, truth)


def approach_scenario(distance=50.0, behind=True, panel_yaw=0.0, clutter=()):
    """Panel at the origin; the robot starts ``distance`` metres away behind (or in front of) it,
    facing the panel. The single waypoint is the panel position."""
    scene = Scene(tuple(PanelGeometry().boxes_at(0.0, 0.0, panel_yaw)) + tuple(clutter))
    side = -1.0 if behind else 1.0
    sx, sy = side * distance * math.cos(panel_yaw), side * distance * math.sin(panel_yaw)
    start = BaseState(sx, sy, math.atan2(-sy, -sx))
    return scene, start, [Pose2(0.0, 0.0, 0.0)]
