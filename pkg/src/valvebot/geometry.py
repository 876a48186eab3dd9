"""Rigid-body helpers for planar (SE(2)) and spatial (6D) poses."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def wrap_angle(a):
    """Normalize an angle (scalar or array) to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w <= -np.pi, w + 2.0 * np.pi, w)
    if np.ndim(w) == 0:
        return float(w)
    return w


def rot_z(yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_rpy(roll, pitch, yaw):
    """Rotation matrix for intrinsic Z-Y-X (yaw, pitch, roll) Euler angles."""
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    return np.array([
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ])


def rpy_from_matrix(R):
    pitch = math.asin(max(-1.0, min(1.0, -R[2, 0])))
    if abs(math.cos(pitch)) < 1e-12:
        # gimbal lock: fold roll into yaw
        roll = 0.0
        yaw = math.atan2(-R[0, 1], R[1, 1])
    else:
        roll = math.atan2(R[2, 1], R[2, 2])
        yaw = math.atan2(R[1, 0], R[0, 0])
    return roll, pitch, yaw


@dataclass(frozen=True)
class Pose3:
    """6D pose: translation in metres, orientation as roll/pitch/yaw in radians."""

    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    @property
    def translation(self):
        return np.array([self.x, self.y, self.z])

    def rotation(self):
        return rot_rpy(self.roll, self.pitch, self.yaw)

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation()
        T[:3, 3] = self.translation
        return T

    @classmethod
    def from_matrix(cls, T):
        roll, pitch, yaw = rpy_from_matrix(T[:3, :3])
        return cls(float(T[0, 3]), float(T[1, 3]), float(T[2, 3]), roll, pitch, yaw)

    def compose(self, other: "Pose3") -> "Pose3":
        return Pose3.from_matrix(self.matrix() @ other.matrix())

    def inverse(self) -> "Pose3":
        return Pose3.from_matrix(np.linalg.inv(self.matrix()))

    def transform_points(self, pts):
        pts = np.asarray(pts, dtype=float)
        return pts @ self.rotation().T + self.translation

    def as_tuple(self):
        return (self.x, self.y, self.z, self.roll, self.pitch, self.yaw)


@dataclass(frozen=True)
class Pose2:
    """Planar pose (x, y, yaw)."""

    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def compose(self, other: "Pose2") -> "Pose2":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            wrap_angle(self.yaw + other.yaw),
        )

    def inverse(self) -> "Pose2":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2(-c * self.x - s * self.y, s * self.x - c * self.y, wrap_angle(-self.yaw))

    def relative_to(self, other: "Pose2") -> "Pose2":
        """This pose expressed in the frame of ``other`` (other^-1 * self)."""
        return other.inverse().compose(self)

    def transform_points(self, pts):
        pts = np.asarray(pts, dtype=float)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        out = pts.copy()
        out[..., 0] = c * pts[..., 0] - s * pts[..., 1] + self.x
        out[..., 1] = s * pts[..., 0] + c * pts[..., 1] + self.y
        return out
