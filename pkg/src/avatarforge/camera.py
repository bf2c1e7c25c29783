"""Head-centered spherical camera model.

Conventions (fixed across renderer, codec, and mesh export): world up is +y,
the avatar's front face looks along +z, so a camera at yaw 0 / pitch 0 sits
on the +z axis looking back at the origin. Yaw rotates around +y (positive
yaw moves the camera toward +x), pitch lifts it toward +y.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

YAW_RANGE = (-180.0, 180.0)   # half-open
PITCH_RANGE = (-30.0, 30.0)   # closed


def normalize_yaw(yaw_deg: float) -> float:
    """Wrap into [-180, 180)."""
    y = math.fmod(yaw_deg + 180.0, 360.0)
    if y < 0:
        y += 360.0
    return y - 180.0


@dataclass(frozen=True)
class SphericalPose:
    yaw_deg: float
    pitch_deg: float
    radius: float = 2.7

    def __post_init__(self):
        object.__setattr__(self, "yaw_deg", normalize_yaw(float(self.yaw_deg)))
        object.__setattr__(self, "pitch_deg", float(self.pitch_deg))
        object.__setattr__(self, "radius", float(self.radius))
        if not PITCH_RANGE[0] <= self.pitch_deg <= PITCH_RANGE[1]:
            raise ValueError(f"pitch {self.pitch_deg} outside {PITCH_RANGE}")
        if not self.radius > 0:
            raise ValueError("radius must be positive")

    def to_json(self) -> dict:
        return {"yaw_deg": self.yaw_deg, "pitch_deg": self.pitch_deg,
                "radius": self.radius}

    @staticmethod
    def from_json(obj: dict) -> "SphericalPose":
        return SphericalPose(obj["yaw_deg"], obj["pitch_deg"], obj["radius"])


@dataclass(frozen=True)
class CameraRig:
    fx: float = 34.0
    fy: float = 34.0
    cx: float = 15.5
    cy: float = 15.5
    width: int = 32
    height: int = 32
    near: float = 1.7
    far: float = 3.7

    def __post_init__(self):
        if not (0 < self.near < self.far):
            raise ValueError("require 0 < near < far")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def to_json(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "near": self.near, "far": self.far}

    @staticmethod
    def from_json(obj: dict) -> "CameraRig":
        return CameraRig(**obj)


def sample_pose(rng: np.random.Generator,
                yaw_range: tuple[float, float] = YAW_RANGE,
                pitch_range: tuple[float, float] = PITCH_RANGE,
                radius: float = 2.7) -> SphericalPose:
    """Uniform independent yaw/pitch draw; deterministic given the rng state."""
    if yaw_range[1] < yaw_range[0] or pitch_range[1] < pitch_range[0]:
        raise ValueError("empty pose range")
    # one draw each even for degenerate ranges, so rng call counts are stable
    yaw = float(rng.uniform(yaw_range[0], yaw_range[1]))
    pitch = float(rng.uniform(pitch_range[0], pitch_range[1]))
    return SphericalPose(yaw, pitch, radius)


def camera_position(pose: SphericalPose) -> np.ndarray:
    yaw = math.radians(pose.yaw_deg)
    pitch = math.radians(pose.pitch_deg)
    return pose.radius * np.array([
        math.sin(yaw) * math.cos(pitch),
        math.sin(pitch),
        math.cos(yaw) * math.cos(pitch),
    ])


def extrinsics(pose: SphericalPose) -> np.ndarray:
    """4x4 camera-to-world matrix; the camera's -z axis points at the origin."""
    p = camera_position(pose)
    zc = p / pose.radius
    up = np.array([0.0, 1.0, 0.0])
    xc = np.cross(up, zc)
    norm = math.sqrt(float(np.sum(xc * xc)))
    if norm < 1e-9:
        raise ValueError("pose looks along the up axis (gimbal)")
    xc = xc / norm
    yc = np.cross(zc, xc)
    mat = np.eye(4)
    mat[:3, 0] = xc
    mat[:3, 1] = yc
    mat[:3, 2] = zc
    mat[:3, 3] = p
    return mat


def pixel_directions(rig: CameraRig) -> np.ndarray:
    """Unit ray directions in the camera frame, shape (H, W, 3).

    Pixel (cx, cy) maps to the -z axis; +x is screen right, +y screen up
    (image row 0 is the top).
    """
    xs = (np.arange(rig.width, dtype=np.float64) - rig.cx) / rig.fx
    ys = -(np.arange(rig.height, dtype=np.float64) - rig.cy) / rig.fy
    dx, dy = np.meshgrid(xs, ys)
    dirs = np.stack([dx, dy, -np.ones_like(dx)], axis=-1)
    return dirs / np.sqrt(np.sum(dirs * dirs, axis=-1, keepdims=True))


def rays(pose: SphericalPose, rig: CameraRig) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel world-space rays: (origin (3,), directions (H, W, 3))."""
    mat = extrinsics(pose)
    dirs_cam = pixel_directions(rig)
    dirs = dirs_cam @ mat[:3, :3].T
    return mat[:3, 3].copy(), dirs


def flip_pose(pose: SphericalPose) -> SphericalPose:
    return SphericalPose(normalize_yaw(-pose.yaw_deg), pose.pitch_deg, pose.radius)
