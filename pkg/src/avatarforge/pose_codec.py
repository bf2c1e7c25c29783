"""Coarse-to-fine pose label encoding and the confident-view sampling policy.

A pose label is a 60-dim vector laid out as
[fine_yaw(40) | fine_pitch(15) | coarse_yaw(3) | coarse_pitch(2)] with
exactly one granularity part active: one yaw-hot and one pitch-hot entry
inside the active part, everything else zero. Which part a training sample
uses is drawn per use from the confidence policy: fine with probability p_h
on confident views, p_l elsewhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .camera import SphericalPose, flip_pose, normalize_yaw

FINE = "fine"
COARSE = "coarse"


@dataclass(frozen=True)
class BinningConfig:
    yaw_bins_fine: int = 40
    pitch_bins_fine: int = 15
    yaw_bins_coarse: int = 3
    pitch_bins_coarse: int = 2
    yaw_range: tuple[float, float] = (-180.0, 180.0)
    pitch_range: tuple[float, float] = (-30.0, 30.0)

    def __post_init__(self):
        for n in (self.yaw_bins_fine, self.pitch_bins_fine,
                  self.yaw_bins_coarse, self.pitch_bins_coarse):
            if n < 1:
                raise ValueError("bin counts must be >= 1")

    @property
    def label_dim(self) -> int:
        return (self.yaw_bins_fine + self.pitch_bins_fine
                + self.yaw_bins_coarse + self.pitch_bins_coarse)

    @property
    def fine_dim(self) -> int:
        return self.yaw_bins_fine + self.pitch_bins_fine


@dataclass(frozen=True)
class ConfidencePolicy:
    yaw_box: float = 60.0
    pitch_box: float = 15.0
    p_h: float = 0.9
    p_l: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.p_l <= self.p_h <= 1.0:
            raise ValueError("require 0 <= p_l <= p_h <= 1")


def bin_index(value: float, lo: float, hi: float, n_bins: int) -> int:
    """Half-open uniform bins [lo + k*w, lo + (k+1)*w); hi clamps into the
    last bin."""
    if not lo <= value <= hi:
        raise ValueError(f"value {value} outside [{lo}, {hi}]")
    width = (hi - lo) / n_bins
    k = int(math.floor((value - lo) / width))
    return min(max(k, 0), n_bins - 1)


def bin_center(k: int, lo: float, hi: float, n_bins: int) -> float:
    width = (hi - lo) / n_bins
    return lo + (k + 0.5) * width


def pose_bins(pose: SphericalPose, config: BinningConfig, part: str) -> tuple[int, int]:
    yaw = normalize_yaw(pose.yaw_deg)
    if part == FINE:
        ky = bin_index(yaw, *config.yaw_range, config.yaw_bins_fine)
        kp = bin_index(pose.pitch_deg, *config.pitch_range, config.pitch_bins_fine)
    elif part == COARSE:
        ky = bin_index(yaw, *config.yaw_range, config.yaw_bins_coarse)
        kp = bin_index(pose.pitch_deg, *config.pitch_range, config.pitch_bins_coarse)
    else:
        raise ValueError(f"unknown label part {part!r}")
    return ky, kp


def label_from_bins(yaw_bin: int, pitch_bin: int, config: BinningConfig,
                    part: str, dtype=np.float32) -> np.ndarray:
    vec = np.zeros(config.label_dim, dtype=dtype)
    if part == FINE:
        vec[yaw_bin] = 1
        vec[config.yaw_bins_fine + pitch_bin] = 1
    elif part == COARSE:
        base = config.fine_dim
        vec[base + yaw_bin] = 1
        vec[base + config.yaw_bins_coarse + pitch_bin] = 1
    else:
        raise ValueError(f"unknown label part {part!r}")
    return vec


def encode(pose: SphericalPose, config: BinningConfig, part: str,
           dtype=np.float32) -> np.ndarray:
    """One-hot yaw and pitch inside the chosen part; the other part is zero."""
    ky, kp = pose_bins(pose, config, part)
    return label_from_bins(ky, kp, config, part, dtype)


def encode_fine_pair(pose: SphericalPose, config: BinningConfig,
                     dtype=np.float32) -> np.ndarray:
    """Fine-part-only encoding (55-dim under defaults) used for generator
    pose conditioning."""
    ky, kp = pose_bins(pose, config, FINE)
    vec = np.zeros(config.fine_dim, dtype=dtype)
    vec[ky] = 1
    vec[config.yaw_bins_fine + kp] = 1
    return vec


def decode_bins(yaw_bin: int, pitch_bin: int, config: BinningConfig,
                part: str, radius: float = 2.7) -> SphericalPose:
    """Bin-center pose for a stored label."""
    if part == FINE:
        yaw = bin_center(yaw_bin, *config.yaw_range, config.yaw_bins_fine)
        pitch = bin_center(pitch_bin, *config.pitch_range, config.pitch_bins_fine)
    elif part == COARSE:
        yaw = bin_center(yaw_bin, *config.yaw_range, config.yaw_bins_coarse)
        pitch = bin_center(pitch_bin, *config.pitch_range, config.pitch_bins_coarse)
    else:
        raise ValueError(f"unknown label part {part!r}")
    return SphericalPose(yaw, pitch, radius)


def is_confident(pose: SphericalPose, policy: ConfidencePolicy) -> bool:
    """Closed box around the front face."""
    return (abs(normalize_yaw(pose.yaw_deg)) <= policy.yaw_box
            and abs(pose.pitch_deg) <= policy.pitch_box)


def sample_part(pose: SphericalPose, policy: ConfidencePolicy, rng) -> str:
    """Fine with probability p_h on confident views, p_l elsewhere."""
    p_fine = policy.p_h if is_confident(pose, policy) else policy.p_l
    return FINE if rng.random() < p_fine else COARSE


def flip_encode(pose: SphericalPose, config: BinningConfig, part: str,
                dtype=np.float32) -> np.ndarray:
    """Label of the horizontally flipped pose: flip the raw pose, re-encode."""
    return encode(flip_pose(pose), config, part, dtype)


def bins_to_json(yaw_bin: int, pitch_bin: int, part: str) -> dict:
    return {"part": part, "yaw_bin": int(yaw_bin), "pitch_bin": int(pitch_bin)}


def bins_from_json(obj: dict) -> tuple[int, int, str]:
    return int(obj["yaw_bin"]), int(obj["pitch_bin"]), obj["part"]
