"""Shared volume-rendering quadrature.

One compositing formula serves both the analytic reference renderer and the
differentiable generator: alpha_i = 1 - exp(-sigma_i * delta_i), exclusive
transmittance T_i = exp(-sum_{j<i} sigma_j * delta_j), color = sum T_i alpha_i
rgb_i + (1 - sum T_i alpha_i) * background. The helpers dispatch on input
type so numpy arrays and taped tensors run the identical expression.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .autodiff import Tensor
from .camera import CameraRig, SphericalPose, rays


def _exp(x):
    return x.exp() if isinstance(x, Tensor) else np.exp(x)


def _cumsum_last(x):
    if isinstance(x, Tensor):
        return x.cumsum(x.ndim - 1)
    return np.cumsum(x, axis=-1)


def _sum_axis(x, axis: int):
    if isinstance(x, Tensor):
        return x.sum(axis=axis % x.ndim)
    return np.sum(x, axis=axis)


def _expand_last(x):
    return x.reshape(tuple(x.shape) + (1,))


def ray_depths(near: float, far: float, n_samples: int,
               rng=None) -> tuple[np.ndarray, float]:
    """Sample depths on [near, far]: midpoints by default, stratified when an
    rng is given. Returns (depths (n,), uniform bin width)."""
    if n_samples < 2:
        raise ValueError("need at least 2 samples per ray")
    delta = (far - near) / n_samples
    offsets = rng.random(n_samples) if rng is not None else 0.5
    t = near + (np.arange(n_samples) + offsets) * delta
    return t, delta


def transmittance_weights(sigma, delta: float):
    """Per-sample compositing weights w_i = T_i * alpha_i and their ray sum.

    sigma has samples on the last axis; delta is the uniform spacing.
    """
    sd = sigma * float(delta)
    inclusive = _cumsum_last(sd)
    trans = _exp(sd - inclusive)  # exp(-exclusive_cumsum)
    alpha = 1.0 - _exp(sd * -1.0)
    weights = trans * alpha
    return weights, _sum_axis(weights, -1)


def composite(weights, acc, rgb, background):
    """color = sum_i w_i rgb_i + (1 - acc) * background.

    weights (..., n), acc (...,), rgb (..., n, 3), background (3,).
    """
    color = _sum_axis(_expand_last(weights) * rgb, rgb.ndim - 2)
    bg = np.asarray(background, dtype=np.float64).reshape(
        (1,) * (color.ndim - 1) + (3,))
    if isinstance(color, Tensor):
        bg = bg.astype(color.dtype)
    return color + _expand_last(1.0 - acc) * bg


def expected_depth(weights: np.ndarray, acc: np.ndarray, t: np.ndarray,
                   far: float) -> np.ndarray:
    """Expected termination depth; residual transmittance terminates at far."""
    return (weights * t).sum(axis=-1) + (1.0 - acc) * far


def ray_points(pose: SphericalPose, rig: CameraRig, n_samples: int,
               rng=None):
    """Sample points along every pixel ray.

    Returns (points (H,W,n,3), depths (n,), delta).
    """
    origin, dirs = rays(pose, rig)
    t, delta = ray_depths(rig.near, rig.far, n_samples, rng)
    points = origin + dirs[:, :, None, :] * t[None, None, :, None]
    return points, t, delta


def render_field(field_fn, pose: SphericalPose, rig: CameraRig,
                 n_samples: int, background, rng=None):
    """Reference (non-differentiable) render of an arbitrary radiance field.

    field_fn maps points (N,3) -> (sigma (N,), rgb (N,3)).
    Returns (color (H,W,3), acc (H,W), depth (H,W)).
    """
    points, t, delta = ray_points(pose, rig, n_samples, rng)
    h, w, n, _ = points.shape
    sigma, rgb = field_fn(points.reshape(-1, 3))
    sigma = np.asarray(sigma, dtype=np.float64).reshape(h, w, n)
    rgb = np.asarray(rgb, dtype=np.float64).reshape(h, w, n, 3)
    weights, acc = transmittance_weights(sigma, delta)
    color = composite(weights, acc, rgb, background)
    depth = expected_depth(weights, acc, t, rig.far)
    return color, acc, depth
