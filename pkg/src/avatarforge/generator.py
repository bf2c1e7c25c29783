"""Toy EG3D-style generator: mapping network with generator pose
conditioning, affine tri-plane synthesis, point decoding, and differentiable
volume rendering through the shared quadrature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import volume
from .autodiff import Tensor, affine, apply, grid_sample_bilinear, tensor
from .camera import CameraRig, SphericalPose
from .pose_codec import BinningConfig, encode_fine_pair
from .volume import composite, ray_points, transmittance_weights


@dataclass(frozen=True)
class GeneratorConfig:
    d_z: int = 64
    d_w: int = 64
    d_hidden: int = 128
    plane_channels: int = 8
    plane_res: int = 32
    decoder_hidden: int = 32
    samples_per_ray: int = 12
    gpc_swap_prob: float = 0.5
    background: tuple[float, float, float] = (0.85, 0.85, 0.85)
    sigma_bias: float = -0.433  # softplus(-0.433) ~ 0.5, a gentle haze at init

    def __post_init__(self):
        if self.samples_per_ray < 2:
            raise ValueError("samples_per_ray must be >= 2")

    @property
    def gpc_dim(self) -> int:
        cfg = BinningConfig()
        return cfg.fine_dim

    @property
    def plane_param_count(self) -> int:
        return 3 * self.plane_channels * self.plane_res ** 2


def _orthogonal(rng, n_in: int, n_out: int, gain: float = 1.0) -> np.ndarray:
    """Orthogonal (n_in, n_out) matrix for the affine op's (in, out) layout."""
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return (gain * q[:n_in, :n_out]).astype(np.float32)


def init_generator(config: GeneratorConfig, rng) -> dict[str, np.ndarray]:
    """Parameter dict; orthogonal init for matrices, zeros for biases."""
    d_in = config.d_z + config.gpc_dim
    h, w_dim, c = config.d_hidden, config.d_w, config.decoder_hidden
    params = {
        "map.w0": _orthogonal(rng, d_in, h),
        "map.b0": np.zeros(h, np.float32),
        "map.w1": _orthogonal(rng, h, h),
        "map.b1": np.zeros(h, np.float32),
        "map.w2": _orthogonal(rng, h, w_dim),
        "map.b2": np.zeros(w_dim, np.float32),
        "syn.w": (rng.standard_normal(
            (w_dim, config.plane_param_count)).astype(np.float32)
            / math.sqrt(w_dim)),
        "syn.b": np.zeros(config.plane_param_count, np.float32),
        "dec.w0": _orthogonal(rng, config.plane_channels, c),
        "dec.b0": np.zeros(c, np.float32),
        "dec.sigma_w": _orthogonal(rng, c, 1, gain=0.1),
        "dec.sigma_b": np.full(1, config.sigma_bias, np.float32),
        "dec.rgb_w": _orthogonal(rng, c, 3, gain=0.1),
        "dec.rgb_b": np.zeros(3, np.float32),
    }
    return params


def sample_z(rng, config: GeneratorConfig, batch: int = 1) -> np.ndarray:
    return rng.standard_normal((batch, config.d_z)).astype(np.float32)


def gpc_encoding(pose: SphericalPose, config: Optional[BinningConfig] = None
                 ) -> np.ndarray:
    """Fine-part pose encoding used for generator pose conditioning."""
    return encode_fine_pair(pose, config or BinningConfig())


def map_z(params: dict, z, gpc_label, config: GeneratorConfig) -> Tensor:
    """w = MLP(concat(z, gpc_label)); inputs (B,d_z) and (B,gpc_dim)."""
    z = z if isinstance(z, Tensor) else tensor(z)
    gpc_label = (gpc_label if isinstance(gpc_label, Tensor)
                 else tensor(gpc_label))
    if z.shape[1] != config.d_z or gpc_label.shape[1] != config.gpc_dim:
        raise ValueError(f"expected z (B,{config.d_z}) and label "
                         f"(B,{config.gpc_dim}), got {z.shape} {gpc_label.shape}")
    x = apply("concat", z, gpc_label, axis=1)
    x = affine(x, params["map.w0"], params["map.b0"]).leaky_relu()
    x = affine(x, params["map.w1"], params["map.b1"]).leaky_relu()
    return affine(x, params["map.w2"], params["map.b2"])


def synthesize(params: dict, w, config: GeneratorConfig) -> Tensor:
    """Affine decode of w (B,d_w) into planes (B,3C,H,W); plane order is
    XY, XZ, YZ along the channel blocks."""
    w = w if isinstance(w, Tensor) else tensor(w)
    flat = affine(w, params["syn.w"], params["syn.b"])
    c, r = config.plane_channels, config.plane_res
    return flat.reshape((w.shape[0], 3 * c, r, r))


def sample_triplane(planes, points, config: GeneratorConfig):
    """Feature per point: bilinear(XY at (x,y)) + bilinear(XZ at (x,z)) +
    bilinear(YZ at (y,z)). planes (B,3C,H,W), points (B,N,3) in [-1,1]."""
    c = config.plane_channels
    if isinstance(points, Tensor):
        xy = points[:, :, 0:2]
        xz = apply("concat", points[:, :, 0:1], points[:, :, 2:3], axis=2)
        yz = points[:, :, 1:3]
        coords = apply("concat", xy, xz, yz, axis=0)
    else:
        pts = np.asarray(points, dtype=planes.dtype)
        coords = np.concatenate([pts[:, :, (0, 1)], pts[:, :, (0, 2)],
                                 pts[:, :, (1, 2)]], axis=0)
    # one plane-batched lookup instead of three: blocks stack along batch
    stacked = apply("concat", planes[:, 0 * c:1 * c], planes[:, 1 * c:2 * c],
                    planes[:, 2 * c:3 * c], axis=0)
    f = grid_sample_bilinear(stacked, coords)
    b = planes.shape[0]
    return f[0:b] + f[b:2 * b] + f[2 * b:3 * b]


def decode(params: dict, feature):
    """(sigma, rgb) heads; feature (..., C) flattened to rows internally."""
    feat = feature if isinstance(feature, Tensor) else tensor(feature)
    lead = tuple(feat.shape[:-1])
    rows = feat.reshape((int(np.prod(lead)), feat.shape[-1]))
    h = affine(rows, params["dec.w0"], params["dec.b0"]).leaky_relu()
    sigma = affine(h, params["dec.sigma_w"], params["dec.sigma_b"]).softplus()
    rgb = affine(h, params["dec.rgb_w"], params["dec.rgb_b"]).sigmoid()
    return sigma.reshape(lead + (1,)), rgb.reshape(lead + (3,))


def volume_render(params: dict, planes, pose: SphericalPose, rig: CameraRig,
                  config: GeneratorConfig, rng=None):
    """Differentiable render of tri-planes (B,3C,H,W) at one pose.

    Returns (rgb (B,3,H,W), alpha (B,H,W)) as tensors on the active tape.
    """
    b = planes.shape[0]
    points, _, delta = ray_points(pose, rig, config.samples_per_ray, rng)
    h, w, n, _ = points.shape
    flat = points.reshape(1, -1, 3).astype(planes.dtype)
    flat = np.broadcast_to(flat, (b, flat.shape[1], 3))

    features = sample_triplane(planes, flat, config)  # (B, HWn, C)
    sigma, rgb = decode(params, features)
    sigma = sigma.reshape((b, h * w, n))
    rgb = rgb.reshape((b, h * w, n, 3))
    weights, acc = transmittance_weights(sigma, delta)
    color = composite(weights, acc, rgb, config.background)  # (B,HW,3)
    image = color.reshape((b, h, w, 3)).transpose((0, 3, 1, 2))
    return image, acc.reshape((b, h, w))


def render_image(params: dict, z: np.ndarray, cond_pose: SphericalPose,
                 render_pose: SphericalPose, rig: CameraRig,
                 config: GeneratorConfig) -> np.ndarray:
    """Convenience eager path: z -> w -> planes -> image (B,3,H,W) numpy."""
    w = map_z(params, z, np.repeat(gpc_encoding(cond_pose)[None], len(z), 0),
              config)
    planes = synthesize(params, w, config)
    image, _ = volume_render(params, planes, render_pose, rig, config)
    return image.numpy()


def volume_render_multi(params: dict, planes, poses, rig: CameraRig,
                        config: GeneratorConfig):
    """volume_render with one pose per plane batch entry.

    Same quadrature as the single-pose path; only the ray origins differ
    per sample. Returns (rgb (B,3,H,W), alpha (B,H,W)).
    """
    b = planes.shape[0]
    if len(poses) != b:
        raise ValueError(f"need {b} poses for a {b}-plane batch, got {len(poses)}")
    stacks = []
    for pose in poses:
        points, _, delta = ray_points(pose, rig, config.samples_per_ray)
        stacks.append(points.reshape(-1, 3))
    h, w, n = rig.height, rig.width, config.samples_per_ray
    flat = np.stack(stacks).astype(planes.dtype)

    features = sample_triplane(planes, flat, config)
    sigma, rgb = decode(params, features)
    sigma = sigma.reshape((b, h * w, n))
    rgb = rgb.reshape((b, h * w, n, 3))
    weights, acc = transmittance_weights(sigma, delta)
    color = composite(weights, acc, rgb, config.background)
    image = color.reshape((b, h, w, 3)).transpose((0, 3, 1, 2))
    return image, acc.reshape((b, h, w))


def render_batch(params: dict, z: np.ndarray, cond_poses, render_poses,
                 rig: CameraRig, config: GeneratorConfig) -> np.ndarray:
    """Eager render with per-sample conditioning and rendering poses.

    Returns images (B,3,H,W) numpy; used by evaluation, where the two pose
    streams vary per sample.
    """
    if not (len(cond_poses) == len(render_poses) == len(z)):
        raise ValueError("z, cond_poses, render_poses must have equal length")
    labels = np.stack([gpc_encoding(p) for p in cond_poses])
    planes = synthesize(params, map_z(params, z, labels, config), config)
    image, _ = volume_render_multi(params, planes, render_poses, rig, config)
    return image.numpy()


def render_field_through_pipeline(field_fn, pose: SphericalPose,
                                  rig: CameraRig, config: GeneratorConfig,
                                  background) -> np.ndarray:
    """Drive the generator's compositing path with an externally supplied
    field; lets tests check the renderer against the reference quadrature."""
    points, _, delta = ray_points(pose, rig, config.samples_per_ray)
    h, w, n, _ = points.shape
    sigma, rgb = field_fn(points.reshape(-1, 3))
    sigma = tensor(np.asarray(sigma, np.float32).reshape(1, h * w, n))
    rgb = tensor(np.asarray(rgb, np.float32).reshape(1, h * w, n, 3))
    weights, acc = transmittance_weights(sigma, delta)
    color = composite(weights, acc, rgb, background)
    return color.reshape((1, h, w, 3)).transpose((0, 3, 1, 2)).numpy()[0]


def generator_param_names(config: GeneratorConfig) -> list[str]:
    return ["map.w0", "map.b0", "map.w1", "map.b1", "map.w2", "map.b2",
            "syn.w", "syn.b", "dec.w0", "dec.b0", "dec.sigma_w",
            "dec.sigma_b", "dec.rgb_w", "dec.rgb_b"]
