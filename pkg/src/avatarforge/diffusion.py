"""Conditional latent diffusion over style vectors.

A small MLP denoiser is trained with DDPM noise-prediction MSE on (style,
embedding) pairs drawn from a trained generator, with the condition dropped
at random so classifier-free guidance works at sampling time. Sampling is
deterministic DDIM given a seed; the guided noise estimate is

    eps_hat = lam * eps(w_t, t, y) + (1 - lam) * eps(w_t, t, null)

with the null condition fixed to the zero vector.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import (
    Tape,
    Tensor,
    adam_init,
    adam_step,
    affine,
    backward,
    load_arrays,
    load_meta,
    matmul,
    save_arrays,
    tensor,
)
from .camera import CameraRig, SphericalPose
from .generator import gpc_encoding, map_z, sample_z, synthesize, volume_render_multi
from .metrics import FEATURE_DIM, features
from .training import load_generator_checkpoint


@dataclass(frozen=True)
class NoiseSchedule:
    steps: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 < self.beta_min <= self.beta_max < 1.0:
            raise ValueError("need 0 < beta_min <= beta_max < 1")
        betas = np.zeros(self.steps + 1)
        betas[1:] = np.linspace(self.beta_min, self.beta_max, self.steps)
        alpha_bar = np.ones(self.steps + 1)
        # alpha_bar[0] stays exactly 1: the t=0 limit is the identity
        alpha_bar[1:] = np.cumprod(1.0 - betas[1:])
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bar", alpha_bar)


@dataclass(frozen=True)
class GuidanceConfig:
    lam: float = 5.0
    p_drop: float = 0.2
    ddim_steps: int = 50

    def __post_init__(self):
        if not 0.0 <= self.p_drop <= 1.0:
            raise ValueError("p_drop must be in [0, 1]")
        if self.ddim_steps < 1:
            raise ValueError("ddim_steps must be >= 1")


@dataclass(frozen=True)
class DenoiserConfig:
    d_w: int = 64
    d_y: int = FEATURE_DIM
    d_hidden: int = 128
    d_time: int = 64

    def __post_init__(self):
        if min(self.d_w, self.d_y, self.d_hidden, self.d_time) < 1:
            raise ValueError("all denoiser dims must be >= 1")
        if self.d_time % 2:
            raise ValueError("d_time must be even")


def q_sample(w0, t, noise, schedule: NoiseSchedule):
    """Forward diffusion: w_t = sqrt(ab_t) w0 + sqrt(1 - ab_t) noise."""
    w0 = np.asarray(w0)
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > schedule.steps):
        raise ValueError(f"t out of range [0, {schedule.steps}]")
    shape = t.shape + (1,) * (w0.ndim - t.ndim)
    ab = schedule.alpha_bar[t].reshape(shape)
    return np.sqrt(ab) * w0 + np.sqrt(1.0 - ab) * np.asarray(noise)


def time_embedding(t, d: int) -> np.ndarray:
    t = np.asarray(t, np.float64).reshape(-1)
    half = d // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def init_denoiser(config: DenoiserConfig, rng) -> dict[str, np.ndarray]:
    h = config.d_hidden

    def w(n_in, n_out):
        scale = 1.0 / math.sqrt(n_in)
        return (rng.standard_normal((n_in, n_out)) * scale).astype(np.float32)

    return {
        "in.w": w(config.d_w, h),
        "in.b": np.zeros(h, np.float32),
        # zero condition projection: an untouched conditional branch (p_drop=1
        # training) then predicts independently of y, exactly
        "y.w": np.zeros((config.d_y, h), np.float32),
        "t.w": w(config.d_time, h),
        "h1.w": w(h, h),
        "h1.b": np.zeros(h, np.float32),
        "h2.w": w(h, h),
        "h2.b": np.zeros(h, np.float32),
        # zero output layer: the first batch predicts eps = 0, loss ~ 1
        "out.w": np.zeros((h, config.d_w), np.float32),
        "out.b": np.zeros(config.d_w, np.float32),
    }


def _pdata(p):
    # ndarrays also expose a .data memoryview, so test the type
    return p.data if isinstance(p, Tensor) else np.asarray(p)


def denoise(params: dict, w_t, t, y, config: DenoiserConfig):
    """Noise prediction eps_theta(w_t, t, y); y = 0 is the null condition."""
    dt = _pdata(params["in.w"]).dtype
    x = np.asarray(w_t, dt)
    yc = np.asarray(y, dt)
    if x.ndim != 2 or x.shape[1] != config.d_w:
        raise ValueError(f"w_t must be (B, {config.d_w}), got {x.shape}")
    if yc.shape != (x.shape[0], config.d_y):
        raise ValueError(f"y must be ({x.shape[0]}, {config.d_y}), "
                         f"got {yc.shape}")
    t_arr = np.broadcast_to(np.asarray(t), (x.shape[0],))
    emb = time_embedding(t_arr, config.d_time).astype(dt)
    h = affine(x, params["in.w"], params["in.b"]) \
        + matmul(emb, params["t.w"]) + matmul(yc, params["y.w"])
    h = h.leaky_relu()
    h = affine(h, params["h1.w"], params["h1.b"]).leaky_relu()
    h = affine(h, params["h2.w"], params["h2.b"]).leaky_relu()
    return affine(h, params["out.w"], params["out.b"])


def guide(eps_c, eps_u, lam: float):
    """The guidance combination, kept separate so the rule is testable."""
    return lam * eps_c + (1.0 - lam) * eps_u


def guided_eps(params: dict, w_t, t, y, lam: float,
               config: DenoiserConfig) -> np.ndarray:
    eps_c = denoise(params, w_t, t, y, config).numpy()
    eps_u = denoise(params, w_t, t, np.zeros_like(np.asarray(y)),
                    config).numpy()
    return guide(eps_c, eps_u, lam)


def train_denoiser(w0: np.ndarray, y: np.ndarray, config: DenoiserConfig,
                   schedule: NoiseSchedule, guidance: GuidanceConfig, rng, *,
                   iterations: int = 2000, batch_size: int = 128,
                   lr: float = 1e-4) -> tuple[dict, dict]:
    """Noise-prediction MSE over (style, condition) pairs.

    Returns (params, stats); stats carries the loss curve and the realized
    condition-drop rate.
    """
    w0 = np.asarray(w0, np.float32)
    y = np.asarray(y, np.float32)
    if w0.ndim != 2 or w0.shape[1] != config.d_w:
        raise ValueError(f"w0 must be (n, {config.d_w}), got {w0.shape}")
    if y.shape != (w0.shape[0], config.d_y):
        raise ValueError(f"y must be ({w0.shape[0]}, {config.d_y}), "
                         f"got {y.shape}")
    n = w0.shape[0]
    params = {k: tensor(v) for k, v in init_denoiser(config, rng).items()}
    names = list(params)
    state = adam_init(params, lr)
    losses = []
    dropped = seen = 0
    for _ in range(iterations):
        idx = rng.integers(0, n, batch_size)
        t = rng.integers(1, schedule.steps + 1, batch_size)
        noise = rng.standard_normal((batch_size, config.d_w)).astype(np.float32)
        w_t = q_sample(w0[idx], t, noise, schedule)
        drop = rng.random(batch_size) < guidance.p_drop
        y_b = y[idx].copy()
        y_b[drop] = 0.0
        with Tape() as tape:
            for p in params.values():
                tape.watch(p)
            eps = denoise(params, w_t, t, y_b, config)
            loss = (eps - noise).square().mean()
            grads = backward(loss, [params[k] for k in names])
        adam_step(params, dict(zip(names, grads)), state)
        losses.append(float(loss.numpy()))
        dropped += int(drop.sum())
        seen += batch_size
    stats = {"loss": losses, "dropped": dropped, "seen": seen,
             "drop_rate": dropped / seen}
    return {k: p.data.copy() for k, p in params.items()}, stats


def sample_pairs(generator_run, n_pairs: int, rng, *,
                 rig: Optional[CameraRig] = None, jitter_deg: float = 5.0,
                 chunk: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """(w, y) pairs: mapped styles and embeddings of their front renders.

    Poses are near-frontal with uniform +-jitter_deg in yaw and pitch; the
    render is conditioned on its own pose so the pair is aligned.
    """
    g_params, gen_cfg = load_generator_checkpoint(generator_run)
    rig = rig or CameraRig()
    ws, ys = [], []
    left = int(n_pairs)
    while left > 0:
        m = min(chunk, left)
        z = sample_z(rng, gen_cfg, m)
        poses = [SphericalPose(rng.uniform(-jitter_deg, jitter_deg),
                               rng.uniform(-jitter_deg, jitter_deg))
                 for _ in range(m)]
        gpc = np.stack([gpc_encoding(p) for p in poses])
        w = map_z(g_params, z, gpc, gen_cfg).numpy()
        planes = synthesize(g_params, w, gen_cfg)
        images, _ = volume_render_multi(g_params, planes, poses, rig, gen_cfg)
        ws.append(w)
        ys.append(features(images.numpy()).astype(np.float32))
        left -= m
    return np.concatenate(ws), np.concatenate(ys)


def train_prior(generator_run, n_pairs: int, schedule: NoiseSchedule,
                guidance: GuidanceConfig, seed: int, out_dir, *,
                config: Optional[DenoiserConfig] = None,
                rig: Optional[CameraRig] = None, iterations: int = 2000,
                batch_size: int = 128, lr: float = 1e-4,
                jitter_deg: float = 5.0) -> Path:
    """Train the style prior against a trained generator; returns the
    checkpoint directory."""
    _, gen_cfg = load_generator_checkpoint(generator_run)
    config = config or DenoiserConfig(d_w=gen_cfg.d_w)
    if config.d_w != gen_cfg.d_w:
        raise ValueError(f"denoiser d_w {config.d_w} does not match "
                         f"generator d_w {gen_cfg.d_w}")
    rng = np.random.default_rng(seed)
    w0, y = sample_pairs(generator_run, n_pairs, rng, rig=rig,
                         jitter_deg=jitter_deg)
    params, stats = train_denoiser(w0, y, config, schedule, guidance, rng,
                                   iterations=iterations,
                                   batch_size=batch_size, lr=lr)
    meta = {
        "config": dataclasses.asdict(config),
        "schedule": dataclasses.asdict(schedule),
        "guidance": dataclasses.asdict(guidance),
        "seed": int(seed),
        "generator": str(generator_run),
        "n_pairs": int(n_pairs),
        "final_loss": stats["loss"][-1],
        "drop_rate": stats["drop_rate"],
    }
    save_arrays(str(out_dir), params, meta)
    return Path(out_dir)


def load_denoiser(denoiser_dir) -> tuple[dict, DenoiserConfig, dict]:
    params = load_arrays(str(denoiser_dir))
    meta = load_meta(str(denoiser_dir))
    return params, DenoiserConfig(**meta["config"]), meta


def encode_condition(front_image) -> np.ndarray:
    """Deterministic embedding of one image via the shared eval extractor."""
    img = np.asarray(front_image, np.float32)
    if img.ndim != 3:
        raise ValueError(f"expected one (3, H, W) image, got shape {img.shape}")
    return features(img[None])[0].astype(np.float32)


def ddim_timesteps(total: int, n: int) -> np.ndarray:
    """Evenly spaced ascending subset [0, ..., total] with n update steps."""
    if not 1 <= n <= total:
        raise ValueError(f"ddim steps must be in [1, {total}], got {n}")
    ts = np.round(np.linspace(0.0, total, n + 1)).astype(np.int64)
    if np.any(np.diff(ts) < 1):
        raise ValueError("rounded step grid collapsed; lower ddim steps")
    return ts


def ddim_step(x, t: int, t_next: int, eps, schedule: NoiseSchedule):
    """One deterministic (eta = 0) update from t to t_next < t."""
    # chain math stays float64 even when the denoiser emits float32
    x = np.asarray(x, np.float64)
    eps = np.asarray(eps, np.float64)
    ab_t = schedule.alpha_bar[t]
    ab_n = schedule.alpha_bar[t_next]
    x0 = (x - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
    return math.sqrt(ab_n) * x0 + math.sqrt(1.0 - ab_n) * eps


def _as_batch(y, d_y: int):
    y = np.asarray(y)
    if y.ndim == 1:
        return y[None], True
    return y, False


def ddim_sample(params: dict, y, schedule: NoiseSchedule,
                guidance: GuidanceConfig, rng,
                config: DenoiserConfig) -> np.ndarray:
    """Deterministic DDIM given the rng's initial draw; (B, d_w) float64."""
    yb, single = _as_batch(y, config.d_y)
    b = yb.shape[0]
    x = rng.standard_normal((b, config.d_w))
    ts = ddim_timesteps(schedule.steps, guidance.ddim_steps)
    for i in range(len(ts) - 1, 0, -1):
        t, t_next = int(ts[i]), int(ts[i - 1])
        eps = guided_eps(params, x, t, yb, guidance.lam, config)
        x = ddim_step(x, t, t_next, eps, schedule)
    return x[0] if single else x


def ddpm_sample(params: dict, y, schedule: NoiseSchedule,
                guidance: GuidanceConfig, rng,
                config: DenoiserConfig) -> np.ndarray:
    """Ancestral sampler over every step; the reference for DDIM tests.

    Posterior variance beta_tilde = (1 - ab_{t-1}) / (1 - ab_t) * beta_t,
    which is exactly 0 at t = 1.
    """
    yb, single = _as_batch(y, config.d_y)
    b = yb.shape[0]
    x = rng.standard_normal((b, config.d_w))
    for t in range(schedule.steps, 0, -1):
        eps = np.asarray(guided_eps(params, x, t, yb, guidance.lam, config),
                         np.float64)
        ab_t = schedule.alpha_bar[t]
        ab_p = schedule.alpha_bar[t - 1]
        beta = schedule.betas[t]
        mean = (x - beta / math.sqrt(1.0 - ab_t) * eps) / math.sqrt(1.0 - beta)
        var = (1.0 - ab_p) / (1.0 - ab_t) * beta
        x = mean + math.sqrt(var) * rng.standard_normal(x.shape)
    return x[0] if single else x


def generate_conditioned(image, generator_run, denoiser_dir, poses, *,
                         rig: Optional[CameraRig] = None,
                         guidance: Optional[GuidanceConfig] = None,
                         seed: int = 0) -> dict:
    """Image-conditioned generation: the sampled style replaces the mapping
    network, so the input pose is never estimated.

    Returns w, rendered views at the caller poses, and the tri-planes; the
    planes plus the generator decoder are the handle mesh extraction needs.
    """
    g_params, gen_cfg = load_generator_checkpoint(generator_run)
    d_params, d_cfg, meta = load_denoiser(denoiser_dir)
    if d_cfg.d_w != gen_cfg.d_w:
        raise ValueError(f"denoiser d_w {d_cfg.d_w} does not match generator "
                         f"d_w {gen_cfg.d_w}")
    schedule = NoiseSchedule(**meta["schedule"])
    guidance = guidance or GuidanceConfig(**meta["guidance"])
    y = encode_condition(image)
    rng = np.random.default_rng(seed)
    w = ddim_sample(d_params, y, schedule, guidance, rng, d_cfg)
    planes = synthesize(g_params, w[None].astype(np.float32), gen_cfg).numpy()
    pose_list = [poses] if isinstance(poses, SphericalPose) else list(poses)
    rig = rig or CameraRig()
    tiled = np.repeat(planes, len(pose_list), axis=0)
    views, _ = volume_render_multi(g_params, tiled, pose_list, rig, gen_cfg)
    return {"w": w, "views": views.numpy(), "planes": planes,
            "poses": pose_list}
