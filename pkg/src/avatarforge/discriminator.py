"""Pose-conditioned discriminator with projection conditioning and R1.

logit = phi(h(image)) + <psi(label), h(image)> where h is a small conv stack,
phi a linear head, and psi a bias-free linear map so a zeroed label part
contributes exactly zero. Everything in the logit path stays inside the op
subset that supports double-backward, since R1 differentiates through the
image gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    NonFiniteError,
    Tape,
    Tensor,
    affine,
    backward,
    conv2d,
    current_tape,
    matmul,
    tensor,
)


@dataclass(frozen=True)
class DiscConfig:
    image_size: int = 32
    in_channels: int = 3
    channels: tuple[int, ...] = (16, 32, 64)
    feature_dim: int = 64
    label_dim: int = 60
    r1_gamma: float = 1.0

    def __post_init__(self):
        if self.r1_gamma < 0:
            raise ValueError("r1_gamma must be >= 0")
        if self.image_size % (2 ** len(self.channels)) != 0:
            raise ValueError("image_size must be divisible by the conv stride")
        if not self.channels:
            raise ValueError("need at least one conv stage")


def init_discriminator(config: DiscConfig, rng) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    c_in = config.in_channels
    for i, c_out in enumerate(config.channels):
        fan_in = c_in * 9
        params[f"conv{i}.w"] = (rng.standard_normal((c_out, c_in, 3, 3))
                                / math.sqrt(fan_in)).astype(np.float32)
        params[f"conv{i}.b"] = np.zeros(c_out, np.float32)
        c_in = c_out
    side = config.image_size // (2 ** len(config.channels))
    flat = c_in * side * side
    params["head.w"] = (rng.standard_normal((flat, config.feature_dim))
                        / math.sqrt(flat)).astype(np.float32)
    params["head.b"] = np.zeros(config.feature_dim, np.float32)
    params["phi.w"] = (rng.standard_normal((config.feature_dim, 1))
                       / math.sqrt(config.feature_dim)).astype(np.float32)
    params["phi.b"] = np.zeros(1, np.float32)
    # bias-free: a zeroed label must project to exactly zero
    params["psi.w"] = (rng.standard_normal((config.label_dim, config.feature_dim))
                       / math.sqrt(config.label_dim)).astype(np.float32)
    return params


def disc_param_names(config: DiscConfig) -> list[str]:
    names = []
    for i in range(len(config.channels)):
        names += [f"conv{i}.w", f"conv{i}.b"]
    return names + ["head.w", "head.b", "phi.w", "phi.b", "psi.w"]


def features(params: dict, images, config: DiscConfig) -> Tensor:
    """h(image): conv stack with stride-2 slicing, then a linear head."""
    x = images if isinstance(images, Tensor) else tensor(images)
    if x.ndim != 4 or x.shape[1] != config.in_channels \
            or x.shape[2] != config.image_size or x.shape[3] != config.image_size:
        raise ValueError(f"expected (B,{config.in_channels},{config.image_size},"
                         f"{config.image_size}) images, got {tuple(x.shape)}")
    for i in range(len(config.channels)):
        x = conv2d(x, params[f"conv{i}.w"], pad=1)[:, :, ::2, ::2]
        b = params[f"conv{i}.b"]
        x = (x + b.reshape((1, b.shape[0], 1, 1))).leaky_relu()
    flat = x.reshape((x.shape[0], int(np.prod(x.shape[1:]))))
    return affine(flat, params["head.w"], params["head.b"]).leaky_relu()


def discriminate(params: dict, images, labels, config: DiscConfig) -> Tensor:
    """(B,) logits for images (B,C,H,W) and pose labels (B, label_dim)."""
    lab = labels if isinstance(labels, Tensor) else tensor(labels)
    if lab.ndim != 2 or lab.shape[1] != config.label_dim:
        raise ValueError(f"expected labels (B,{config.label_dim}), got {tuple(lab.shape)}")
    h = features(params, images, config)
    phi = affine(h, params["phi.w"], params["phi.b"])
    proj = (matmul(lab, params["psi.w"]) * h).sum(axis=1, keepdims=True)
    return (phi + proj).reshape((h.shape[0],))


def g_loss(fake_logits: Tensor) -> Tensor:
    """Non-saturating generator loss: mean softplus(-logit)."""
    logits = fake_logits if isinstance(fake_logits, Tensor) else tensor(fake_logits)
    return (logits * -1.0).softplus().mean()


def r1_penalty(params: dict, real_images, real_labels, config: DiscConfig) -> Tensor:
    """Batch mean of ||d logit / d image||^2, differentiable in params."""
    penalty, _ = _r1_and_logits(params, real_images, real_labels, config)
    return penalty


def _r1_and_logits(params, real_images, real_labels, config):
    tape = current_tape()
    if tape is None:
        # eager call sites still need a tape to reach the image gradient
        with Tape():
            return _r1_and_logits(params, real_images, real_labels, config)
    arr = real_images.numpy() if isinstance(real_images, Tensor) else np.asarray(real_images)
    x = tensor(arr)
    tape.watch(x)
    logits = discriminate(params, x, real_labels, config)
    (grad_x,) = backward(logits.sum(), [x], build_graph=True)
    penalty = grad_x.square().sum() * (1.0 / arr.shape[0])
    return penalty, logits


def d_loss(params: dict, real_images, real_labels, fake_images, fake_labels,
           config: DiscConfig, gamma: float = None) -> tuple[Tensor, dict]:
    """Non-saturating discriminator loss with R1 on the real batch.

    Detach fake_images at the call site when optimizing D only. Returns
    (loss, stats) where stats holds plain floats for logging.
    """
    if gamma is None:
        gamma = config.r1_gamma
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    fake_logits = discriminate(params, fake_images, fake_labels, config)
    if gamma > 0.0:
        r1, real_logits = _r1_and_logits(params, real_images, real_labels, config)
    else:
        real_logits = discriminate(params, real_images, real_labels, config)
        r1 = None
    gan = fake_logits.softplus().mean() + (real_logits * -1.0).softplus().mean()
    loss = gan if r1 is None else gan + r1 * (gamma / 2.0)
    stats = {
        "d_real": float(real_logits.numpy().mean()),
        "d_fake": float(fake_logits.numpy().mean()),
        "r1": 0.0 if r1 is None else float(r1.numpy()),
    }
    if not np.isfinite(loss.numpy()):
        raise NonFiniteError(f"discriminator loss is non-finite: {stats}")
    return loss, stats
