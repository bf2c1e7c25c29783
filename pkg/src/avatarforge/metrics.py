"""Fixed seeded feature extractor, Frechet distance, and the debiased
random-view evaluation protocol.

Absolute FD values come from an untrained seeded conv net, not a pretrained
classifier, so they are NOT comparable to published FID numbers; only
orderings and ratios within this codebase carry meaning.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .camera import CameraRig, SphericalPose, sample_pose
from .generator import GeneratorConfig, render_batch, sample_z
from .oracle import load_image, load_manifest
from .prompts import BACK, FRONT, SIDE, classify_view

FEATURE_SEED = 0x5EED
FEATURE_DIM = 64
FEATURE_CHANNELS = (8, 16, 32)
CANONICAL_SIZE = 32

_BUCKETS = (FRONT, SIDE, BACK)


@lru_cache(maxsize=1)
def _extractor_weights():
    rng = np.random.default_rng(FEATURE_SEED)
    convs = []
    c_in = 3
    for c_out in FEATURE_CHANNELS:
        w = rng.standard_normal((c_out, c_in, 3, 3)) / np.sqrt(c_in * 9.0)
        b = rng.standard_normal(c_out) * 0.1
        convs.append((w, b))
        c_in = c_out
    side = CANONICAL_SIZE // (2 ** len(FEATURE_CHANNELS))
    flat = c_in * side * side
    proj = rng.standard_normal((flat, FEATURE_DIM)) / np.sqrt(flat)
    return convs, proj


def _conv_stride2(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # einsum with optimize=False keeps arithmetic in numpy's own loops,
    # independent of the BLAS backend, so embeddings are bitwise stable
    n, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, w.shape[0], h // 2, wd // 2), np.float64)
    for di in range(3):
        for dj in range(3):
            patch = xp[:, :, di:di + h:2, dj:dj + wd:2]
            out += np.einsum("nchw,oc->nohw", patch, w[:, :, di, dj],
                             optimize=False)
    return out


def features(images: np.ndarray) -> np.ndarray:
    """Embeddings (n, FEATURE_DIM) float64 from a fixed untrained conv net."""
    x = np.asarray(images, np.float64)
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != CANONICAL_SIZE \
            or x.shape[3] != CANONICAL_SIZE:
        raise ValueError(f"expected (n,3,{CANONICAL_SIZE},{CANONICAL_SIZE}) "
                         f"images, got {x.shape}")
    convs, proj = _extractor_weights()
    x = x * 2.0 - 1.0
    for w, b in convs:
        x = _conv_stride2(x, w) + b.reshape(1, -1, 1, 1)
        x = np.where(x > 0.0, x, 0.2 * x)
    flat = x.reshape(x.shape[0], -1)
    return np.einsum("nf,fd->nd", flat, proj, optimize=False)


@dataclass(frozen=True)
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int


def gaussian_stats(embeddings: np.ndarray) -> GaussianStats:
    emb = np.asarray(embeddings, np.float64)
    if emb.ndim != 2 or emb.shape[0] < 2:
        raise ValueError("need at least 2 embeddings of equal dimension")
    mu = emb.mean(axis=0)
    sigma = np.cov(emb, rowvar=False)
    sigma = 0.5 * (sigma + sigma.T)
    return GaussianStats(mu=mu, sigma=sigma, n=emb.shape[0])


def _psd_sqrt(sigma: np.ndarray) -> np.ndarray:
    if not np.allclose(sigma, sigma.T, atol=1e-8):
        raise ValueError("covariance must be symmetric to 1e-8")
    vals, vecs = np.linalg.eigh(sigma)
    vals = np.clip(vals, 0.0, None)  # clamp rounding-level negatives
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)."""
    if a.mu.shape != b.mu.shape:
        raise ValueError(f"dimension mismatch: {a.mu.shape} vs {b.mu.shape}")
    d = a.mu.shape[0]
    if min(a.n, b.n) < d + 1:
        warnings.warn(f"sample count below d+1={d + 1}; covariance is rank "
                      "deficient and the distance is biased", stacklevel=2)
    root_a = _psd_sqrt(a.sigma)
    inner = root_a @ b.sigma @ root_a
    inner = 0.5 * (inner + inner.T)
    cross = np.sum(np.sqrt(np.clip(np.linalg.eigvalsh(inner), 0.0, None)))
    diff = a.mu - b.mu
    value = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma)
                  - 2.0 * cross)
    return max(value, 0.0)


def gan_sampler(params: dict, config: GeneratorConfig, rig: CameraRig):
    """Batch sampler over (conditioning poses, rendering poses) for eval."""
    def generate(cond_poses, render_poses, rng) -> np.ndarray:
        z = sample_z(rng, config, len(cond_poses))
        return render_batch(params, z, cond_poses, render_poses, rig, config)
    return generate


def dataset_stats(dataset_dir, manifest: dict = None):
    """Embedding stats of all dataset images, overall and per view bucket.

    Records are bucketed by their annotated (nominal) pose: that is the label
    the discriminator saw, so it is the axis the ablation compares along.
    """
    manifest = manifest or load_manifest(dataset_dir)
    images, buckets = [], []
    for entry in manifest["records"]:
        images.append(load_image(dataset_dir, entry))
        buckets.append(classify_view(entry["nominal_pose"]["yaw_deg"]))
    emb = features(np.stack(images))
    overall = gaussian_stats(emb)
    per_bucket = {}
    for name in _BUCKETS:
        idx = [i for i, b in enumerate(buckets) if b == name]
        per_bucket[name] = gaussian_stats(emb[idx]) if len(idx) >= 2 else None
    return overall, per_bucket


def eval_protocol(generate_batch, dataset_dir, n_samples: int,
                  rng: np.random.Generator, *, seed=None, batch_size: int = 64,
                  real_stats=None) -> dict:
    """Debiased random-view FD between generated samples and the dataset.

    The conditioning pose and the rendered pose are drawn from separate
    child generators (rng.spawn order: conditioning, rendering, latents), so
    their joint distribution factorizes; sampling one stream never shifts
    the other. Returns {overall, per_bucket:{front, side, back}, n, seed}.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    cond_rng, render_rng, gen_rng = rng.spawn(3)
    if real_stats is None:
        real_stats = dataset_stats(dataset_dir)
    real_overall, real_buckets = real_stats

    chunks, buckets = [], []
    done = 0
    while done < n_samples:
        b = min(batch_size, n_samples - done)
        cond = [sample_pose(cond_rng) for _ in range(b)]
        render = [sample_pose(render_rng) for _ in range(b)]
        images = generate_batch(cond, render, gen_rng)
        chunks.append(features(np.asarray(images, np.float64)))
        buckets += [classify_view(p.yaw_deg) for p in render]
        done += b
    emb = np.concatenate(chunks, axis=0)

    per_bucket = {}
    for name in _BUCKETS:
        idx = [i for i, v in enumerate(buckets) if v == name]
        real = real_buckets.get(name)
        if len(idx) < 2 or real is None:
            per_bucket[name.lower()] = None
        else:
            per_bucket[name.lower()] = frechet(gaussian_stats(emb[idx]), real)
    return {
        "overall": frechet(gaussian_stats(emb), real_overall),
        "per_bucket": per_bucket,
        "n": int(n_samples),
        "seed": seed,
    }
