"""Procedural stand-in for the pose-guided image backend.

Avatar heads are analytic SDF compositions (ellipsoid head plus feature
spheres blended by smooth-min), shaded from per-style palettes. Rendering
goes through the shared quadrature in volume.py, so the reference renderer
and the generator integrate identically. Dataset synthesis draws poses,
composes prompts, renders depth pose-images at the nominal pose, renders the
avatar at a possibly corrupted true pose, and appends horizontally flipped
copies.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import volume
from .autodiff.serial import canonical_json, read_json
from .camera import CameraRig, SphericalPose, flip_pose, normalize_yaw, sample_pose
from .imageio import depth_to_image
from .pose_codec import (
    COARSE,
    FINE,
    BinningConfig,
    ConfidencePolicy,
    bins_to_json,
    is_confident,
    pose_bins,
)
from .prompts import BACK, PromptTables, classify_view, compose, load_tables

K_SIGMA = 12.0    # peak density deep inside geometry
S_SHARP = 40.0    # sigmoid steepness of the density shell
C_BLEND = 48.0    # softmax sharpness for per-feature color blending
SMIN_K = 0.06     # smooth-min blending radius
MAX_EXTENT = 0.98  # all geometry stays inside the unit sphere

STYLE_PALETTES: dict[str, dict] = {
    "Disney": {"skin": (0.96, 0.80, 0.69), "eye": (0.30, 0.50, 0.80),
               "hair_options": [(0.35, 0.20, 0.08), (0.85, 0.65, 0.20),
                                (0.10, 0.08, 0.06)],
               "bg": (0.88, 0.92, 0.96)},
    "Sculpture": {"skin": (0.68, 0.66, 0.62), "eye": (0.62, 0.60, 0.56),
                  "hair_options": [(0.60, 0.58, 0.54)],
                  "bg": (0.82, 0.82, 0.80)},
    "Dragon Ball": {"skin": (0.98, 0.82, 0.66), "eye": (0.10, 0.10, 0.12),
                    "hair_options": [(0.08, 0.06, 0.05), (0.95, 0.80, 0.15)],
                    "bg": (0.75, 0.88, 0.98)},
    "Avatar": {"skin": (0.35, 0.55, 0.90), "eye": (0.90, 0.80, 0.30),
               "hair_options": [(0.05, 0.05, 0.10)],
               "bg": (0.15, 0.25, 0.35)},
    "Pixel Art": {"skin": (0.90, 0.72, 0.55), "eye": (0.15, 0.15, 0.20),
                  "hair_options": [(0.40, 0.25, 0.10), (0.20, 0.20, 0.20)],
                  "bg": (0.55, 0.75, 0.55)},
    "Anime": {"skin": (0.99, 0.88, 0.80), "eye": (0.25, 0.35, 0.75),
              "hair_options": [(0.20, 0.30, 0.70), (0.80, 0.30, 0.40),
                               (0.15, 0.12, 0.10), (0.90, 0.75, 0.30)],
              "bg": (0.93, 0.90, 0.95)},
    "Sci-Fi": {"skin": (0.75, 0.78, 0.85), "eye": (0.20, 0.90, 0.90),
               "hair_options": [(0.30, 0.70, 0.80), (0.60, 0.20, 0.70)],
               "bg": (0.08, 0.10, 0.16)},
    "Hulk": {"skin": (0.30, 0.65, 0.25), "eye": (0.85, 0.85, 0.75),
             "hair_options": [(0.10, 0.22, 0.08)],
             "bg": (0.70, 0.72, 0.68)},
    "Joker": {"skin": (0.92, 0.92, 0.90), "eye": (0.25, 0.20, 0.20),
              "hair_options": [(0.15, 0.55, 0.25)],
              "bg": (0.45, 0.30, 0.50)},
    "Robot": {"skin": (0.62, 0.65, 0.70), "eye": (0.95, 0.35, 0.15),
              "hair_options": [(0.40, 0.42, 0.48)],
              "bg": (0.20, 0.22, 0.26)},
}

MARK_COLOR = (0.25, 0.15, 0.10)

# category -> (param, value); multiplicative for *_scale, additive for *_shift
ATTRIBUTE_MODIFIERS: dict[str, tuple[str, float]] = {
    "big-eyed": ("eye_scale", 1.35),
    "small-eyed": ("eye_scale", 0.70),
    "round eyes": ("eye_scale", 1.15),
    "narrow eyes": ("eye_scale", 0.85),
    "almond-shaped eyes": ("eye_scale", 0.95),
    "protruding eyes": ("eye_out_shift", 0.02),
    "deep-set eyes": ("eye_out_shift", -0.02),
    "wide-set eyes": ("eye_sep_scale", 1.25),
    "close-set eyes": ("eye_sep_scale", 0.80),
    "big-eared": ("ear_scale", 1.40),
    "small-eared": ("ear_scale", 0.70),
    "long-nosed": ("nose_scale", 1.30),
    "short-nosed": ("nose_scale", 0.80),
    "button nose": ("nose_scale", 0.85),
    "Roman nose": ("nose_scale", 1.20),
    "high-bridged nose": ("nose_y_shift", 0.02),
    "low-bridged nose": ("nose_y_shift", -0.02),
    "upturned nose": ("nose_y_shift", 0.015),
    "downturned nose": ("nose_y_shift", -0.015),
    "square-faced": ("head_x_scale", 1.10),
    "thin-faced": ("head_x_scale", 0.85),
    "round-faced": ("head_x_scale", 1.08),
    "chubby-faced": ("head_x_scale", 1.15),
    "chubby cheeks": ("head_x_scale", 1.08),
    "hollow cheeks": ("head_x_scale", 0.92),
    "oval face": ("head_y_scale", 1.10),
    "heart-shaped face": ("head_y_scale", 1.05),
    "diamond-shaped face": ("head_x_scale", 0.95),
    "bald": ("hair_scale", 0.0),
    "short hair": ("hair_scale", 0.92),
    "long hair": ("hair_scale", 1.15),
    "curly hair": ("hair_scale", 1.10),
    "wavy hair": ("hair_scale", 1.05),
    "bun": ("hair_y_shift", 0.08),
    "bangs": ("hair_z_shift", 0.05),
    "ponytail": ("hair_z_shift", -0.10),
    "blue eyes": ("eye_color", 0.0),
    "black eyes": ("eye_color", 0.0),
    "brown eyes": ("eye_color", 0.0),
    "green eyes": ("eye_color", 0.0),
    "hazel eyes": ("eye_color", 0.0),
    "gray eyes": ("eye_color", 0.0),
}

EYE_COLORS = {
    "blue eyes": (0.25, 0.45, 0.85),
    "black eyes": (0.08, 0.08, 0.08),
    "brown eyes": (0.45, 0.28, 0.12),
    "green eyes": (0.20, 0.60, 0.30),
    "hazel eyes": (0.55, 0.42, 0.18),
    "gray eyes": (0.55, 0.55, 0.60),
}

MARK_CATEGORIES = frozenset({"birthmark", "scar", "tattoo", "beauty mark",
                             "mole", "freckle", "freckles"})


@dataclass(frozen=True)
class AvatarSpec:
    style_id: str
    attributes: tuple[tuple[str, str], ...]
    seed: int
    head_axes: tuple[float, float, float]
    eye_centers: tuple[tuple[float, float, float], tuple[float, float, float]]
    eye_radius: float
    nose_center: tuple[float, float, float]
    nose_radius: float
    ear_centers: tuple[tuple[float, float, float], tuple[float, float, float]]
    ear_radius: float
    hair_center: tuple[float, float, float]
    hair_radius: float
    has_hair: bool
    mark_center: tuple[float, float, float]
    mark_radius: float
    has_mark: bool
    skin_color: tuple[float, float, float]
    eye_color: tuple[float, float, float]
    hair_color: tuple[float, float, float]
    background: tuple[float, float, float]


@dataclass(frozen=True)
class MisalignmentModel:
    delta_max_deg: float = 20.0
    p_flip: float = 0.25

    def __post_init__(self):
        if self.delta_max_deg < 0:
            raise ValueError("delta_max_deg must be >= 0")
        if not 0.0 <= self.p_flip <= 1.0:
            raise ValueError("p_flip must be in [0, 1]")


def _hash_unit(text: str) -> float:
    """Deterministic category hash in [-1, 1]."""
    digest = hashlib.md5(text.encode()).digest()
    return int.from_bytes(digest[:8], "little") / float(2 ** 63) - 1.0


def _surface_z(axes, x: float, y: float) -> float:
    ax, ay, az = axes
    return az * math.sqrt(max(0.0, 1.0 - (x / ax) ** 2 - (y / ay) ** 2))


def spawn_avatar(rng, style_id: str, attributes: dict[str, str]) -> AvatarSpec:
    """Deterministic avatar from (rng draw, style palette, attribute
    modifiers). Always consumes the same number of rng draws."""
    if style_id not in STYLE_PALETTES:
        raise ValueError(f"unknown style {style_id!r}")
    palette = STYLE_PALETTES[style_id]
    seed = int(rng.integers(0, 2 ** 31 - 1))
    r = np.random.default_rng(seed)
    u = r.random(7)
    hair_idx = int(r.integers(len(palette["hair_options"])))

    mods = {"eye_scale": 1.0, "eye_sep_scale": 1.0, "eye_out_shift": 0.0,
            "ear_scale": 1.0, "nose_scale": 1.0, "nose_y_shift": 0.0,
            "head_x_scale": 1.0, "head_y_scale": 1.0, "hair_scale": 1.0,
            "hair_y_shift": 0.0, "hair_z_shift": 0.0}
    eye_color = palette["eye"]
    has_hair = True
    has_mark = False
    for name, category in sorted(attributes.items()):
        if category in EYE_COLORS:
            eye_color = EYE_COLORS[category]
        elif category in MARK_CATEGORIES:
            has_mark = True
        elif category in ATTRIBUTE_MODIFIERS:
            param, value = ATTRIBUTE_MODIFIERS[category]
            if param == "hair_scale" and value == 0.0:
                has_hair = False
            elif param.endswith("_shift"):
                mods[param] += value
            else:
                mods[param] *= value
        else:
            # unmapped categories still nudge geometry, deterministically
            mods["head_x_scale"] *= 1.0 + 0.02 * _hash_unit(name + ":" + category)
            mods["nose_scale"] *= 1.0 + 0.04 * _hash_unit(category)

    head = (0.50 * (1.0 + 0.04 * (2 * u[0] - 1)) * mods["head_x_scale"],
            0.60 * (1.0 + 0.04 * (2 * u[1] - 1)) * mods["head_y_scale"],
            0.52)
    eye_r = 0.085 * mods["eye_scale"]
    eye_sep = 0.21 * mods["eye_sep_scale"]
    eye_y = 0.08 + 0.02 * (2 * u[2] - 1)
    eye_z = _surface_z(head, eye_sep, eye_y) + 0.01 + mods["eye_out_shift"]
    nose_r = 0.065 * (1.0 + 0.08 * (2 * u[3] - 1)) * mods["nose_scale"]
    nose_c = (0.0, -0.04 + mods["nose_y_shift"], head[2] + 0.02)
    ear_y = 0.02 + 0.02 * (2 * u[4] - 1)
    ear_r = 0.095 * mods["ear_scale"]
    hair_r = 0.50 * (1.0 + 0.06 * (2 * u[5] - 1)) * max(mods["hair_scale"], 0.0)
    hair_c = (0.0, 0.18 + mods["hair_y_shift"], -0.10 + mods["hair_z_shift"])
    tone = 1.0 + 0.05 * (2 * u[6] - 1)
    skin = tuple(min(1.0, c * tone) for c in palette["skin"])
    mark_x, mark_y = 0.16, -0.12
    mark_c = (mark_x, mark_y, _surface_z(head, mark_x, mark_y) + 0.005)

    spec = AvatarSpec(
        style_id=style_id,
        attributes=tuple(sorted(attributes.items())),
        seed=seed,
        head_axes=head,
        eye_centers=((-eye_sep, eye_y, eye_z), (eye_sep, eye_y, eye_z)),
        eye_radius=eye_r,
        nose_center=nose_c,
        nose_radius=nose_r,
        ear_centers=((-(head[0] - 0.01), ear_y, 0.0), (head[0] - 0.01, ear_y, 0.0)),
        ear_radius=ear_r,
        hair_center=hair_c,
        hair_radius=hair_r,
        has_hair=has_hair and hair_r > 0.0,
        mark_center=mark_c,
        mark_radius=0.035,
        has_mark=has_mark,
        skin_color=skin,
        eye_color=eye_color,
        hair_color=palette["hair_options"][hair_idx],
        background=palette["bg"],
    )
    return _clamp_extent(spec)


def _primitives(spec: AvatarSpec) -> list[tuple[np.ndarray, float, tuple]]:
    """(center, radius, color) spheres; the head ellipsoid is handled apart."""
    prims = [
        (np.array(spec.eye_centers[0]), spec.eye_radius, spec.eye_color),
        (np.array(spec.eye_centers[1]), spec.eye_radius, spec.eye_color),
        (np.array(spec.nose_center), spec.nose_radius,
         tuple(0.92 * c for c in spec.skin_color)),
        (np.array(spec.ear_centers[0]), spec.ear_radius, spec.skin_color),
        (np.array(spec.ear_centers[1]), spec.ear_radius, spec.skin_color),
    ]
    if spec.has_hair:
        prims.append((np.array(spec.hair_center), spec.hair_radius,
                      spec.hair_color))
    if spec.has_mark:
        prims.append((np.array(spec.mark_center), spec.mark_radius, MARK_COLOR))
    return prims


def _max_extent(spec: AvatarSpec) -> float:
    extent = max(spec.head_axes)
    for center, radius, _ in _primitives(spec):
        extent = max(extent, float(np.linalg.norm(center)) + radius)
    return extent


def _clamp_extent(spec: AvatarSpec) -> AvatarSpec:
    extent = _max_extent(spec)
    if extent <= MAX_EXTENT:
        return spec
    s = MAX_EXTENT / extent

    def scale_point(p):
        return tuple(s * v for v in p)

    return replace(
        spec,
        head_axes=scale_point(spec.head_axes),
        eye_centers=tuple(scale_point(c) for c in spec.eye_centers),
        eye_radius=s * spec.eye_radius,
        nose_center=scale_point(spec.nose_center),
        nose_radius=s * spec.nose_radius,
        ear_centers=tuple(scale_point(c) for c in spec.ear_centers),
        ear_radius=s * spec.ear_radius,
        hair_center=scale_point(spec.hair_center),
        hair_radius=s * spec.hair_radius,
        mark_center=scale_point(spec.mark_center),
        mark_radius=s * spec.mark_radius,
    )


def mirror_spec(spec: AvatarSpec) -> AvatarSpec:
    """Reflect all geometry across the x=0 plane."""

    def mx(p):
        return (-p[0], p[1], p[2])

    return replace(
        spec,
        eye_centers=(mx(spec.eye_centers[1]), mx(spec.eye_centers[0])),
        nose_center=mx(spec.nose_center),
        ear_centers=(mx(spec.ear_centers[1]), mx(spec.ear_centers[0])),
        hair_center=mx(spec.hair_center),
        mark_center=mx(spec.mark_center),
    )


def sdf_features(spec: AvatarSpec, points: np.ndarray):
    """Per-feature SDF columns (N, n_feat) and their colors (n_feat, 3)."""
    pts = np.asarray(points, dtype=np.float64)
    axes = np.array(spec.head_axes)
    head = (np.linalg.norm(pts / axes, axis=-1) - 1.0) * float(axes.min())
    cols = [head]
    colors = [spec.skin_color]
    for center, radius, color in _primitives(spec):
        cols.append(np.linalg.norm(pts - center, axis=-1) - radius)
        colors.append(color)
    return np.stack(cols, axis=-1), np.array(colors, dtype=np.float64)


def sdf(spec: AvatarSpec, points: np.ndarray) -> np.ndarray:
    """Smooth-min composite SDF (soft union of all features)."""
    cols, _ = sdf_features(spec, points)
    m = cols.min(axis=-1, keepdims=True)
    return (m - SMIN_K * np.log(
        np.exp((m - cols) / SMIN_K).sum(axis=-1, keepdims=True)))[..., 0]


def density_color(spec: AvatarSpec, points: np.ndarray):
    """sigma = K * sigmoid(-S * sdf); rgb blended toward the nearest feature."""
    cols, colors = sdf_features(spec, points)
    m = cols.min(axis=-1, keepdims=True)
    lse = m - SMIN_K * np.log(np.exp((m - cols) / SMIN_K).sum(-1, keepdims=True))
    dist = lse[..., 0]
    sigma = K_SIGMA / (1.0 + np.exp(np.clip(S_SHARP * dist, -60.0, 60.0)))
    logits = -C_BLEND * (cols - m)
    w = np.exp(logits)
    w /= w.sum(axis=-1, keepdims=True)
    rgb = w @ colors
    return sigma, rgb


def render(spec: AvatarSpec, pose: SphericalPose, rig: Optional[CameraRig] = None,
           n_samples: int = 12, background=None) -> np.ndarray:
    """Reference render, (3,H,W) float32 in [0,1]."""
    rig = rig or CameraRig()
    bg = spec.background if background is None else background
    color, _, _ = volume.render_field(
        lambda p: density_color(spec, p), pose, rig, n_samples, bg)
    return np.clip(color, 0.0, 1.0).transpose(2, 0, 1).astype(np.float32)


def render_depth(spec: AvatarSpec, pose: SphericalPose,
                 rig: Optional[CameraRig] = None,
                 n_samples: int = 12) -> np.ndarray:
    """Expected termination depth per pixel, (H,W) float32 in [near, far]."""
    rig = rig or CameraRig()
    _, _, depth = volume.render_field(
        lambda p: density_color(spec, p), pose, rig, n_samples,
        spec.background)
    return np.clip(depth, rig.near, rig.far).astype(np.float32)


class OracleBackend:
    """In-process backend: renders the avatar carried in the meta dict."""

    def generate(self, pose_image: np.ndarray, meta: dict, bundle,
                 seed: int) -> np.ndarray:
        return render(meta["avatar"], meta["pose"], meta["rig"],
                      meta.get("n_samples", 16))


def corrupt_pose(nominal: SphericalPose, model: MisalignmentModel, rng,
                 policy: Optional[ConfidencePolicy] = None) -> SphericalPose:
    """Identity inside the confident box; jitter elsewhere; Back views may
    re-draw yaw uniformly (the back-of-head failure mode)."""
    policy = policy or ConfidencePolicy()
    if is_confident(nominal, policy):
        return nominal
    yaw = normalize_yaw(nominal.yaw_deg
                        + rng.uniform(-model.delta_max_deg, model.delta_max_deg))
    pitch = float(np.clip(nominal.pitch_deg
                          + rng.uniform(-model.delta_max_deg, model.delta_max_deg),
                          -30.0, 30.0))
    if classify_view(nominal.yaw_deg) == BACK and rng.random() < model.p_flip:
        yaw = rng.uniform(-180.0, 180.0)
    return SphericalPose(yaw, pitch, nominal.radius)


def _image_path(out_dir: Path, rec_id: int) -> Path:
    return out_dir / "records" / f"rec_{rec_id:06d}.img"


def _depth_path(out_dir: Path, rec_id: int) -> Path:
    return out_dir / "records" / f"rec_{rec_id:06d}.depth"


def _write_raw(path: Path, arr: np.ndarray):
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        tmp.write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        os.replace(tmp, path)
    except OSError:
        tmp.unlink(missing_ok=True)
        raise


def _entry(rec_id: int, shape, nominal: SphericalPose, true: SphericalPose,
           bins_cfg: BinningConfig, style: str, bundle, seed: int,
           flipped: bool) -> dict:
    fy, fp = pose_bins(nominal, bins_cfg, FINE)
    cy, cp = pose_bins(nominal, bins_cfg, COARSE)
    return {
        "id": rec_id,
        "shape": list(shape),
        "nominal_pose": nominal.to_json(),
        "true_pose": true.to_json(),
        "fine_bins": bins_to_json(fy, fp, FINE),
        "coarse_bins": bins_to_json(cy, cp, COARSE),
        "style": style,
        "prompt_pos": bundle.positive,
        "prompt_neg": bundle.negative,
        "seed": seed,
        "flipped": flipped,
    }


def synth_dataset(n: int, styles: list[str], misalignment: MisalignmentModel,
                  rng, out_dir, *, rig: Optional[CameraRig] = None,
                  n_samples: int = 12, tables: Optional[PromptTables] = None,
                  backend=None, policy: Optional[ConfidencePolicy] = None,
                  bins_cfg: Optional[BinningConfig] = None,
                  write_depth: bool = True) -> dict:
    """Render n records plus n mirrored copies and write the manifest.

    Images are rendered at the corrupted true pose but annotated with the
    nominal pose; that gap is the injected misalignment.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    if not styles:
        raise ValueError("need at least one style")
    rig = rig or CameraRig()
    tables = tables or load_tables()
    backend = backend or OracleBackend()
    policy = policy or ConfidencePolicy()
    bins_cfg = bins_cfg or BinningConfig()
    out = Path(out_dir)
    (out / "records").mkdir(parents=True, exist_ok=True)
    shape = (3, rig.height, rig.width)

    seeds = [int(s) for s in rng.integers(0, 2 ** 63 - 1, size=n)]
    entries = []
    for i, seed in enumerate(seeds):
        r = np.random.default_rng(seed)
        style = styles[int(r.integers(len(styles)))]
        nominal = sample_pose(r)
        bundle = compose(style, nominal, r, tables)
        spec = spawn_avatar(r, style,
                            dict(zip(bundle.attribute_names,
                                     bundle.attribute_texts)))
        true = corrupt_pose(nominal, misalignment, r, policy)
        depth = render_depth(spec, nominal, rig, n_samples)
        meta = {"avatar": spec, "pose": true, "rig": rig,
                "n_samples": n_samples}
        image = backend.generate(depth_to_image(depth, rig.near, rig.far),
                                 meta, bundle, seed)
        image = np.clip(image, 0.0, 1.0)

        try:
            _write_raw(_image_path(out, i), image)
            _write_raw(_image_path(out, n + i), image[:, :, ::-1])
            if write_depth:
                _write_raw(_depth_path(out, i), depth)
                _write_raw(_depth_path(out, n + i), depth[:, ::-1])
        except OSError:
            for rec_id in (i, n + i):
                _image_path(out, rec_id).unlink(missing_ok=True)
                _depth_path(out, rec_id).unlink(missing_ok=True)
            raise
        entries.append(_entry(i, shape, nominal, true, bins_cfg, style,
                              bundle, seed, flipped=False))
        entries.append(_entry(n + i, shape, flip_pose(nominal),
                              flip_pose(true), bins_cfg, style, bundle, seed,
                              flipped=True))

    entries.sort(key=lambda e: e["id"])
    manifest = {
        "version": 1,
        "n_source": n,
        "n_total": 2 * n,
        "shape": list(shape),
        "rig": rig.to_json(),
        "samples_per_ray": n_samples,
        "styles": list(styles),
        "misalignment": {"delta_max_deg": misalignment.delta_max_deg,
                         "p_flip": misalignment.p_flip},
        "confident_box": {"yaw_box": policy.yaw_box,
                          "pitch_box": policy.pitch_box},
        "records": entries,
    }
    (out / "manifest.json").write_text(canonical_json(manifest))
    return manifest


def load_manifest(dataset_dir) -> dict:
    return read_json(Path(dataset_dir) / "manifest.json")


def load_image(dataset_dir, entry: dict) -> np.ndarray:
    raw = _image_path(Path(dataset_dir), entry["id"]).read_bytes()
    return np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()


def load_depth(dataset_dir, entry: dict) -> np.ndarray:
    raw = _depth_path(Path(dataset_dir), entry["id"]).read_bytes()
    _, h, w = entry["shape"]
    return np.frombuffer(raw, dtype="<f4").reshape(h, w).copy()
