"""GAN training loop and the coarse-to-fine ablation driver.

One iteration: sample a real batch and a label part per real image, render a
single fake batch on the generator tape, step the discriminator on detached
fakes, then step the generator against the updated discriminator using the
same attached fakes. Everything is driven by one seeded Generator so runs
are bit-reproducible.
"""

from __future__ import annotations

import dataclasses
import json
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import (
    NonFiniteError,
    Tape,
    Tensor,
    adam_init,
    adam_step,
    backward,
    canonical_json,
    load_arrays,
    load_meta,
    read_json,
    restore_rng,
    rng_state,
    save_arrays,
    tensor,
    write_json,
)
from .camera import CameraRig, SphericalPose, sample_pose
from .discriminator import (
    DiscConfig,
    d_loss,
    discriminate,
    g_loss,
    init_discriminator,
)
from .generator import (
    GeneratorConfig,
    gpc_encoding,
    init_generator,
    map_z,
    sample_z,
    synthesize,
    volume_render_multi,
)
from .metrics import dataset_stats, eval_protocol, gan_sampler
from .oracle import load_image, load_manifest
from .pose_codec import (
    COARSE,
    FINE,
    BinningConfig,
    ConfidencePolicy,
    encode,
    is_confident,
    sample_part,
)

PART_MODES = ("policy", "fine", "coarse")
VARIANTS = ("cof", "fine_only", "coarse_only")
_VARIANT_MODE = {"cof": "policy", "fine_only": "fine", "coarse_only": "coarse"}


@dataclass(frozen=True)
class TrainSchedule:
    iterations: int = 2000
    batch_size: int = 16
    d_lr: float = 2e-3
    g_lr: float = 2e-3
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    ema_decay: float = 0.99
    r1_gamma: float = 1.0
    part_mode: str = "policy"
    checkpoint_every: int = 500
    eval_every: int = 500
    eval_n: int = 256

    def __post_init__(self):
        if self.part_mode not in PART_MODES:
            raise ValueError(f"part_mode must be one of {PART_MODES}")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be >= 1")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must be in [0, 1)")
        if self.r1_gamma < 0.0:
            raise ValueError("r1_gamma must be >= 0")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")


class Dataset:
    """Records loaded whole; 32x32 corpora are small enough to keep resident."""

    def __init__(self, dataset_dir):
        self.dir = Path(dataset_dir)
        manifest = load_manifest(self.dir)
        for key in ("records", "rig", "shape"):
            if key not in manifest:
                raise ValueError(f"manifest missing {key!r}")
        if not manifest["records"]:
            raise ValueError("dataset has no records")
        self.manifest = manifest
        self.rig = CameraRig.from_json(manifest["rig"])
        self.images = np.stack([load_image(self.dir, e)
                                for e in manifest["records"]])
        self.poses = [SphericalPose.from_json(e["nominal_pose"])
                      for e in manifest["records"]]

    def __len__(self):
        return len(self.poses)


def sample_label(pose: SphericalPose, policy: ConfidencePolicy,
                 bins: BinningConfig, mode: str, rng) -> tuple[np.ndarray, str]:
    """One label for one image; "policy" draws the part, others force it."""
    if mode == "policy":
        part = sample_part(pose, policy, rng)
    elif mode == "fine":
        part = FINE
    elif mode == "coarse":
        part = COARSE
    else:
        raise ValueError(f"unknown part mode {mode!r}")
    return encode(pose, bins, part), part


def ema_update(ema: dict, params: dict, decay: float) -> None:
    for k, t in params.items():
        # ndarrays also expose a .data memoryview, so test the type
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        ema[k] = decay * ema[k] + (1.0 - decay) * arr


def _config_json(gen, disc, policy, schedule, bins) -> dict:
    return {
        "gen_config": dataclasses.asdict(gen),
        "disc_config": dataclasses.asdict(disc),
        "policy": dataclasses.asdict(policy),
        "schedule": dataclasses.asdict(schedule),
        "bins": dataclasses.asdict(bins),
    }


def _tupled(cls, obj: dict):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in obj.items():
        kwargs[k] = tuple(v) if isinstance(v, list) else v
    return cls(**{k: v for k, v in kwargs.items() if k in fields})


def load_run_config(run_dir):
    obj = read_json(Path(run_dir) / "config.json")
    return {
        "seed": obj["seed"],
        "dataset": obj["dataset"],
        "gen_config": _tupled(GeneratorConfig, obj["gen_config"]),
        "disc_config": _tupled(DiscConfig, obj["disc_config"]),
        "policy": _tupled(ConfidencePolicy, obj["policy"]),
        "schedule": _tupled(TrainSchedule, obj["schedule"]),
        "bins": _tupled(BinningConfig, obj["bins"]),
    }


def _save_checkpoint(run_dir: Path, it: int, g_params, d_params, ema,
                     g_state, d_state, rng) -> Path:
    ckpt = run_dir / "checkpoints" / f"iter_{it:06d}"
    arrays = {}
    for k, t in g_params.items():
        arrays[f"g.{k}"] = t.data
        arrays[f"adam_g.m.{k}"] = g_state.m[k]
        arrays[f"adam_g.v.{k}"] = g_state.v[k]
        arrays[f"ema.{k}"] = ema[k]
    for k, t in d_params.items():
        arrays[f"d.{k}"] = t.data
        arrays[f"adam_d.m.{k}"] = d_state.m[k]
        arrays[f"adam_d.v.{k}"] = d_state.v[k]
    meta = {
        "iteration": it,
        "rng": rng_state(rng),
        "adam_g_step": g_state.step,
        "adam_d_step": d_state.step,
    }
    save_arrays(str(ckpt), arrays, meta)
    return ckpt


def latest_checkpoint(run_dir) -> Optional[Path]:
    root = Path(run_dir) / "checkpoints"
    if not root.is_dir():
        return None
    ckpts = sorted(p for p in root.iterdir() if p.name.startswith("iter_"))
    return ckpts[-1] if ckpts else None


def load_generator_checkpoint(run_dir, *, ema: bool = True):
    """(params, gen_config) from a run's newest checkpoint."""
    ckpt = latest_checkpoint(run_dir)
    if ckpt is None:
        raise FileNotFoundError(f"no checkpoints under {run_dir}")
    arrays = load_arrays(str(ckpt))
    prefix = "ema." if ema else "g."
    params = {k[len(prefix):]: v for k, v in arrays.items()
              if k.startswith(prefix)}
    cfg = load_run_config(run_dir)
    return params, cfg["gen_config"]


def train(dataset_dir, gen_config: GeneratorConfig, disc_config: DiscConfig,
          policy: ConfidencePolicy, schedule: TrainSchedule, seed: int,
          out_dir, *, bins: Optional[BinningConfig] = None,
          init_overrides: Optional[dict] = None) -> Path:
    """Run the full schedule; returns the run directory.

    The directory holds config.json, log.jsonl (one object per iteration),
    checkpoints/iter_*, and stops with a RuntimeError plus the last good
    checkpoint if any loss goes non-finite.
    """
    run_dir = Path(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    bins = bins or BinningConfig()
    config = _config_json(gen_config, disc_config, policy, schedule, bins)
    config["seed"] = int(seed)
    config["dataset"] = str(dataset_dir)
    write_json(run_dir / "config.json", config)
    (run_dir / "log.jsonl").write_text("")

    data = Dataset(dataset_dir)
    rng = np.random.default_rng(seed)
    g_params = {k: tensor(v) for k, v in
                init_generator(gen_config, rng).items()}
    d_params = {k: tensor(v) for k, v in
                init_discriminator(disc_config, rng).items()}
    if init_overrides:
        for k, v in init_overrides.items():
            g_params[k].data = np.asarray(v, np.float32)
    ema = {k: t.data.copy() for k, t in g_params.items()}
    g_state = adam_init(g_params, schedule.g_lr, schedule.adam_beta1,
                        schedule.adam_beta2)
    d_state = adam_init(d_params, schedule.d_lr, schedule.adam_beta1,
                        schedule.adam_beta2)
    _save_checkpoint(run_dir, 0, g_params, d_params, ema, g_state, d_state, rng)
    return _train_loop(run_dir, data, gen_config, disc_config, policy,
                       schedule, bins, seed, rng, g_params, d_params, ema,
                       g_state, d_state, start_iter=0)


def resume(run_dir) -> Path:
    """Continue an interrupted run from its newest checkpoint, bit-exactly."""
    run_dir = Path(run_dir)
    cfg = load_run_config(run_dir)
    ckpt = latest_checkpoint(run_dir)
    if ckpt is None:
        raise FileNotFoundError(f"no checkpoints under {run_dir}")
    arrays = load_arrays(str(ckpt))
    meta = load_meta(str(ckpt))
    schedule = cfg["schedule"]

    g_params, d_params, ema = {}, {}, {}
    g_state = adam_init({}, schedule.g_lr, schedule.adam_beta1,
                        schedule.adam_beta2)
    d_state = adam_init({}, schedule.d_lr, schedule.adam_beta1,
                        schedule.adam_beta2)
    for k, v in arrays.items():
        group, name = k.split(".", 1)
        if group == "g":
            g_params[name] = tensor(v)
        elif group == "d":
            d_params[name] = tensor(v)
        elif group == "ema":
            ema[name] = v
        elif group == "adam_g":
            kind, pname = name.split(".", 1)
            getattr(g_state, kind)[pname] = v
        elif group == "adam_d":
            kind, pname = name.split(".", 1)
            getattr(d_state, kind)[pname] = v
    g_state.step = meta["adam_g_step"]
    d_state.step = meta["adam_d_step"]
    start = meta["iteration"]
    rng = restore_rng(meta["rng"])

    log_path = run_dir / "log.jsonl"
    if log_path.exists():
        lines = [ln for ln in log_path.read_text().splitlines() if ln]
        log_path.write_text("".join(ln + "\n" for ln in lines[:start]))

    data = Dataset(cfg["dataset"])
    return _train_loop(run_dir, data, cfg["gen_config"], cfg["disc_config"],
                       cfg["policy"], schedule, cfg["bins"], cfg["seed"], rng,
                       g_params, d_params, ema, g_state, d_state,
                       start_iter=start)


def _train_loop(run_dir, data, gen_config, disc_config, policy, schedule,
                bins, seed, rng, g_params, d_params, ema, g_state, d_state,
                start_iter) -> Path:
    batch = schedule.batch_size
    n = len(data)
    d_names = list(d_params)
    g_names = list(g_params)
    real_stats = None
    log_fh = open(run_dir / "log.jsonl", "a")
    last_ckpt = latest_checkpoint(run_dir)

    try:
        for it in range(start_iter, schedule.iterations):
            idx = rng.integers(0, n, batch)
            reals = data.images[idx]
            real_labels = np.zeros((batch, disc_config.label_dim), np.float32)
            fine_real = conf_real = 0
            for row, i in enumerate(idx):
                pose = data.poses[int(i)]
                label, part = sample_label(pose, policy, bins,
                                           schedule.part_mode, rng)
                real_labels[row] = label
                if is_confident(pose, policy):
                    conf_real += 1
                    fine_real += int(part == FINE)

            z = sample_z(rng, gen_config, batch)
            render_poses = [sample_pose(rng) for _ in range(batch)]
            fake_labels = np.zeros_like(real_labels)
            fine_fake = conf_fake = 0
            for row, pose in enumerate(render_poses):
                label, part = sample_label(pose, policy, bins,
                                           schedule.part_mode, rng)
                fake_labels[row] = label
                if is_confident(pose, policy):
                    conf_fake += 1
                    fine_fake += int(part == FINE)
            # GPC swap: condition on an unrelated pose half the time so the
            # mapping network cannot lock geometry to the rendering view
            swap_poses = [sample_pose(rng) for _ in range(batch)]
            swap = rng.random(batch) < gen_config.gpc_swap_prob
            cond_poses = [sp if s else rp for sp, rp, s in
                          zip(swap_poses, render_poses, swap)]

            with Tape() as gtape:
                for t in g_params.values():
                    gtape.watch(t)
                gpc = np.stack([gpc_encoding(p, bins) for p in cond_poses])
                planes = synthesize(g_params, map_z(g_params, z, gpc,
                                                    gen_config), gen_config)
                fakes, _ = volume_render_multi(g_params, planes, render_poses,
                                               data.rig, gen_config)
                fakes_np = fakes.numpy()

                with Tape() as dtape:
                    for t in d_params.values():
                        dtape.watch(t)
                    dl, stats = d_loss(d_params, reals, real_labels, fakes_np,
                                       fake_labels, disc_config,
                                       gamma=schedule.r1_gamma)
                    d_grads = backward(dl, [d_params[k] for k in d_names])
                adam_step(d_params, dict(zip(d_names, d_grads)), d_state)

                logits = discriminate(d_params, fakes, fake_labels, disc_config)
                gl = g_loss(logits)
                g_grads = backward(gl, [g_params[k] for k in g_names])
            adam_step(g_params, dict(zip(g_names, g_grads)), g_state)
            ema_update(ema, g_params, schedule.ema_decay)

            record = {
                "iter": it,
                "d_loss": float(dl.numpy()),
                "g_loss": float(gl.numpy()),
                "r1": stats["r1"],
                "d_real": stats["d_real"],
                "d_fake": stats["d_fake"],
                "fine_real": fine_real,
                "confident_real": conf_real,
                "fine_fake": fine_fake,
                "confident_fake": conf_fake,
            }
            done = it + 1
            if schedule.eval_every and (done % schedule.eval_every == 0
                                        or done == schedule.iterations):
                if real_stats is None:
                    real_stats = dataset_stats(data.dir, data.manifest)
                score = eval_protocol(
                    gan_sampler(ema, gen_config, data.rig), data.dir,
                    schedule.eval_n, np.random.default_rng([seed, done]),
                    seed=seed, real_stats=real_stats)
                record["fd"] = score
            log_fh.write(canonical_json(record))
            log_fh.flush()
            if done % schedule.checkpoint_every == 0 or done == schedule.iterations:
                last_ckpt = _save_checkpoint(run_dir, done, g_params, d_params,
                                             ema, g_state, d_state, rng)
    except NonFiniteError as err:
        write_json(run_dir / "abort.json", {
            "iteration": it,
            "error": str(err),
            "last_checkpoint": str(last_ckpt),
        })
        raise RuntimeError(f"non-finite loss at iteration {it}; last good "
                           f"checkpoint: {last_ckpt}") from err
    finally:
        log_fh.close()
    return run_dir


def read_log(run_dir) -> list[dict]:
    path = Path(run_dir) / "log.jsonl"
    return [json.loads(ln) for ln in path.read_text().splitlines() if ln]


def ablation(dataset_dir, variants, seeds, gen_config: GeneratorConfig,
             disc_config: DiscConfig, policy: ConfidencePolicy,
             schedule: TrainSchedule, out_dir, *, eval_n: int = 512) -> dict:
    """Train every variant at every seed and report median random-view FD.

    fine_only forces the fine part, coarse_only the coarse part, cof uses
    the confidence policy. Writes report.json under out_dir.
    """
    if len(seeds) < 3:
        raise ValueError("need at least 3 seeds")
    unknown = set(variants) - set(VARIANTS)
    if unknown:
        raise ValueError(f"unknown variants: {sorted(unknown)}")
    out_dir = Path(out_dir)
    rig = CameraRig.from_json(load_manifest(dataset_dir)["rig"])
    real_stats = dataset_stats(dataset_dir)
    report = {"dataset": str(dataset_dir), "seeds": [int(s) for s in seeds],
              "eval_n": int(eval_n), "variants": {}}
    for variant in variants:
        schedule_v = dataclasses.replace(schedule,
                                         part_mode=_VARIANT_MODE[variant])
        scores = []
        for seed in seeds:
            run_dir = out_dir / variant / f"seed_{seed}"
            train(dataset_dir, gen_config, disc_config, policy, schedule_v,
                  seed, run_dir)
            params, cfg = load_generator_checkpoint(run_dir, ema=True)
            score = eval_protocol(gan_sampler(params, cfg, rig), dataset_dir,
                                  eval_n, np.random.default_rng([seed, 0xFD]),
                                  seed=seed, real_stats=real_stats)
            scores.append(score)
        buckets = {}
        for name in ("front", "side", "back"):
            vals = [s["per_bucket"][name] for s in scores
                    if s["per_bucket"][name] is not None]
            buckets[name] = statistics.median(vals) if vals else None
        report["variants"][variant] = {
            "median_overall": statistics.median(s["overall"] for s in scores),
            "median_per_bucket": buckets,
            "per_seed": scores,
        }
    write_json(out_dir / "report.json", report)
    return report
