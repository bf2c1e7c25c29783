"""Command line front end wiring synthesis, training, and evaluation.

One binary with subcommands; JSON configs carry a versioned schema key so
ablation recipes stay reproducible. Every subcommand is a pure function of
its inputs and seed: reruns write byte-identical artifacts.

Exit codes:
  0  success
  2  usage error (unknown flag or subcommand, argparse)
  3  schema-invalid config (the offending key is named)
  4  missing input file or directory
  5  runtime contract failure (propagated from the modules)

Heavy imports happen inside the subcommands, after --threads has capped the
BLAS pools; numpy sizes them once at import.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

SCHEMA_VERSION = 1

EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_RUNTIME = 5

# pose layouts for sample / gen-conditioned; grid cycles row-major
_GRID_YAWS = (-90.0, 0.0, 90.0, 180.0)
_GRID_PITCHES = (-10.0, 10.0)


class ConfigError(ValueError):
    pass


def _cap_threads(n: int) -> None:
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ[var] = str(n)


def _read_config(path, allowed: set) -> dict:
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as ex:
            raise ConfigError(f"{path}: not valid json ({ex})") from ex
    if not isinstance(obj, dict) or "schema" not in obj:
        raise ConfigError(f"{path}: missing key 'schema'")
    if obj["schema"] != SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported schema {obj['schema']!r}")
    for key in obj:
        if key != "schema" and key not in allowed:
            raise ConfigError(f"{path}: unknown key {key!r}")
    return obj


def _section(cls, obj, where: str):
    """Strict dataclass construction: any unknown key is named and refused."""
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in obj:
        if key not in names:
            raise ConfigError(f"{where}: unknown key {key!r}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as ex:
        raise ConfigError(f"{where}: {ex}") from ex


def _require(cfg: dict, key: str, path) -> object:
    if key not in cfg:
        raise ConfigError(f"{path}: missing key {key!r}")
    return cfg[key]


def _train_sections(config_path):
    from .discriminator import DiscConfig
    from .generator import GeneratorConfig
    from .pose_codec import BinningConfig, ConfidencePolicy
    from .training import TrainSchedule

    spec = {"generator": GeneratorConfig, "discriminator": DiscConfig,
            "policy": ConfidencePolicy, "schedule": TrainSchedule,
            "bins": BinningConfig}
    raw = ({} if config_path is None
           else _read_config(config_path, set(spec)))
    return {name: _section(cls, raw.get(name, {}), name)
            for name, cls in spec.items()}


def _pose_layout(name: str, n: int):
    from .camera import SphericalPose

    if n < 1:
        raise ConfigError("need at least one pose")
    if name == "front":
        return [SphericalPose(0.0, 0.0)] * n
    if name == "grid":
        grid = [SphericalPose(y, p) for p in _GRID_PITCHES for y in _GRID_YAWS]
        return [grid[i % len(grid)] for i in range(n)]
    if name == "ring":
        return [SphericalPose(-180.0 + 360.0 * i / n, 0.0) for i in range(n)]
    raise ConfigError(f"unknown pose layout {name!r}")


def _save_png(path: Path, image) -> None:
    from .imageio import png_encode

    path.write_bytes(png_encode(image))


def _load_image(path):
    import numpy as np

    from .imageio import png_decode

    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path)
    if path.suffix == ".png":
        return png_decode(path.read_bytes())
    raise ValueError(f"expected a .png or .npy image, got {path.name}")


def cmd_synth_data(args) -> int:
    import numpy as np

    from .oracle import MisalignmentModel, synth_dataset

    cfg = _read_config(args.config, {"seed", "n_records", "styles",
                                     "misalignment", "write_depth"})
    mis = _section(MisalignmentModel, cfg.get("misalignment", {}),
                   "misalignment")
    n = int(_require(cfg, "n_records", args.config))
    styles = list(_require(cfg, "styles", args.config))
    rng = np.random.default_rng(int(cfg.get("seed", 0)))
    manifest = synth_dataset(n, styles, mis, rng, args.out,
                             write_depth=bool(cfg.get("write_depth", True)))
    print(f"wrote {len(manifest['records'])} records to {args.out}")
    return 0


def cmd_train_gan(args) -> int:
    from .training import train

    s = _train_sections(args.config)
    run = train(args.data, s["generator"], s["discriminator"], s["policy"],
                s["schedule"], args.seed, args.out, bins=s["bins"])
    print(f"run complete: {run}")
    return 0


def cmd_ablate(args) -> int:
    from .autodiff import write_json
    from .training import VARIANTS, ablation

    s = _train_sections(args.config)
    variants = (list(VARIANTS) if args.variants is None
                else args.variants.split(","))
    out = Path(args.out)
    if out.suffix != ".json":
        raise ConfigError("--out must be a .json report path")
    report = ablation(args.data, variants, list(range(args.seeds)),
                      s["generator"], s["discriminator"], s["policy"],
                      s["schedule"], out.parent, eval_n=args.eval_n)
    if out.name != "report.json":
        write_json(out, report)
    for name, entry in report["variants"].items():
        print(f"{name}: median FD {entry['median_overall']:.4f}")
    print(f"report: {out}")
    return 0


def cmd_train_prior(args) -> int:
    from .diffusion import GuidanceConfig, NoiseSchedule, train_prior

    ckpt = train_prior(args.gan, args.n_pairs, NoiseSchedule(),
                       GuidanceConfig(), args.seed, args.out,
                       iterations=args.iterations)
    print(f"prior checkpoint: {ckpt}")
    return 0


def cmd_sample(args) -> int:
    import numpy as np

    from .camera import CameraRig
    from .generator import render_batch, sample_z
    from .training import load_generator_checkpoint

    params, cfg = load_generator_checkpoint(args.gan)
    rig = CameraRig()
    poses = _pose_layout(args.poses, args.n)
    rng = np.random.default_rng(args.seed)
    if args.poses == "ring":  # one identity orbited by the camera
        z = np.repeat(sample_z(rng, cfg, 1), args.n, axis=0)
    else:
        z = sample_z(rng, cfg, args.n)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for lo in range(0, args.n, 16):
        hi = min(lo + 16, args.n)
        images = render_batch(params, z[lo:hi], poses[lo:hi], poses[lo:hi],
                              rig, cfg)
        for i, image in enumerate(images, start=lo):
            _save_png(out / f"sample_{i:03d}.png", image)
    print(f"wrote {args.n} images to {out}")
    return 0


def cmd_latent_walk(args) -> int:
    import numpy as np

    from .camera import CameraRig, SphericalPose
    from .generator import render_image, sample_z
    from .training import load_generator_checkpoint

    if args.steps < 2:
        raise ConfigError("--steps must be >= 2")
    params, cfg = load_generator_checkpoint(args.gan)
    rig = CameraRig()
    rng = np.random.default_rng(args.seed)
    z0 = sample_z(rng, cfg, 1)
    z1 = sample_z(rng, cfg, 1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.steps):
        # shift the noise and the view together, left profile to right
        t = i / (args.steps - 1)
        pose = SphericalPose(-90.0 + 180.0 * t, 0.0)
        z = (1.0 - t) * z0 + t * z1
        image = render_image(params, z.astype(np.float32), pose, pose,
                             rig, cfg)[0]
        _save_png(out / f"walk_{i:03d}.png", image)
    print(f"wrote {args.steps} images to {out}")
    return 0


def cmd_gen_conditioned(args) -> int:
    import numpy as np

    from .diffusion import generate_conditioned

    image = _load_image(args.image)
    poses = _pose_layout(args.poses, args.n_poses)
    result = generate_conditioned(image, args.gan, args.prior, poses,
                                  seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "w.npy", result["w"])
    for i, view in enumerate(result["views"]):
        _save_png(out / f"view_{i:03d}.png", view)
    print(f"wrote {len(result['views'])} views to {out}")
    return 0


def cmd_export_mesh(args) -> int:
    import numpy as np

    from .camera import SphericalPose
    from .generator import gpc_encoding, map_z, sample_z, synthesize
    from .mesh import DEFAULT_ISO, export_obj, marching_cubes, \
        sample_density_grid
    from .training import load_generator_checkpoint

    params, cfg = load_generator_checkpoint(args.gan)
    rng = np.random.default_rng(args.seed)
    z = sample_z(rng, cfg, 1)
    w = map_z(params, z, gpc_encoding(SphericalPose(0.0, 0.0))[None], cfg)
    planes = synthesize(params, w, cfg)
    grid = sample_density_grid(params, planes, args.res, cfg)
    iso = DEFAULT_ISO if args.iso is None else args.iso
    mesh = marching_cubes(grid, iso)
    export_obj(mesh, args.out)
    print(f"{len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles "
          f"-> {args.out}")
    return 0


def cmd_eval_fd(args) -> int:
    import numpy as np

    from .camera import CameraRig
    from .metrics import eval_protocol, gan_sampler
    from .oracle import load_manifest
    from .training import load_generator_checkpoint

    params, cfg = load_generator_checkpoint(args.gan)
    rig = CameraRig.from_json(load_manifest(args.data)["rig"])
    score = eval_protocol(gan_sampler(params, cfg, rig), args.data, args.n,
                          np.random.default_rng(args.seed), seed=args.seed)
    print(json.dumps(score, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avatarforge",
        description="stylized 3D avatar pipeline: dataset synthesis, "
                    "tri-plane GAN training, diffusion prior, evaluation")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS worker threads (applied before the "
                             "numeric modules load)")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="command")

    p = sub.add_parser("synth-data", help="render an oracle dataset")
    p.add_argument("--config", required=True, help="json config (schema 1)")
    p.add_argument("--out", required=True, help="dataset directory")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train-gan", help="train one GAN run")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", default=None, help="json config (schema 1)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train_gan)

    p = sub.add_parser("ablate",
                       help="train cof/fine_only/coarse_only across seeds")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--seeds", type=int, default=3,
                   help="number of seeds (0..n-1)")
    p.add_argument("--out", required=True, help="report json path")
    p.add_argument("--config", default=None, help="json config (schema 1)")
    p.add_argument("--variants", default=None,
                   help="comma list, default all three")
    p.add_argument("--eval-n", type=int, default=512,
                   help="samples per FD evaluation")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("train-prior", help="train the style diffusion prior")
    p.add_argument("--gan", required=True, help="trained GAN run directory")
    p.add_argument("--out", required=True, help="prior checkpoint directory")
    p.add_argument("--n-pairs", type=int, default=256)
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_prior)

    p = sub.add_parser("sample", help="render seeded samples on a pose layout")
    p.add_argument("--gan", required=True, help="trained GAN run directory")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--poses", default="grid", choices=("grid", "front", "ring"))
    p.add_argument("--out", required=True, help="image directory")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("latent-walk",
                       help="interpolate z and yaw from left to right")
    p.add_argument("--gan", required=True, help="trained GAN run directory")
    p.add_argument("--steps", type=int, default=16)
    p.add_argument("--out", required=True, help="image directory")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_latent_walk)

    p = sub.add_parser("gen-conditioned",
                       help="avatar conditioned on one front image")
    p.add_argument("--gan", required=True, help="trained GAN run directory")
    p.add_argument("--prior", required=True, help="prior checkpoint directory")
    p.add_argument("--image", required=True, help="front image (.png or .npy)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--poses", default="front",
                   choices=("grid", "front", "ring"))
    p.add_argument("--n-poses", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_conditioned)

    p = sub.add_parser("export-mesh", help="extract an OBJ isosurface")
    p.add_argument("--gan", required=True, help="trained GAN run directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--res", type=int, default=64, help="grid samples per axis")
    p.add_argument("--iso", type=float, default=None,
                   help="density level (default: half the oracle core)")
    p.add_argument("--out", required=True, help="obj path")
    p.set_defaults(func=cmd_export_mesh)

    p = sub.add_parser("eval-fd", help="debiased random-view FD")
    p.add_argument("--gan", required=True, help="trained GAN run directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval_fd)

    return parser


def flag_registry() -> dict[str, list[str]]:
    """Documented flags per subcommand, read off the live parser."""
    parser = build_parser()
    subs = next(a for a in parser._actions
                if isinstance(a, argparse._SubParsersAction))
    registry = {"": sorted(o for a in parser._actions
                           for o in a.option_strings)}
    for name, sp in subs.choices.items():
        registry[name] = sorted(o for a in sp._actions
                                for o in a.option_strings)
    return registry


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads is not None:
            _cap_threads(args.threads)
        return args.func(args)
    except ConfigError as ex:
        print(f"config error: {ex}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as ex:
        print(f"missing file: {ex}", file=sys.stderr)
        return EXIT_MISSING
    except (ValueError, RuntimeError, KeyError) as ex:
        print(f"error: {ex.args[0] if ex.args else ex}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
