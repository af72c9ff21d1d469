"""Flat key=value run configuration with per-stage schemas.

A run is `tpdiff <stage> [key=value ...]`; the pseudo-key `config=FILE`
loads a key=value file first, then command-line pairs override it. Unknown
keys are rejected, and validation reports every offending key at once. The
resolved configuration is written next to the run's outputs so any run can
be replayed from it.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

STAGES = ("gen-data", "fit", "train-gan", "train-diff", "sample", "invert",
          "superres", "edge2scene", "eval", "render")


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


@dataclass(frozen=True)
class Option:
    type: type
    default: object
    help: str = ""


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_COMMON = {
    "seed": Option(int, 0, "base RNG seed"),
    "out": Option(str, "", "output directory (default runs/<stage>)"),
}

_SAMPLER = {
    "steps": Option(int, 250, "denoising steps"),
    "langevin.steps": Option(int, 10, "Langevin corrections per corrected step"),
    "langevin.delta": Option(float, 0.25, "Langevin step size"),
    "langevin.window": Option(int, 50, "initial steps receiving correction"),
    "method": Option(str, "ancestral", "ancestral | ddim"),
    "eta": Option(float, 1.0, "ddim stochasticity in [0,1]"),
}

_SCENE = {
    "image_size": Option(int, 32, "render resolution"),
    "samples_per_ray": Option(int, 32, "quadrature points per ray"),
    "scene_k": Option(int, 1, "primitives per scene (0 = random 1-3)"),
}

SCHEMAS: dict[str, dict[str, Option]] = {
    "gen-data": {**_COMMON, **_SCENE,
                 "count": Option(int, 64, "number of scenes"),
                 "views_per_scene": Option(int, 1, "posed views per scene")},
    "fit": {**_COMMON, **_SCENE,
            "scenes": Option(int, 8, "scenes in the bank"),
            "views": Option(int, 24, "views per scene"),
            "iters": Option(int, 300, "fit rounds"),
            "lr": Option(float, 5e-2, "Adam learning rate"),
            "reg_weight": Option(float, 1e-3, "plane L2 prior weight"),
            "resolution": Option(int, 32, "triplane resolution"),
            "channels": Option(int, 8, "triplane channels")},
    "train-gan": {**_COMMON, **_SCENE,
                  "steps": Option(int, 2000, "training steps"),
                  "batch": Option(int, 8, "batch size"),
                  "train_views": Option(int, 512, "single-view training images"),
                  "gamma": Option(float, 1.0, "R1 weight"),
                  "r1_interval": Option(int, 16, "lazy R1 interval"),
                  "lr_g": Option(float, 2e-3, "generator lr"),
                  "lr_d": Option(float, 2e-3, "discriminator lr"),
                  "plane_l2": Option(float, 1.0, "triplane L2 weight"),
                  "u_dim": Option(int, 64, "latent dimension"),
                  "resolution": Option(int, 32, "triplane resolution"),
                  "channels": Option(int, 8, "triplane channels")},
    "train-diff": {**_COMMON,
                   "source": Option(str, "gan", "gan | bank"),
                   "gan_ckpt": Option(str, "", "trained GAN checkpoint"),
                   "bank": Option(str, "", "fitted bank checkpoint"),
                   "count": Option(int, 2048, "training triplanes"),
                   "steps": Option(int, 3000, "optimizer steps"),
                   "batch": Option(int, 16, "batch size"),
                   "lr": Option(float, 2e-3, "AdamW learning rate"),
                   "ema": Option(float, 0.995, "EMA decay"),
                   "base": Option(int, 24, "denoiser base width"),
                   "condition": Option(str, "none", "none | image | lowres_image | edge_map | mask | semantic_vector"),
                   "joint_camera": Option(_bool, False, "diffuse the camera jointly"),
                   "camera_azimuth_deg": Option(float, 360.0,
                                                "input-camera azimuth arc; narrow it so joint pose prediction is identifiable"),
                   "schedule.kind": Option(str, "cosine", "cosine | shifted_cosine"),
                   "schedule.ratio": Option(float, 1.0, "shifted-cosine resolution ratio"),
                   "image_size": Option(int, 32, "conditioning render resolution"),
                   "samples_per_ray": Option(int, 24, "conditioning render quadrature")},
    "sample": {**_COMMON, **_SAMPLER,
               "ckpt": Option(str, "", "diffusion checkpoint"),
               "count": Option(int, 8, "samples to draw"),
               "probe_poses": Option(int, 8, "render poses per sample")},
    "invert": {**_COMMON, **_SAMPLER,
               "ckpt": Option(str, "", "diffusion checkpoint (conditional or not)"),
               "scene_seed": Option(int, 1000, "target scene seed"),
               "guidance.scale": Option(float, 3e6, "k in w_t = k sigma_t (calibrated for the mean-pixel MSE energy at 32^2)"),
               "langevin": Option(_bool, False, "enable Langevin correction")},
    "superres": {**_COMMON, **_SAMPLER,
                 "ckpt": Option(str, "", "diffusion checkpoint"),
                 "scene_seed": Option(int, 1000, "target scene seed"),
                 "factor": Option(int, 4, "downsampling factor"),
                 "guidance.scale": Option(float, 3e6, "k in w_t = k sigma_t (calibrated for the mean-pixel MSE energy at 32^2)"),
                 "langevin": Option(_bool, False, "enable Langevin correction")},
    "edge2scene": {**_COMMON, **_SAMPLER,
                   "ckpt": Option(str, "", "edge-conditional checkpoint"),
                   "scene_seed": Option(int, 1000, "target scene seed")},
    "eval": {**_COMMON,
             "ref": Option(str, "", "reference container (planes or stats)"),
             "test": Option(str, "", "container under test"),
             "what": Option(str, "stats", "stats | psnr")},
    "render": {**_COMMON,
               "planes": Option(str, "", "triplane container"),
               "decoder": Option(str, "", "decoder checkpoint"),
               "name": Option(str, "triplane", "array name inside the container"),
               "image_size": Option(int, 32, "render resolution"),
               "samples_per_ray": Option(int, 32, "quadrature points per ray"),
               "poses": Option(int, 5, "probe poses (yaw sweep)")},
}


def parse_value(stage: str, key: str, text: str):
    opt = SCHEMAS[stage][key]
    caster = opt.type
    return caster(text)


def parse_pairs(tokens: list[str]) -> dict[str, str]:
    """Split `key=value` tokens; malformed tokens are reported together."""
    pairs = {}
    errors = []
    for tok in tokens:
        if "=" not in tok:
            errors.append(f"malformed argument {tok!r} (expected key=value)")
            continue
        key, value = tok.split("=", 1)
        pairs[key] = value
    if errors:
        raise ConfigError(errors)
    return pairs


def load_config_file(path) -> dict[str, str]:
    pairs = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError([f"{path}:{ln}: malformed line {line!r}"])
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def resolve(stage: str, overrides: dict[str, str]) -> dict:
    """Typed config for a stage; collects every unknown key and bad value."""
    if stage not in SCHEMAS:
        raise ConfigError([f"unknown stage {stage!r} (expected one of {', '.join(STAGES)})"])
    schema = SCHEMAS[stage]
    merged = dict(overrides)
    if "config" in merged:
        file_pairs = load_config_file(merged.pop("config"))
        file_pairs.pop("stage", None)  # resolved snapshots carry their stage
        merged = {**file_pairs, **merged}

    errors = []
    cfg = {key: opt.default for key, opt in schema.items()}
    for key, text in merged.items():
        if key not in schema:
            errors.append(f"unknown key {key!r} for stage {stage}")
            continue
        try:
            cfg[key] = parse_value(stage, key, text)
        except (ValueError, TypeError):
            errors.append(f"bad value for {key!r}: {text!r}")
    if errors:
        raise ConfigError(errors)
    if not cfg["out"]:
        cfg["out"] = f"runs/{stage}"
    return cfg


def write_resolved(stage: str, cfg: dict, path) -> None:
    lines = [f"stage={stage}"]
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    Path(path).write_text("\n".join(lines) + "\n")
