"""Batch entry points: `tpdiff <stage> [key=value ...]`.

Every stage seeds all RNGs from the config, writes its resolved config and a
line-oriented metrics log next to its artifacts, and is bit-for-bit
reproducible from that snapshot in single-worker mode.
"""

from __future__ import annotations

import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import condition as condition_mod
from . import config as config_mod
from . import diffusion as diffusion_mod
from . import gan as gan_mod
from . import sampler as sampler_mod
from . import scenes as scenes_mod
from . import storage
from .condition import (CameraPrior, ImageConditionEncoder, JointLayout,
                        VectorConditionEncoder, joint_layout, pose_error,
                        resample_camera, scale_camera_vec)
from .field import FieldDecoder, Triplane
from .render import (RenderConfig, flatten_camera, look_at_camera, psnr, render,
                     ssim)
from .sampler import Guidance, SamplerConfig
from .schedule import Schedule, cosine_schedule, shifted_cosine
from .scenes import CONTROL_KINDS, control_A, make_scene, sample_view

PROBE_YAWS_DEG = (-35.0, -17.0, 0.0, 17.0, 35.0)


# ---------------------------------------------------------------------------
# checkpoint helpers
# ---------------------------------------------------------------------------


def _state_arrays(prefix: str, module: torch.nn.Module) -> dict:
    return {f"{prefix}/{k}": v.detach().cpu().numpy().astype(np.float32)
            for k, v in module.state_dict().items()}


def _load_state(module: torch.nn.Module, arrays: dict, prefix: str) -> None:
    state = {k[len(prefix) + 1:]: torch.from_numpy(v.copy())
             for k, v in arrays.items() if k.startswith(prefix + "/")}
    module.load_state_dict(state)


def _save_prior(prior: CameraPrior) -> np.ndarray:
    return np.array([prior.radius, *prior.z_band, prior.focal, prior.focal_rel_std,
                     *prior.azimuth], dtype=np.float32)


def _load_prior(vec: np.ndarray) -> CameraPrior:
    if len(vec) >= 7:  # float32 round-trip can push the arc a hair past 2*pi
        lo = float(vec[5])
        azimuth = (lo, min(float(vec[6]), lo + 2.0 * math.pi))
    else:
        azimuth = (0.0, 2.0 * math.pi)
    return CameraPrior(float(vec[0]), (float(vec[1]), float(vec[2])),
                       float(vec[3]), float(vec[4]), azimuth)


def _save_decoder(decoder: FieldDecoder, hidden: int) -> dict:
    arrays = _state_arrays("dec", decoder)
    arrays["meta/decoder_arch"] = np.array(
        [decoder.body[0].in_features, hidden, decoder.density_scale], dtype=np.float32)
    return arrays


def _load_decoder(arrays: dict) -> FieldDecoder:
    channels, hidden, scale = (float(x) for x in arrays["meta/decoder_arch"])
    decoder = FieldDecoder(int(channels), int(hidden), scale)
    _load_state(decoder, arrays, "dec")
    return decoder


def _load_schedule(vec: np.ndarray) -> Schedule:
    kind = "cosine" if vec[0] == 0 else "shifted_cosine"
    return Schedule(kind, float(vec[1]), float(vec[2]), float(vec[3]))


def _save_schedule(sched: Schedule) -> np.ndarray:
    return np.array([0 if sched.kind == "cosine" else 1, sched.shift,
                     sched.t_min, sched.t_max], dtype=np.float32)


def probe_cameras(n: int, prior: CameraPrior, focal: float | None = None) -> list:
    """n cameras spread around the band (uniform azimuth, mid-band elevations)."""
    cams = []
    for i in range(n):
        phi = 2.0 * math.pi * i / n
        z = 0.5 * (prior.z_band[0] + prior.z_band[1]) + 0.35 * math.cos(2.3 * i)
        z = min(max(z, prior.z_band[0]), prior.z_band[1])
        rho = math.sqrt(1.0 - z * z)
        eye = prior.radius * np.array([rho * math.cos(phi), rho * math.sin(phi), z])
        cams.append(look_at_camera(eye, focal=focal or prior.focal))
    return cams


def yaw_cameras(yaws_deg, prior: CameraPrior, elevation_deg: float = 15.0) -> list:
    cams = []
    for yaw in yaws_deg:
        yaw_r, el_r = math.radians(yaw), math.radians(elevation_deg)
        eye = prior.radius * np.array([math.sin(yaw_r) * math.cos(el_r),
                                       -math.cos(yaw_r) * math.cos(el_r),
                                       math.sin(el_r)])
        cams.append(look_at_camera(eye, focal=prior.focal))
    return cams


# ---------------------------------------------------------------------------
# stage: gen-data
# ---------------------------------------------------------------------------


def run_gen_data(cfg: dict, out: Path) -> None:
    rng = np.random.default_rng(cfg["seed"])
    rcfg = RenderConfig(cfg["image_size"], cfg["samples_per_ray"])
    prior = CameraPrior()
    arrays = {}
    manifest = []
    (out / "images").mkdir(exist_ok=True)
    for i in range(cfg["count"]):
        spec = make_scene(cfg["seed"] + i, cfg["scene_k"] or None)
        for j in range(cfg["views_per_scene"]):
            image, cam = sample_view(spec, rng, rcfg, prior)
            name = f"scene{i:04d}_view{j:02d}"
            storage.save_ppm(out / "images" / f"{name}.ppm", image.numpy())
            arrays[f"image/{name}"] = image.numpy()
            arrays[f"camera/{name}"] = flatten_camera(cam).numpy()
        arrays[f"semantic/scene{i:04d}"] = spec.semantic_vector
        manifest.append(f"seed={cfg['seed'] + i} scene={i} kind=scene"
                        f" views={cfg['views_per_scene']}")
    storage.save_arrays(out / "dataset.tpd", arrays)
    (out / "dataset.manifest").write_text("\n".join(manifest) + "\n")
    storage.append_metrics(out / "metrics.log",
                           {"stage": "gen-data", "scenes": cfg["count"],
                            "views": cfg["count"] * cfg["views_per_scene"]})


# ---------------------------------------------------------------------------
# stage: fit (reconstruction bank)
# ---------------------------------------------------------------------------


def run_fit(cfg: dict, out: Path) -> None:
    torch.manual_seed(cfg["seed"])
    rcfg = RenderConfig(cfg["image_size"], cfg["samples_per_ray"])
    prior = CameraPrior()
    specs = [make_scene(cfg["seed"] + i, cfg["scene_k"] or None)
             for i in range(cfg["scenes"])]
    decoder = FieldDecoder(cfg["channels"])
    bank = scenes_mod.fit_bank(
        specs, decoder, views_per_scene=cfg["views"], reg_weight=cfg["reg_weight"],
        resolution=cfg["resolution"], channels=cfg["channels"],
        iters_per_scene=cfg["iters"], lr=cfg["lr"], seed=cfg["seed"], cfg=rcfg,
        prior=prior)

    arrays = _save_decoder(decoder, decoder.body[0].out_features)
    arrays["meta/prior"] = _save_prior(prior)
    arrays["meta/render"] = np.array([rcfg.image_size, rcfg.samples_per_ray], np.float32)
    for i, (spec, tp) in enumerate(zip(specs, bank)):
        arrays[f"planes/{i:04d}"] = tp.planes.numpy()
        arrays[f"semantic/{i:04d}"] = spec.semantic_vector.astype(np.float32)
    storage.save_arrays(out / "bank.tpd", arrays)

    # held-out-view quality per scene
    rng = np.random.default_rng(cfg["seed"] + 777)
    for i, (spec, tp) in enumerate(zip(specs, bank)):
        target, cam = sample_view(spec, rng, rcfg, prior)
        with torch.no_grad():
            pred = render(tp, decoder, cam, rcfg)
        storage.append_metrics(out / "metrics.log",
                               {"scene": i, "heldout_psnr": psnr(pred, target),
                                "heldout_ssim": ssim(pred, target)})


# ---------------------------------------------------------------------------
# stage: train-gan
# ---------------------------------------------------------------------------


def run_train_gan(cfg: dict, out: Path) -> None:
    torch.manual_seed(cfg["seed"])
    gen_t = torch.Generator().manual_seed(cfg["seed"])
    rng = np.random.default_rng(cfg["seed"])
    rcfg = RenderConfig(cfg["image_size"], cfg["samples_per_ray"], stratified=True)
    prior = CameraPrior()

    real_images, real_vecs = [], []
    lo, hi = condition_mod.camera_bounds(prior)
    lo_t = torch.as_tensor(lo, dtype=torch.float32)
    hi_t = torch.as_tensor(hi, dtype=torch.float32)
    for i in range(cfg["train_views"]):
        spec = make_scene(cfg["seed"] + i, cfg["scene_k"] or None)
        image, cam = sample_view(spec, rng, replace(rcfg, stratified=False), prior)
        real_images.append(image)
        real_vecs.append(2.0 * (flatten_camera(cam).float() - lo_t) / (hi_t - lo_t) - 1.0)
    real_images = torch.stack(real_images)
    real_vecs = torch.stack(real_vecs)

    gan_cfg = gan_mod.GanConfig(cfg["steps"], cfg["batch"], cfg["gamma"],
                                cfg["r1_interval"], cfg["lr_g"], cfg["lr_d"],
                                cfg["plane_l2"], cfg["u_dim"])
    generator = gan_mod.Generator(cfg["u_dim"], cfg["channels"], cfg["resolution"])
    disc = gan_mod.Discriminator(cfg["image_size"])
    decoder = FieldDecoder(cfg["channels"])
    trainer = gan_mod.GanTrainer(generator, disc, decoder, gan_cfg, rcfg, prior)

    for step in range(cfg["steps"]):
        idx = torch.randint(real_images.shape[0], (cfg["batch"],), generator=gen_t)
        metrics = trainer.step(real_images[idx], real_vecs[idx], step, rng, gen_t)
        if step % 100 == 0 or step == cfg["steps"] - 1:
            storage.append_metrics(out / "metrics.log", {"step": step, **metrics})

    arrays = _state_arrays("gen", generator)
    arrays.update(_state_arrays("disc", disc))
    arrays.update(_save_decoder(decoder, decoder.body[0].out_features))
    arrays["meta/gen_arch"] = np.array(
        [cfg["u_dim"], cfg["channels"], cfg["resolution"], generator.base], np.float32)
    arrays["meta/disc_arch"] = np.array([cfg["image_size"], 32], np.float32)
    arrays["meta/render"] = np.array([rcfg.image_size, rcfg.samples_per_ray], np.float32)
    arrays["meta/prior"] = _save_prior(prior)
    storage.save_arrays(out / "gan.tpd", arrays)


def load_gan(path) -> tuple[gan_mod.Generator, FieldDecoder, CameraPrior, RenderConfig]:
    arrays = storage.load_arrays(path)
    u_dim, channels, resolution, base = (int(x) for x in arrays["meta/gen_arch"])
    generator = gan_mod.Generator(u_dim, channels, resolution, base)
    _load_state(generator, arrays, "gen")
    decoder = _load_decoder(arrays)
    prior = _load_prior(arrays["meta/prior"])
    size, spp = (int(x) for x in arrays["meta/render"])
    return generator, decoder, prior, RenderConfig(size, spp)


def load_bank(path):
    arrays = storage.load_arrays(path)
    names = sorted(k for k in arrays if k.startswith("planes/"))
    bank = [Triplane(torch.from_numpy(arrays[k].copy())) for k in names]
    sem_names = sorted(k for k in arrays if k.startswith("semantic/"))
    semantics = [torch.from_numpy(arrays[k].copy()) for k in sem_names] or None
    decoder = _load_decoder(arrays)
    prior = _load_prior(arrays["meta/prior"])
    size, spp = (int(x) for x in arrays["meta/render"])
    return bank, decoder, prior, RenderConfig(size, spp), semantics


# ---------------------------------------------------------------------------
# stage: train-diff
# ---------------------------------------------------------------------------


_COND_IMAGE_KINDS = ("image", "lowres_image", "edge_map", "mask")


def _condition_input(kind: str, payload: torch.Tensor, image_size: int) -> torch.Tensor:
    """Shape a stored control payload for the condition encoder."""
    if kind == "semantic_vector":
        return payload
    if payload.ndim == 3 and payload.shape[-1] not in (1, 3):  # batch of maps
        payload = payload.unsqueeze(-1)
    if payload.ndim == 3:  # single image
        payload = payload.unsqueeze(0)
    if payload.shape[1] != image_size:  # e.g. lowres: resize to the model grid
        x = payload.permute(0, 3, 1, 2)
        x = torch.nn.functional.interpolate(x, size=(image_size, image_size),
                                            mode="nearest")
        payload = x.permute(0, 2, 3, 1)
    return payload


def build_dataset_tensors(cfg: dict, out: Path):
    """Materialize the diffusion training set from the configured source."""
    rng = np.random.default_rng(cfg["seed"] + 1)
    sample_gen = torch.Generator().manual_seed(cfg["seed"] + 2)
    semantics = None
    if cfg["source"] == "gan":
        if not cfg["gan_ckpt"]:
            raise config_mod.ConfigError(["train-diff with source=gan needs gan_ckpt"])
        generator, decoder, prior, rcfg = load_gan(cfg["gan_ckpt"])
        sample_fn = gan_mod.gan_sampler(generator, sample_gen)
        bank_size = None
    elif cfg["source"] == "bank":
        if not cfg["bank"]:
            raise config_mod.ConfigError(["train-diff with source=bank needs bank"])
        bank, decoder, prior, rcfg, semantics = load_bank(cfg["bank"])
        sample_fn = scenes_mod.bank_sampler(bank)
        bank_size = len(bank)
    else:
        raise config_mod.ConfigError([f"unknown source {cfg['source']!r}"])

    rcfg = RenderConfig(cfg["image_size"], cfg["samples_per_ray"])
    if cfg["camera_azimuth_deg"] < 360.0:
        half = math.radians(cfg["camera_azimuth_deg"]) / 2.0
        prior = replace(prior, azimuth=(-half, half))
    kind = None if cfg["condition"] == "none" else cfg["condition"]
    if kind is not None and kind not in CONTROL_KINDS:
        raise config_mod.ConfigError([f"unknown condition kind {kind!r}"])
    if kind == "semantic_vector" and semantics is None:
        raise config_mod.ConfigError(
            ["semantic_vector conditioning needs source=bank (the bank records"
             " each scene's semantic vector)"])

    stream_kind = kind if kind not in (None, "semantic_vector") else (
        "image" if cfg["joint_camera"] else None)
    items = list(scenes_mod.build_diffusion_dataset(
        sample_fn, cfg["count"], rng, decoder=decoder, cfg=rcfg, prior=prior,
        control_kind=stream_kind))
    planes = torch.stack([it["planes"] for it in items])
    data = {"planes": planes, "decoder": decoder, "prior": prior, "rcfg": rcfg,
            "kind": kind}
    if stream_kind is not None:
        data["cameras"] = [it["camera"] for it in items]
    if kind == "semantic_vector":
        data["controls"] = torch.stack(
            [semantics[i % bank_size] for i in range(cfg["count"])])
    elif kind is not None:
        data["controls"] = torch.stack([it["control"] for it in items])
    return data


def run_train_diff(cfg: dict, out: Path) -> None:
    torch.manual_seed(cfg["seed"])
    gen_t = torch.Generator().manual_seed(cfg["seed"] + 3)
    data = build_dataset_tensors(cfg, out)
    planes = data["planes"]  # (N, 3, C, R, R)
    N, _, C, R, _ = planes.shape
    mean, std = scenes_mod.dataset_statistics(planes)
    flat = planes.reshape(N, 3 * C, R, R)
    targets = (flat - mean[None, :, None, None]) / std[None, :, None, None]

    layout = None
    if cfg["joint_camera"]:
        layout = joint_layout(Triplane(planes[0]), data["prior"])
        cam_vecs = torch.stack([
            scale_camera_vec(flatten_camera(c).float(), layout)
            for c in data["cameras"]])
        cam_channels = cam_vecs[:, :, None, None].expand(N, condition_mod.CAMERA_DIM, R, R)
        targets = torch.cat([targets, cam_channels], dim=1)

    kind = data["kind"]
    cond_inputs = None
    encoder = None
    cond_code, cond_param = 0, 0
    if kind == "semantic_vector":
        cond_inputs = data["controls"]
        encoder = VectorConditionEncoder(cond_inputs.shape[-1])
        cond_code, cond_param = 2, cond_inputs.shape[-1]
    elif kind is not None:
        cond_inputs = _condition_input(kind, data["controls"], R)
        encoder = ImageConditionEncoder(cond_inputs.shape[-1], base=16)
        cond_code, cond_param = 1, 16
    model = diffusion_mod.Denoiser(targets.shape[1], base=cfg["base"],
                                   cond_encoder=encoder)

    if cfg["schedule.kind"] == "shifted_cosine":
        sched = shifted_cosine(cfg["schedule.ratio"])
    else:
        sched = cosine_schedule()

    opt = torch.optim.AdamW(model.parameters(), lr=cfg["lr"])
    ema = {k: v.detach().clone() for k, v in model.state_dict().items()}
    decay = cfg["ema"]
    for step in range(cfg["steps"]):
        idx = torch.randint(N, (cfg["batch"],), generator=gen_t)
        t = sched.t_min + (sched.t_max - sched.t_min) * torch.rand(
            cfg["batch"], generator=gen_t, dtype=torch.float64)
        noise = torch.empty(cfg["batch"], *targets.shape[1:]).normal_(generator=gen_t)
        cond = cond_inputs[idx] if cond_inputs is not None else None
        loss = diffusion_mod.z0_loss(model, targets[idx], t, sched, noise=noise,
                                     cond=cond)
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            for k, v in model.state_dict().items():
                ema[k].mul_(decay).add_(v, alpha=1 - decay)
        if step % 100 == 0 or step == cfg["steps"] - 1:
            storage.append_metrics(out / "metrics.log",
                                   {"step": step, "loss": float(loss.detach())})

    model.load_state_dict(ema)
    arrays = _state_arrays("model", model)
    arrays.update(_save_decoder(data["decoder"], data["decoder"].body[0].out_features))
    arrays["meta/arch"] = np.array(
        [targets.shape[1], cfg["base"], model.emb_dim, cond_code, cond_param,
         int(cfg["joint_camera"]), C, R], np.float32)
    arrays["meta/schedule"] = _save_schedule(sched)
    arrays["meta/stats_mean"] = mean.numpy()
    arrays["meta/stats_std"] = std.numpy()
    arrays["meta/render"] = np.array([data["rcfg"].image_size,
                                      data["rcfg"].samples_per_ray], np.float32)
    arrays["meta/prior"] = _save_prior(data["prior"])
    arrays["meta/condition_kind"] = np.array(
        [CONTROL_KINDS.index(kind) if kind else -1], np.float32)
    if cond_code == 1:
        arrays["meta/cond_channels"] = np.array([cond_inputs.shape[-1]], np.float32)
    if layout is not None:
        arrays["meta/layout"] = layout.descriptor()
    storage.save_arrays(out / "diff.tpd", arrays)


class DiffusionCheckpoint:
    """A trained diffusion model plus everything needed to sample and render."""

    def __init__(self, path):
        arrays = storage.load_arrays(path)
        (total_ch, base, emb, cond_code, cond_param, joint, C, R) = (
            int(x) for x in arrays["meta/arch"])
        encoder = None
        self.condition_kind = None
        code = int(arrays["meta/condition_kind"][0])
        if cond_code == 1:
            in_ch = int(arrays["meta/cond_channels"][0])
            encoder = ImageConditionEncoder(in_ch, base=cond_param)
            self.condition_kind = CONTROL_KINDS[code]
        elif cond_code == 2:
            encoder = VectorConditionEncoder(cond_param)
            self.condition_kind = CONTROL_KINDS[code]
        self.model = diffusion_mod.Denoiser(total_ch, base=base, cond_encoder=encoder)
        _load_state(self.model, arrays, "model")
        self.model.eval()
        self.decoder = _load_decoder(arrays)
        self.sched = _load_schedule(arrays["meta/schedule"])
        self.mean = torch.from_numpy(arrays["meta/stats_mean"].copy())
        self.std = torch.from_numpy(arrays["meta/stats_std"].copy())
        self.joint = bool(joint)
        self.channels, self.resolution, self.total_channels = C, R, total_ch
        size, spp = (int(x) for x in arrays["meta/render"])
        self.rcfg = RenderConfig(size, spp)
        self.prior = _load_prior(arrays["meta/prior"])
        self.layout = (JointLayout.from_descriptor(arrays["meta/layout"])
                       if "meta/layout" in arrays else None)

    def denormalize_flat(self, z: torch.Tensor) -> torch.Tensor:
        """Model-space plane channels (B, 3C, R, R) back to triplane values."""
        return z * self.std[None, :, None, None] + self.mean[None, :, None, None]

    def to_triplane(self, z: torch.Tensor) -> Triplane:
        """One sample (total_channels, R, R) -> bounded Triplane."""
        tc = 3 * self.channels
        flat = self.denormalize_flat(z[:tc].unsqueeze(0))[0]
        planes = flat.reshape(3, self.channels, self.resolution, self.resolution)
        return Triplane(planes.clamp(-1 + 1e-6, 1 - 1e-6))

    def camera_vec(self, z: torch.Tensor) -> torch.Tensor:
        if not self.joint:
            raise ValueError("checkpoint has no camera channels")
        tc = 3 * self.channels
        scaled = z[tc:].mean(dim=(1, 2))
        return condition_mod.unscale_camera_vec(scaled.double(), self.layout)


def _sampler_config(cfg: dict, guidance_scale: float = 0.0,
                    langevin: bool | None = None) -> SamplerConfig:
    window = cfg["langevin.window"]
    steps = cfg["langevin.steps"]
    if langevin is False:
        steps = 0
    return SamplerConfig(cfg["steps"], steps, cfg["langevin.delta"], window,
                         guidance_scale, cfg["eta"], cfg["method"])


def run_sample(cfg: dict, out: Path) -> None:
    if not cfg["ckpt"]:
        raise config_mod.ConfigError(["sample needs ckpt=<diffusion checkpoint>"])
    torch.manual_seed(cfg["seed"])
    gen_t = torch.Generator().manual_seed(cfg["seed"])
    ckpt = DiffusionCheckpoint(cfg["ckpt"])
    if ckpt.condition_kind is not None:
        raise config_mod.ConfigError(
            ["sample draws unconditionally; this checkpoint needs conditions"
             " (use invert/superres/edge2scene)"])
    scfg = _sampler_config(cfg)
    shape = (cfg["count"], ckpt.total_channels, ckpt.resolution, ckpt.resolution)
    z = sampler_mod.sample(ckpt.model, ckpt.sched, scfg, shape, generator=gen_t)

    arrays = {}
    (out / "images").mkdir(exist_ok=True)
    cams = probe_cameras(cfg["probe_poses"], ckpt.prior)
    stacked = []
    for i in range(cfg["count"]):
        tp = ckpt.to_triplane(z[i])
        stacked.append(tp.planes)
        arrays[f"planes/{i:04d}"] = tp.planes.numpy()
        for j, cam in enumerate(cams):
            with torch.no_grad():
                img = render(tp, ckpt.decoder, cam, ckpt.rcfg)
            if not torch.isfinite(img).all():
                raise sampler_mod.SamplerFault(f"non-finite render for sample {i}")
            storage.save_ppm(out / "images" / f"sample{i:03d}_pose{j}.ppm", img.numpy())
    mean, std = scenes_mod.dataset_statistics(torch.stack(stacked))
    train_mean, train_std = ckpt.mean, ckpt.std
    storage.append_metrics(out / "metrics.log", {
        "samples": cfg["count"],
        "mean_absdiff": float((mean - train_mean).abs().max()),
        "std_absdiff": float((std - train_std).abs().max()),
        "std_ratio_max": float((std / train_std).max()),
        "std_ratio_min": float((std / train_std).min()),
    })
    storage.save_arrays(out / "samples.tpd", arrays)


def _mse_energy(target: torch.Tensor):
    def energy(images: torch.Tensor) -> torch.Tensor:
        return (images - target).square().mean(dim=(1, 2, 3))

    return energy


def _downsampled_energy(target_low: torch.Tensor, factor: int):
    def energy(images: torch.Tensor) -> torch.Tensor:
        B, H, W, _ = images.shape
        low = images.reshape(B, H // factor, factor, W // factor, factor, 3).mean(dim=(2, 4))
        return (low - target_low).square().mean(dim=(1, 2, 3))

    return energy


def invert_views(ckpt: DiffusionCheckpoint, targets: torch.Tensor, cams, cfg: dict, *,
                 guidance_scale: float, langevin: bool, generator=None, energy=None,
                 cond=None):
    """Sample one triplane per target view (batched chains).

    targets is (B, H, W, 3); cams is one Camera or a list of B cameras. For
    image-like conditional checkpoints the condition is derived from the
    targets unless an explicit cond batch is passed.
    """
    if targets.ndim == 3:
        targets = targets.unsqueeze(0)
    count = targets.shape[0]
    scfg = _sampler_config(cfg, guidance_scale, langevin)
    if cond is None and ckpt.condition_kind is not None:
        if ckpt.condition_kind == "semantic_vector":
            raise ValueError("semantic-vector checkpoints need an explicit cond batch")
        payload = torch.stack([control_A(ckpt.condition_kind, t).payload
                               for t in targets])
        cond = _condition_input(ckpt.condition_kind, payload, ckpt.resolution)
    guidance = None
    if guidance_scale != 0.0:
        guidance = Guidance(
            energy or _mse_energy(targets), cams, ckpt.decoder, ckpt.rcfg,
            guidance_scale, triplane_channels=3 * ckpt.channels,
            denormalize=ckpt.denormalize_flat)
    shape = (count, ckpt.total_channels, ckpt.resolution, ckpt.resolution)
    return sampler_mod.sample(ckpt.model, ckpt.sched, scfg, shape,
                              guidance=guidance, cond=cond, generator=generator)


def run_invert(cfg: dict, out: Path) -> None:
    if not cfg["ckpt"]:
        raise config_mod.ConfigError(["invert needs ckpt=<diffusion checkpoint>"])
    torch.manual_seed(cfg["seed"])
    gen_t = torch.Generator().manual_seed(cfg["seed"])
    rng = np.random.default_rng(cfg["scene_seed"])
    ckpt = DiffusionCheckpoint(cfg["ckpt"])
    spec = make_scene(cfg["scene_seed"], k=1)
    target, cam = sample_view(spec, rng, ckpt.rcfg, ckpt.prior)

    z = invert_views(ckpt, target, cam, cfg, guidance_scale=cfg["guidance.scale"],
                     langevin=cfg["langevin"], generator=gen_t)[0]
    tp = ckpt.to_triplane(z)
    (out / "images").mkdir(exist_ok=True)
    storage.save_ppm(out / "images" / "target.ppm", target.numpy())
    with torch.no_grad():
        pred = render(tp, ckpt.decoder, cam, ckpt.rcfg)
    storage.save_ppm(out / "images" / "input_view.ppm", pred.numpy())
    record = {"input_psnr": psnr(pred, target), "input_ssim": ssim(pred, target)}
    field = scenes_mod.analytic_field(spec)
    for j, probe in enumerate(yaw_cameras(PROBE_YAWS_DEG, ckpt.prior)):
        with torch.no_grad():
            probe_pred = render(tp, ckpt.decoder, probe, ckpt.rcfg)
            probe_true = scenes_mod.render_field(field, probe, ckpt.rcfg)
        storage.save_ppm(out / "images" / f"probe{j}.ppm", probe_pred.numpy())
        record[f"probe{j}_psnr"] = psnr(probe_pred, probe_true)
        record[f"probe{j}_ssim"] = ssim(probe_pred, probe_true)
    if ckpt.joint:
        rot_err, trans_err, focal_err = pose_error(ckpt.camera_vec(z), cam)
        record.update({"pose_rot_deg": rot_err, "pose_trans": trans_err,
                       "pose_focal_rel": focal_err})
    storage.save_arrays(out / "inverted.tpd", {"triplane": tp.planes.numpy()})
    storage.append_metrics(out / "metrics.log", record)


def run_superres(cfg: dict, out: Path) -> None:
    if not cfg["ckpt"]:
        raise config_mod.ConfigError(["superres needs ckpt=<diffusion checkpoint>"])
    torch.manual_seed(cfg["seed"])
    gen_t = torch.Generator().manual_seed(cfg["seed"])
    rng = np.random.default_rng(cfg["scene_seed"])
    ckpt = DiffusionCheckpoint(cfg["ckpt"])
    spec = make_scene(cfg["scene_seed"], k=1)
    target, cam = sample_view(spec, rng, ckpt.rcfg, ckpt.prior)
    low = control_A("lowres_image", target, factor=cfg["factor"]).payload

    scale = cfg["guidance.scale"]
    energy = _downsampled_energy(low, cfg["factor"]) if scale != 0.0 else None
    cond = None
    if ckpt.condition_kind is not None:
        if ckpt.condition_kind != "lowres_image":
            raise config_mod.ConfigError(
                [f"checkpoint conditions on {ckpt.condition_kind!r}, not lowres_image"])
        cond = _condition_input("lowres_image", low.unsqueeze(0), ckpt.resolution)
    scfg = _sampler_config(cfg, scale, cfg["langevin"])
    guidance = None
    if scale != 0.0:
        guidance = Guidance(energy, cam, ckpt.decoder, ckpt.rcfg, scale,
                            triplane_channels=3 * ckpt.channels,
                            denormalize=ckpt.denormalize_flat)
    shape = (1, ckpt.total_channels, ckpt.resolution, ckpt.resolution)
    z = sampler_mod.sample(ckpt.model, ckpt.sched, scfg, shape, guidance=guidance,
                           cond=cond, generator=gen_t)[0]
    tp = ckpt.to_triplane(z)
    with torch.no_grad():
        pred = render(tp, ckpt.decoder, cam, ckpt.rcfg)
    pred_low = control_A("lowres_image", pred, factor=cfg["factor"]).payload
    (out / "images").mkdir(exist_ok=True)
    storage.save_ppm(out / "images" / "target_full.ppm", target.numpy())
    storage.save_ppm(out / "images" / "pred_full.ppm", pred.numpy())
    storage.append_metrics(out / "metrics.log", {
        "full_psnr": psnr(pred, target),
        "low_psnr": psnr(pred_low, low),
    })


def run_edge2scene(cfg: dict, out: Path) -> None:
    if not cfg["ckpt"]:
        raise config_mod.ConfigError(["edge2scene needs ckpt=<edge-conditional checkpoint>"])
    torch.manual_seed(cfg["seed"])
    gen_t = torch.Generator().manual_seed(cfg["seed"])
    rng = np.random.default_rng(cfg["scene_seed"])
    ckpt = DiffusionCheckpoint(cfg["ckpt"])
    if ckpt.condition_kind != "edge_map":
        raise config_mod.ConfigError(["edge2scene needs a checkpoint trained with"
                                      " condition=edge_map"])
    spec = make_scene(cfg["scene_seed"], k=1)
    target, cam = sample_view(spec, rng, ckpt.rcfg, ckpt.prior)
    edges = control_A("edge_map", target).payload
    cond = _condition_input("edge_map", edges.unsqueeze(0), ckpt.resolution)
    scfg = _sampler_config(cfg, 0.0, False)
    shape = (1, ckpt.total_channels, ckpt.resolution, ckpt.resolution)
    z = sampler_mod.sample(ckpt.model, ckpt.sched, scfg, shape, cond=cond,
                           generator=gen_t)[0]
    tp = ckpt.to_triplane(z)
    with torch.no_grad():
        pred = render(tp, ckpt.decoder, cam, ckpt.rcfg)
    pred_edges = control_A("edge_map", pred).payload
    (out / "images").mkdir(exist_ok=True)
    storage.save_ppm(out / "images" / "target.ppm", target.numpy())
    storage.save_ppm(out / "images" / "generated.ppm", pred.numpy())
    storage.append_metrics(out / "metrics.log", {
        "edge_l1": float((pred_edges - edges).abs().mean()),
        "view_psnr": psnr(pred, target),
    })


def run_eval(cfg: dict, out: Path) -> None:
    if not cfg["ref"] or not cfg["test"]:
        raise config_mod.ConfigError(["eval needs ref= and test= containers"])
    ref = storage.load_arrays(cfg["ref"])
    test = storage.load_arrays(cfg["test"])
    if cfg["what"] == "stats":
        def planes_of(d):
            names = sorted(k for k in d if k.startswith("planes/"))
            return torch.stack([torch.from_numpy(d[k].copy()) for k in names])

        m_ref, s_ref = scenes_mod.dataset_statistics(planes_of(ref))
        m_test, s_test = scenes_mod.dataset_statistics(planes_of(test))
        storage.append_metrics(out / "metrics.log", {
            "mean_absdiff": float((m_ref - m_test).abs().max()),
            "std_ratio_max": float((s_test / s_ref).max()),
            "std_ratio_min": float((s_test / s_ref).min()),
        })
    elif cfg["what"] == "psnr":
        common = sorted(set(ref) & set(test))
        if not common:
            raise config_mod.ConfigError(["eval psnr: containers share no arrays"])
        for name in common:
            a = torch.from_numpy(ref[name].copy())
            b = torch.from_numpy(test[name].copy())
            storage.append_metrics(out / "metrics.log",
                                   {"array": name.replace(" ", "_"),
                                    "psnr": psnr(a, b)})
    else:
        raise config_mod.ConfigError([f"unknown eval target {cfg['what']!r}"])


def run_render(cfg: dict, out: Path) -> None:
    if not cfg["planes"] or not cfg["decoder"]:
        raise config_mod.ConfigError(["render needs planes= and decoder= files"])
    arrays = storage.load_arrays(cfg["planes"])
    if cfg["name"] not in arrays:
        raise config_mod.ConfigError(
            [f"array {cfg['name']!r} not in container (has {sorted(arrays)[:8]})"])
    tp = Triplane(torch.from_numpy(arrays[cfg["name"]].copy()))
    dec_arrays = storage.load_arrays(cfg["decoder"])
    decoder = _load_decoder(dec_arrays)
    prior = (_load_prior(dec_arrays["meta/prior"]) if "meta/prior" in dec_arrays
             else CameraPrior())
    rcfg = RenderConfig(cfg["image_size"], cfg["samples_per_ray"])
    (out / "images").mkdir(exist_ok=True)
    yaws = PROBE_YAWS_DEG if cfg["poses"] == 5 else tuple(
        -35.0 + 70.0 * i / max(cfg["poses"] - 1, 1) for i in range(cfg["poses"]))
    for j, cam in enumerate(yaw_cameras(yaws, prior)):
        with torch.no_grad():
            img = render(tp, decoder, cam, rcfg)
        storage.save_ppm(out / "images" / f"pose{j}.ppm", img.numpy())
    storage.append_metrics(out / "metrics.log", {"rendered": len(yaws)})


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

_RUNNERS = {
    "gen-data": run_gen_data,
    "fit": run_fit,
    "train-gan": run_train_gan,
    "train-diff": run_train_diff,
    "sample": run_sample,
    "invert": run_invert,
    "superres": run_superres,
    "edge2scene": run_edge2scene,
    "eval": run_eval,
    "render": run_render,
}


def run(stage: str, overrides: dict[str, str]) -> int:
    """Resolve the config, run the stage, and write the resolved snapshot."""
    cfg = config_mod.resolve(stage, overrides)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    config_mod.write_resolved(stage, cfg, out / "resolved.cfg")
    _RUNNERS[stage](cfg, out)
    return 0


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if not argv or argv[0] in ("-h", "--help"):
        print("usage: tpdiff <stage> [key=value ...]")
        print(f"stages: {', '.join(config_mod.STAGES)}")
        return 0
    stage = argv[0]
    try:
        overrides = config_mod.parse_pairs(argv[1:])
        return run(stage, overrides)
    except config_mod.ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return 2
    except Exception as exc:  # module faults -> non-zero exit with context
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
