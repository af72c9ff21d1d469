"""Procedural ground-truth scenes, single-view data generation, control-signal
operators, and the reconstruction-based triplane fit.

A scene is a sum of 1-3 anisotropic Gaussian-falloff ellipsoids with
per-primitive colors, confined to the unit box. Scenes are analytic fields,
so posed views can be rendered without any learned component, and the
concatenated normalized parameters double as a toy semantic embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from .condition import CameraPrior, resample_camera
from .field import FieldDecoder, Triplane, clamp_bound, l2_reg, lookup_planes
from .render import (Camera, RenderConfig, generate_rays, render_field, render_rays,
                     triplane_field)

CONTROL_KINDS = ("image", "lowres_image", "edge_map", "mask", "semantic_vector")
MAX_PRIMITIVES = 3
SEMANTIC_DIM = 10 * MAX_PRIMITIVES + MAX_PRIMITIVES  # per-primitive params + count one-hot


class FitFault(RuntimeError):
    """Raised when the reconstruction fit diverges."""


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    k: int
    centers: np.ndarray     # (k, 3) in [-0.5, 0.5]
    radii: np.ndarray       # (k, 3) in [0.1, 0.4]
    colors: np.ndarray      # (k, 3) in [0.15, 0.95]
    amplitudes: np.ndarray  # (k,) density amplitudes

    @property
    def semantic_vector(self) -> np.ndarray:
        """Unit-norm concatenation of normalized parameters, zero-padded to 3 slots."""
        parts = []
        for i in range(MAX_PRIMITIVES):
            if i < self.k:
                parts.append(np.concatenate([
                    self.centers[i] / 0.5,
                    (self.radii[i] - 0.25) / 0.15,
                    self.colors[i] * 2.0 - 1.0,
                    [(self.amplitudes[i] - 37.5) / 12.5],
                ]))
            else:
                parts.append(np.zeros(10))
        onehot = np.zeros(MAX_PRIMITIVES)
        onehot[self.k - 1] = 1.0
        vec = np.concatenate(parts + [onehot])
        return vec / np.linalg.norm(vec)


def make_scene(seed: int, k: int | None = None) -> SceneSpec:
    """Deterministic procedural scene; primitives stay inside the unit box
    (centers clamped so the 2-sigma ellipsoid fits within +/-0.95)."""
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, MAX_PRIMITIVES + 1)) if k is None else k
    radii = rng.uniform(0.1, 0.4, size=(k, 3))
    cmax = np.minimum(0.5, 0.95 - 2.0 * radii)
    centers = rng.uniform(-cmax, cmax)
    colors = rng.uniform(0.15, 0.95, size=(k, 3))
    amplitudes = rng.uniform(25.0, 50.0, size=k)
    return SceneSpec(seed, k, centers, radii, colors, amplitudes)


def analytic_field(spec: SceneSpec):
    """Density/color field of the scene as a torch-callable on points (..., 3)."""
    centers = torch.as_tensor(spec.centers)
    radii = torch.as_tensor(spec.radii)
    colors = torch.as_tensor(spec.colors)
    amps = torch.as_tensor(spec.amplitudes)

    def field_fn(points: torch.Tensor):
        c = centers.to(points.dtype)
        r = radii.to(points.dtype)
        col = colors.to(points.dtype)
        a = amps.to(points.dtype)
        d = (points.unsqueeze(-2) - c) / r  # (..., k, 3)
        g = a * torch.exp(-0.5 * d.square().sum(-1))  # (..., k)
        density = g.sum(-1)
        color = (g.unsqueeze(-1) * col).sum(-2) / (density.unsqueeze(-1) + 1e-8)
        return color, density

    return field_fn


def scene_density(spec: SceneSpec, points) -> torch.Tensor:
    _, density = analytic_field(spec)(torch.as_tensor(points, dtype=torch.float64))
    return density


def sample_view(spec: SceneSpec, rng: np.random.Generator,
                cfg: RenderConfig = RenderConfig(),
                prior: CameraPrior = CameraPrior()) -> tuple[torch.Tensor, Camera]:
    """One posed view: camera looking at the origin from a uniform direction
    at the prior radius (clean intrinsics), image rendered analytically."""
    cam = resample_camera(rng, replace(prior, focal_rel_std=0.0))
    image = render_field(analytic_field(spec), cam, cfg)
    return image, cam


# ---------------------------------------------------------------------------
# control-signal operators A
# ---------------------------------------------------------------------------


@dataclass
class ControlSignal:
    kind: str
    payload: torch.Tensor
    camera: Camera | None = None


def control_A(kind: str, image: torch.Tensor | None = None, *,
              spec: SceneSpec | None = None, factor: int = 4,
              threshold: float = 0.02,
              background=(0.0, 0.0, 0.0)) -> ControlSignal:
    """Convert a rendered view into a control signal of the requested kind."""
    if kind not in CONTROL_KINDS:
        raise ValueError(f"unknown control kind {kind!r}")
    if kind == "semantic_vector":
        if spec is None:
            raise ValueError("semantic_vector control needs the scene spec")
        return ControlSignal(kind, torch.as_tensor(spec.semantic_vector, dtype=torch.float32))
    if image is None:
        raise ValueError(f"{kind} control needs an image")
    if kind == "image":
        return ControlSignal(kind, image)
    if kind == "lowres_image":
        H, W, _ = image.shape
        if H % factor or W % factor:
            raise ValueError("image size must be divisible by the downsample factor")
        low = image.reshape(H // factor, factor, W // factor, factor, 3).mean(dim=(1, 3))
        return ControlSignal(kind, low)
    if kind == "edge_map":
        gray = image.mean(dim=-1)
        gx = torch.zeros_like(gray)
        gy = torch.zeros_like(gray)
        gx[:, 1:-1] = (gray[:, 2:] - gray[:, :-2]) / 2.0
        gy[1:-1, :] = (gray[2:, :] - gray[:-2, :]) / 2.0
        mag = torch.sqrt(gx.square() + gy.square())
        peak = float(mag.max())
        return ControlSignal(kind, mag / peak if peak > 0 else mag)
    # mask: any channel departing from the background beyond the threshold
    bg = torch.as_tensor(background, dtype=image.dtype)
    fg = ((image - bg).abs() > threshold).any(dim=-1)
    return ControlSignal(kind, fg.to(image.dtype))


# ---------------------------------------------------------------------------
# reconstruction baseline (triplane fitting)
# ---------------------------------------------------------------------------


def fit_triplane(views: list[tuple[torch.Tensor, Camera]], decoder: FieldDecoder,
                 reg_weight: float = 1.0, *, resolution: int = 32, channels: int = 8,
                 iters: int = 400, lr: float = 5e-2, rays_per_iter: int = 2048,
                 train_decoder: bool = False, generator: torch.Generator | None = None,
                 samples_per_ray: int = 24, extent: float = 1.0,
                 background=(0.0, 0.0, 0.0), raw_init: torch.Tensor | None = None,
                 optimizer: str = "adam", return_history: bool = False):
    """Fit tanh-bounded plane values to posed images by gradient descent.

    Minimizes mean squared pixel error over ray minibatches plus
    reg_weight * l2_reg of the bounded planes. Raises FitFault on divergence.
    Returns the Triplane, or (Triplane, per-iteration losses) with history.
    """
    if not views:
        raise ValueError("at least one posed view is required")
    cfg = RenderConfig(image_size=views[0][0].shape[0], samples_per_ray=samples_per_ray,
                       background=background)
    origins, dirs, targets = [], [], []
    for image, cam in views:
        o, d = generate_rays(cam, cfg)
        origins.append(o.reshape(-1, 3))
        dirs.append(d.reshape(-1, 3))
        targets.append(image.reshape(-1, 3))
    origins = torch.cat(origins)
    dirs = torch.cat(dirs)
    targets = torch.cat(targets)
    near, far = views[0][1].near, views[0][1].far

    raw = (torch.zeros(3, channels, resolution, resolution) if raw_init is None
           else raw_init.detach().clone())
    raw.requires_grad_(True)
    params = [raw] + (list(decoder.parameters()) if train_decoder else [])
    if optimizer == "adam":
        opt = torch.optim.Adam(params, lr=lr)
    elif optimizer == "sgd":
        opt = torch.optim.SGD(params, lr=lr)
    else:
        raise ValueError(f"unknown optimizer {optimizer!r}")

    def field_fn(points):
        flat = points.reshape(-1, 3)
        feats = lookup_planes(torch.tanh(raw), flat, extent)
        color, density = decoder(feats)
        inside = (flat.abs() <= extent).all(dim=-1)
        return (color.reshape(*points.shape[:-1], 3),
                (density * inside).reshape(points.shape[:-1]))

    n_rays = origins.shape[0]
    full_batch = rays_per_iter >= n_rays
    history = []
    for _ in range(iters):
        idx = (torch.arange(n_rays) if full_batch
               else torch.randint(n_rays, (rays_per_iter,), generator=generator))
        pred = render_rays(field_fn, origins[idx], dirs[idx], near, far,
                           samples_per_ray, background)
        loss = (pred - targets[idx]).square().mean() + reg_weight * torch.tanh(raw).square().mean()
        if not torch.isfinite(loss):
            raise FitFault("reconstruction fit diverged (non-finite loss)")
        history.append(float(loss.detach()))
        opt.zero_grad()
        loss.backward()
        opt.step()
    tp = clamp_bound(raw.detach(), extent)
    return (tp, history) if return_history else tp


def fit_bank(specs: list[SceneSpec], decoder: FieldDecoder, *, views_per_scene: int = 24,
             reg_weight: float = 1e-3, resolution: int = 32, channels: int = 8,
             iters_per_scene: int = 300, lr: float = 5e-2, rays_per_iter: int = 2048,
             seed: int = 0, cfg: RenderConfig = RenderConfig(),
             prior: CameraPrior = CameraPrior()) -> list[Triplane]:
    """Joint auto-decoder fit: shared decoder, one plane set per scene.

    Rounds alternate over scenes so the decoder sees every scene while each
    plane set trains on its own views.
    """
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    data = []
    for spec in specs:
        views = [sample_view(spec, rng, cfg, prior) for _ in range(views_per_scene)]
        origins, dirs, targets = [], [], []
        for image, cam in views:
            o, d = generate_rays(cam, cfg)
            origins.append(o.reshape(-1, 3))
            dirs.append(d.reshape(-1, 3))
            targets.append(image.reshape(-1, 3))
        data.append((torch.cat(origins), torch.cat(dirs), torch.cat(targets)))
    near, far = CameraPrior().radius - math.sqrt(3.0) - 0.1, CameraPrior().radius + math.sqrt(3.0) + 0.1

    raws = [torch.zeros(3, channels, resolution, resolution, requires_grad=True)
            for _ in specs]
    opt = torch.optim.Adam(raws + list(decoder.parameters()), lr=lr)

    for it in range(iters_per_scene):
        for si, (origins, dirs, targets) in enumerate(data):
            raw = raws[si]
            idx = torch.randint(origins.shape[0], (rays_per_iter,), generator=gen)

            def field_fn(points):
                flat = points.reshape(-1, 3)
                feats = lookup_planes(torch.tanh(raw), flat, 1.0)
                color, density = decoder(feats)
                inside = (flat.abs() <= 1.0).all(dim=-1)
                return (color.reshape(*points.shape[:-1], 3),
                        (density * inside).reshape(points.shape[:-1]))

            pred = render_rays(field_fn, origins[idx], dirs[idx], near, far,
                               cfg.samples_per_ray, cfg.background)
            loss = (pred - targets[idx]).square().mean() + reg_weight * torch.tanh(raw).square().mean()
            if not torch.isfinite(loss):
                raise FitFault(f"bank fit diverged on scene {si} at round {it}")
            opt.zero_grad()
            loss.backward()
            opt.step()
    return [clamp_bound(raw.detach()) for raw in raws]


# ---------------------------------------------------------------------------
# diffusion dataset
# ---------------------------------------------------------------------------


def build_diffusion_dataset(sample_fn, count: int, rng: np.random.Generator, *,
                            decoder: FieldDecoder | None = None,
                            cfg: RenderConfig = RenderConfig(),
                            prior: CameraPrior = CameraPrior(),
                            control_kind: str | None = None):
    """Stream `count` diffusion items.

    sample_fn(index, rng) -> Triplane supplies the triplanes (a GAN sampler
    drawing fresh noise, or a cycling bank of fitted planes). When
    control_kind is set, each item also carries a camera from the resampled
    prior and the control payload computed from the rendered view.
    """
    if count < 1:
        raise ValueError("count must be positive")
    for i in range(count):
        tp = sample_fn(i, rng)
        item = {"planes": tp.planes}
        if control_kind is not None:
            if decoder is None:
                raise ValueError("rendering a control signal requires the field decoder")
            cam = resample_camera(rng, prior)
            with torch.no_grad():
                view = render_field(triplane_field(tp, decoder), cam, cfg)
            item["camera"] = cam
            item["control"] = control_A(control_kind, view, background=cfg.background).payload
            item["view"] = view
        yield item


def bank_sampler(bank: list[Triplane]):
    """Cycle a fitted bank (provenance: index i maps to bank[i % len(bank)])."""
    if not bank:
        raise ValueError("empty triplane bank")

    def sample_fn(i: int, rng: np.random.Generator) -> Triplane:
        return bank[i % len(bank)]

    return sample_fn


def dataset_statistics(planes: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-channel mean/std over a stacked dataset (N, 3, C, R, R)."""
    flat = planes.reshape(planes.shape[0], 3 * planes.shape[2], -1)
    mean = flat.mean(dim=(0, 2))
    std = flat.std(dim=(0, 2)).clamp_min(1e-3)
    return mean, std
