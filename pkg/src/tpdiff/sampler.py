"""Reverse-process sampling: ancestral/DDIM steps, rendering guidance,
Langevin correction, and the full sampling loop.

All steps consume a denoise function d(z, t) -> zhat0 (a trained model, an
analytic oracle, or a guidance-wrapped model) so predictors, the corrector,
and guidance compose freely. Times move along a uniformly spaced grid from
1 to 0; the loop applies Langevin correction before the predictor step on
the first `langevin_window` steps only, and the final step returns the
model's clean prediction directly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import torch

from .field import FieldDecoder
from .render import Camera, RenderConfig, render_planes_batch
from .schedule import Schedule

log = logging.getLogger(__name__)


class SamplerFault(RuntimeError):
    """Raised when a sampling step produces non-finite state."""


@dataclass
class SamplerConfig:
    num_steps: int = 250
    langevin_steps: int = 10
    langevin_delta: float = 0.25
    langevin_window: int = 50
    guidance_scale: float = 0.0
    eta: float = 1.0
    method: str = "ancestral"

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if not (0 <= self.langevin_window <= self.num_steps):
            raise ValueError("langevin_window must lie in [0, num_steps]")
        if self.langevin_delta < 0 or self.langevin_steps < 0:
            raise ValueError("langevin step size and count must be non-negative")
        if not (0.0 <= self.eta <= 1.0):
            raise ValueError("eta must lie in [0, 1]")
        if self.method not in ("ancestral", "ddim"):
            raise ValueError("method must be 'ancestral' or 'ddim'")


@dataclass
class Guidance:
    """Rendering-energy guidance bundle.

    energy maps rendered images (B, H, W, 3) to per-item energies (B,); the
    guided clean estimate is zhat0 - k * sigma_t * grad_{z_t} sum(energy).
    camera is either one Camera shared by the batch or one per chain. For
    joint targets only the first triplane_channels channels are rendered;
    denormalize (if set) maps model-space planes back to render-ready values.
    """

    energy: Callable[[torch.Tensor], torch.Tensor]
    camera: Camera | list
    decoder: FieldDecoder
    render_cfg: RenderConfig
    scale: float
    extent: float = 1.0
    triplane_channels: int | None = None
    denormalize: Callable[[torch.Tensor], torch.Tensor] | None = None
    grad_cap: float = 1e3

    def cameras(self, batch: int) -> list:
        cams = self.camera if isinstance(self.camera, list) else [self.camera] * batch
        if len(cams) != batch:
            raise ValueError(f"guidance holds {len(cams)} cameras for batch {batch}")
        return cams


def _as_denoise_fn(model) -> Callable:
    return model if callable(model) and not isinstance(model, torch.nn.Module) else (
        lambda z, t: model(z, torch.as_tensor(t, dtype=z.dtype).expand(z.shape[0])))


def _check_finite(z: torch.Tensor, what: str):
    if not torch.isfinite(z).all():
        raise SamplerFault(f"non-finite {what}")


def _coeffs(sched: Schedule, s: float, t: float):
    alpha_s, sigma_s = (float(x) for x in sched.alpha_sigma(s))
    alpha_t, sigma_t = (float(x) for x in sched.alpha_sigma(t))
    _, var_ts = sched.transition(s, t)
    sigma_bar = sigma_s * float(var_ts) ** 0.5 / sigma_t
    return alpha_s, sigma_s, alpha_t, sigma_t, sigma_bar


def ancestral_step(z_t: torch.Tensor, s: float, t: float, model, sched: Schedule,
                   generator=None) -> torch.Tensor:
    """One ancestral update z_t -> z_s for s < t."""
    if not s < t:
        raise ValueError("ancestral step requires s < t")
    _check_finite(z_t, "sampler state")
    denoise = _as_denoise_fn(model)
    alpha_s, sigma_s, alpha_t, sigma_t, sigma_bar = _coeffs(sched, s, t)
    z0_hat = denoise(z_t, t)
    _check_finite(z0_hat, "denoiser output")
    eps_hat = (z_t - alpha_t * z0_hat) / sigma_t
    det = max(sigma_s**2 - sigma_bar**2, 0.0) ** 0.5
    noise = torch.empty_like(z_t).normal_(generator=generator)
    return alpha_s * z0_hat + det * eps_hat + sigma_bar * noise


def ddim_step(z_t: torch.Tensor, s: float, t: float, model, sched: Schedule,
              eta: float = 0.0, generator=None) -> torch.Tensor:
    """DDIM update; eta=0 is deterministic, eta=1 matches ancestral sampling."""
    if not s < t:
        raise ValueError("ddim step requires s < t")
    _check_finite(z_t, "sampler state")
    denoise = _as_denoise_fn(model)
    alpha_s, sigma_s, alpha_t, sigma_t, sigma_bar = _coeffs(sched, s, t)
    z0_hat = denoise(z_t, t)
    _check_finite(z0_hat, "denoiser output")
    eps_hat = (z_t - alpha_t * z0_hat) / sigma_t
    noise_std = eta * sigma_bar
    det = max(sigma_s**2 - noise_std**2, 0.0) ** 0.5
    out = alpha_s * z0_hat + det * eps_hat
    if noise_std > 0:
        out = out + noise_std * torch.empty_like(z_t).normal_(generator=generator)
    return out


def guided_denoise(z_t: torch.Tensor, t: float, model, guidance: Guidance,
                   sched: Schedule, cond=None) -> torch.Tensor:
    """Clean estimate biased by the gradient of the rendering energy.

    zhat0_guided = zhat0 - w_t * grad_{z_t} energy(R(zhat0_planes, camera)),
    with w_t = scale * sigma_t; the gradient flows through the denoiser and
    the renderer.
    """
    t_in = torch.as_tensor(t, dtype=z_t.dtype).expand(z_t.shape[0])
    if guidance.scale == 0.0:
        with torch.no_grad():
            return model(z_t, t_in, cond) if cond is not None else _as_denoise_fn(model)(z_t, t)
    _, sigma_t = sched.alpha_sigma(t)
    z_in = z_t.detach().requires_grad_(True)
    z0_hat = model(z_in, t_in, cond) if cond is not None else model(z_in, t_in)
    tc = guidance.triplane_channels or z0_hat.shape[1]
    planes = z0_hat[:, :tc]
    if guidance.denormalize is not None:
        planes = guidance.denormalize(planes)
    B, _, H, W = planes.shape
    planes = planes.reshape(B, 3, tc // 3, H, W)
    images = render_planes_batch(planes, guidance.decoder, guidance.cameras(B),
                                 guidance.render_cfg, extent=guidance.extent)
    energies = guidance.energy(images)
    (grad,) = torch.autograd.grad(energies.sum(), z_in)
    norms = grad.reshape(B, -1).norm(dim=1)
    if (norms > guidance.grad_cap).any():
        log.warning("guidance gradient clipped: max norm %.3e > cap %.3e",
                    float(norms.max()), guidance.grad_cap)
        scale = (guidance.grad_cap / norms.clamp_min(1e-12)).clamp(max=1.0)
        grad = grad * scale.reshape(B, *([1] * (grad.ndim - 1)))
    w_t = guidance.scale * float(sigma_t)
    return (z0_hat - w_t * grad).detach()


def langevin_correct(z_t: torch.Tensor, t: float, denoise_fn, sched: Schedule,
                     delta: float, n_steps: int, generator=None) -> torch.Tensor:
    """Score-driven MCMC at fixed t: z <- z - delta/2 sigma_t eps(z) + sqrt(delta) sigma_t xi."""
    if delta < 0:
        raise ValueError("delta must be non-negative")
    denoise_fn = _as_denoise_fn(denoise_fn)
    alpha_t, sigma_t = (float(x) for x in sched.alpha_sigma(t))
    for _ in range(n_steps):
        z0_hat = denoise_fn(z_t, t)
        _check_finite(z0_hat, "denoiser output in Langevin correction")
        eps_hat = (z_t - alpha_t * z0_hat) / sigma_t
        noise = torch.empty_like(z_t).normal_(generator=generator)
        z_t = z_t - 0.5 * delta * sigma_t * eps_hat + delta**0.5 * sigma_t * noise
    return z_t


def time_grid(num_steps: int) -> torch.Tensor:
    """Uniformly spaced times from 1 to 0 inclusive, num_steps + 1 points."""
    return torch.linspace(1.0, 0.0, num_steps + 1, dtype=torch.float64)


def sample(model, sched: Schedule, cfg: SamplerConfig, shape: tuple, *,
           guidance: Guidance | None = None, cond=None, generator=None,
           dtype=torch.float32) -> torch.Tensor:
    """Run the full reverse process and return the final clean prediction."""
    grid = time_grid(cfg.num_steps)
    z = torch.empty(shape, dtype=dtype).normal_(generator=generator)

    def denoise(z_in, t_in):
        if guidance is not None and guidance.scale != 0.0:
            return guided_denoise(z_in, t_in, model, guidance, sched, cond=cond)
        with torch.no_grad():
            if cond is not None:
                return model(z_in, torch.as_tensor(t_in, dtype=z_in.dtype).expand(z_in.shape[0]), cond)
            return _as_denoise_fn(model)(z_in, t_in)

    for i in range(cfg.num_steps):
        t, s = float(grid[i]), float(grid[i + 1])
        try:
            if i < cfg.langevin_window and cfg.langevin_steps > 0 and cfg.langevin_delta > 0:
                z = langevin_correct(z, t, denoise, sched, cfg.langevin_delta,
                                     cfg.langevin_steps, generator=generator)
            if i == cfg.num_steps - 1:
                z = denoise(z, t)
            elif cfg.method == "ddim":
                z = ddim_step(z, s, t, denoise, sched, cfg.eta, generator=generator)
            else:
                z = ancestral_step(z, s, t, denoise, sched, generator=generator)
        except SamplerFault as exc:
            raise SamplerFault(f"step {i} (t={t:.4f}): {exc}") from exc
    return z
