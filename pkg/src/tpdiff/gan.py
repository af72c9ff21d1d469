"""Desk-scale 3D GAN: noise -> triplane generator, camera-conditioned image
discriminator, non-saturating logistic losses with (lazy) R1 regularization.

Sign convention: the discriminator descends softplus(-D(real)) + softplus(D(fake))
plus the R1 term (equivalently ascends h(D(real)) + h(-D(fake)) - gamma*R1 with
h = log sigmoid), and the generator descends softplus(-D(fake)) plus the plane
L2 penalty. Cameras enter the discriminator only, as the scaled flattened
25-vector; the camera fed to D is always the camera the fake was rendered with.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .condition import CameraPrior, camera_bounds, resample_camera
from .field import FieldDecoder, Triplane
from .render import Camera, RenderConfig, flatten_camera, render_planes_batch


def h(u: torch.Tensor) -> torch.Tensor:
    """h(u) = -log(1 + exp(-u)) = log sigmoid(u), numerically stable."""
    return F.logsigmoid(u)


class Generator(nn.Module):
    """Map a latent u in R^u_dim to tanh-bounded planes (3, C, R, R)."""

    def __init__(self, u_dim: int = 64, channels: int = 8, resolution: int = 32,
                 base: int = 96):
        super().__init__()
        if resolution % 8:
            raise ValueError("resolution must be divisible by 8")
        self.u_dim = u_dim
        self.channels = channels
        self.resolution = resolution
        self.base = base
        self.seed_hw = resolution // 8
        self.fc = nn.Linear(u_dim, base * self.seed_hw * self.seed_hw)
        widths = [base, 3 * base // 4, base // 2, 3 * base // 8]
        blocks = []
        for w_in, w_out in zip(widths[:-1], widths[1:]):
            blocks += [nn.Upsample(scale_factor=2, mode="nearest"),
                       nn.Conv2d(w_in, w_out, 3, padding=1), nn.LeakyReLU(0.2),
                       nn.Conv2d(w_out, w_out, 3, padding=1), nn.LeakyReLU(0.2)]
        self.body = nn.Sequential(*blocks)
        self.head = nn.Conv2d(widths[-1], 3 * channels, 3, padding=1)

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        """Latents (B, u_dim) -> bounded planes (B, 3, C, R, R)."""
        B = u.shape[0]
        x = self.fc(u).reshape(B, self.base, self.seed_hw, self.seed_hw)
        x = self.head(self.body(F.leaky_relu(x, 0.2)))
        return torch.tanh(x).reshape(B, 3, self.channels, self.resolution, self.resolution)


class Discriminator(nn.Module):
    """(image, scaled flattened camera) -> real-valued logit."""

    def __init__(self, image_size: int = 32, base: int = 32, camera_dim: int = 25):
        super().__init__()
        if image_size % 8:
            raise ValueError("image_size must be divisible by 8")
        self.convs = nn.Sequential(
            nn.Conv2d(3, base, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(base, 2 * base, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * base, 3 * base, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
        )
        feat = 3 * base * (image_size // 8) ** 2
        self.fc = nn.Sequential(
            nn.Linear(feat + camera_dim, 4 * base), nn.LeakyReLU(0.2),
            nn.Linear(4 * base, 1),
        )

    def forward(self, images: torch.Tensor, cam_vecs: torch.Tensor) -> torch.Tensor:
        """images (B, H, W, 3) in [0,1], cam_vecs (B, 25) -> logits (B,)."""
        x = self.convs(images.permute(0, 3, 1, 2))
        x = torch.cat([x.flatten(1), cam_vecs], dim=1)
        return self.fc(x).squeeze(-1)


def r1_penalty(disc: Discriminator, images: torch.Tensor,
               cam_vecs: torch.Tensor) -> torch.Tensor:
    """Mean squared L2 norm of the logit's input-gradient (caller scales by gamma)."""
    images = images.detach().requires_grad_(True)
    logits = disc(images, cam_vecs)
    if not logits.requires_grad:  # logit does not depend on the input at all
        return torch.zeros((), dtype=images.dtype)
    (grad,) = torch.autograd.grad(logits.sum(), images, create_graph=True,
                                  allow_unused=True)
    if grad is None:
        return torch.zeros((), dtype=images.dtype)
    return grad.reshape(grad.shape[0], -1).square().sum(dim=1).mean()


@dataclass
class GanConfig:
    steps: int = 2000
    batch: int = 8
    gamma: float = 1.0
    r1_interval: int = 16
    lr_g: float = 2e-3
    lr_d: float = 2e-3
    plane_l2_weight: float = 1.0
    u_dim: int = 64


def _scaled_cam_vec(cam: Camera, lo: torch.Tensor, hi: torch.Tensor) -> torch.Tensor:
    vec = flatten_camera(cam).float()
    return 2.0 * (vec - lo) / (hi - lo) - 1.0


class GanTrainer:
    """Owns both parameter sets and the rendering configuration."""

    def __init__(self, gen: Generator, disc: Discriminator, decoder: FieldDecoder,
                 cfg: GanConfig, render_cfg: RenderConfig,
                 prior: CameraPrior = CameraPrior()):
        self.gen, self.disc, self.decoder = gen, disc, decoder
        self.cfg, self.render_cfg, self.prior = cfg, render_cfg, prior
        lo, hi = camera_bounds(prior)
        self.cam_lo = torch.as_tensor(lo, dtype=torch.float32)
        self.cam_hi = torch.as_tensor(hi, dtype=torch.float32)
        self.opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr_d, betas=(0.0, 0.99))
        self.opt_g = torch.optim.Adam(
            list(gen.parameters()) + list(decoder.parameters()),
            lr=cfg.lr_g, betas=(0.0, 0.99))

    def _render_fakes(self, u: torch.Tensor, rng: np.random.Generator,
                      generator: torch.Generator):
        cams = [resample_camera(rng, self.prior) for _ in range(u.shape[0])]
        planes = self.gen(u)
        flat = planes.reshape(u.shape[0], 3 * self.gen.channels, -1)
        images = render_planes_batch(planes, self.decoder, cams, self.render_cfg,
                                     generator=generator)
        cam_vecs = torch.stack([_scaled_cam_vec(c, self.cam_lo, self.cam_hi) for c in cams])
        return images, cam_vecs, flat

    def step(self, real_images: torch.Tensor, real_cam_vecs: torch.Tensor,
             step_idx: int, rng: np.random.Generator,
             generator: torch.Generator) -> dict:
        """One D update followed by one G update; returns step metrics.

        Fakes are rendered once with gradients kept; the D update sees them
        detached and the G update reuses the stored graph against the freshly
        updated discriminator.
        """
        cfg = self.cfg
        B = real_images.shape[0]
        if B == 0:
            raise ValueError("empty real batch")

        u = torch.empty(B, cfg.u_dim).normal_(generator=generator)
        fake_images, fake_cam_vecs, flat_planes = self._render_fakes(u, rng, generator)
        d_real = self.disc(real_images, real_cam_vecs)
        d_fake = self.disc(fake_images.detach(), fake_cam_vecs)
        d_loss = F.softplus(-d_real).mean() + F.softplus(d_fake).mean()
        r1_val = 0.0
        if cfg.gamma > 0 and step_idx % cfg.r1_interval == 0:
            r1 = r1_penalty(self.disc, real_images, real_cam_vecs)
            d_loss = d_loss + cfg.gamma * cfg.r1_interval * r1
            r1_val = float(r1.detach())
        if not torch.isfinite(d_loss):
            raise RuntimeError(f"non-finite discriminator loss at step {step_idx}")
        self.opt_d.zero_grad()
        d_loss.backward()
        self.opt_d.step()

        g_adv = F.softplus(-self.disc(fake_images, fake_cam_vecs)).mean()
        g_loss = g_adv + cfg.plane_l2_weight * flat_planes.square().mean()
        if not torch.isfinite(g_loss):
            raise RuntimeError(f"non-finite generator loss at step {step_idx}")
        self.opt_g.zero_grad()
        self.opt_d.zero_grad()  # g backward also reaches D params; discard
        g_loss.backward()
        self.opt_g.step()

        return {"d_loss": float(d_loss.detach()), "g_loss": float(g_loss.detach()),
                "r1": r1_val, "logit_real": float(d_real.detach().mean()),
                "logit_fake": float(d_fake.detach().mean())}


def gan_step(trainer: GanTrainer, real_images: torch.Tensor,
             real_cam_vecs: torch.Tensor, step_idx: int, rng: np.random.Generator,
             generator: torch.Generator) -> tuple[float, float, dict]:
    """Functional wrapper over GanTrainer.step returning (d_loss, g_loss, metrics)."""
    metrics = trainer.step(real_images, real_cam_vecs, step_idx, rng, generator)
    return metrics["d_loss"], metrics["g_loss"], metrics


def sample_triplane(gen: Generator, generator: torch.Generator) -> Triplane:
    """Draw u ~ N(0, I) and return the bounded triplane."""
    with torch.no_grad():
        u = torch.empty(1, gen.u_dim).normal_(generator=generator)
        return Triplane(gen(u)[0])


def gan_sampler(gen: Generator, generator: torch.Generator):
    """Dataset source drawing a fresh triplane per index."""

    def sample_fn(i: int, rng: np.random.Generator) -> Triplane:
        return sample_triplane(gen, generator)

    return sample_fn
