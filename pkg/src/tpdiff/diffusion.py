"""Forward noising and the signal-prediction training objective.

The denoiser is trained to predict the clean target z0 directly (signal
prediction); the noise estimate eps is only ever derived algebraically for
the samplers. The loss is omega_t * ||zhat0 - z0||^2 averaged per element,
with omega_t = sigmoid(log SNR_t) from the schedule.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .render import Camera, RenderConfig, render
from .field import FieldDecoder, Triplane
from .schedule import Schedule


class TrainingFault(RuntimeError):
    """Raised when a training loss turns non-finite."""


def _bcast(coef: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Reshape a per-example coefficient (B,) or scalar to broadcast over like."""
    coef = coef.to(like.dtype)
    if coef.ndim == 0:
        return coef
    return coef.reshape(coef.shape[0], *([1] * (like.ndim - 1)))


def q_sample(z0: torch.Tensor, t, noise: torch.Tensor, sched: Schedule) -> torch.Tensor:
    """Draw z_t = alpha_t z0 + sigma_t noise for noise ~ N(0, I)."""
    if noise.shape != z0.shape:
        raise ValueError("noise must match z0 shape")
    alpha, sigma = sched.alpha_sigma(t)
    return _bcast(alpha, z0) * z0 + _bcast(sigma, z0) * noise


def eps_from_z0(z_t: torch.Tensor, z0_hat: torch.Tensor, t, sched: Schedule) -> torch.Tensor:
    """Noise view eps = (z_t - alpha_t zhat0) / sigma_t of a signal prediction."""
    alpha, sigma = sched.alpha_sigma(t)
    if (sigma == 0).any():
        raise ValueError("eps view is singular at sigma_t = 0")
    return (z_t - _bcast(alpha, z_t) * z0_hat) / _bcast(sigma, z_t)


def z0_loss(model, z0: torch.Tensor, t, sched: Schedule, *, noise: torch.Tensor | None = None,
            generator=None, cond=None) -> torch.Tensor:
    """Weighted signal-reconstruction loss, mean over batch and elements."""
    if noise is None:
        noise = torch.empty_like(z0).normal_(generator=generator)
    z_t = q_sample(z0, t, noise, sched)
    t_in = torch.as_tensor(t, dtype=z0.dtype)
    if t_in.ndim == 0:
        t_in = t_in.expand(z0.shape[0])
    pred = model(z_t, t_in, cond) if cond is not None else model(z_t, t_in)
    err = (pred - z0).square().reshape(z0.shape[0], -1).mean(dim=1)
    loss = (sched.loss_weight(t).to(z0.dtype).reshape(-1) * err).mean()
    if not torch.isfinite(loss):
        raise TrainingFault("non-finite diffusion loss")
    return loss


def cond_loss(model, z0: torch.Tensor, t, sched: Schedule, camera: Camera,
              control_op, decoder: FieldDecoder, render_cfg: RenderConfig, *,
              noise: torch.Tensor | None = None, generator=None,
              extent: float = 1.0) -> torch.Tensor:
    """Conditional variant: the model additionally sees c = A(R(z0, camera)).

    z0 is a single packed triplane target (3C, R, R) or a batch sharing one
    camera; control_op maps the rendered image to the conditioning payload.
    """
    batch = z0 if z0.ndim == 4 else z0.unsqueeze(0)
    conds = []
    with torch.no_grad():
        for item in batch:
            C = item.shape[0] // 3
            tp = Triplane(item.reshape(3, C, *item.shape[-2:]), extent)
            conds.append(control_op(render(tp, decoder, camera, render_cfg)))
    cond = torch.stack([torch.as_tensor(c, dtype=z0.dtype) for c in conds])
    return z0_loss(model, batch, t, sched, noise=noise, generator=generator, cond=cond)


# ---------------------------------------------------------------------------
# denoiser network
# ---------------------------------------------------------------------------


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_freq: float = 1000.0) -> torch.Tensor:
    """Standard sin/cos features of t in [0,1], shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(torch.linspace(0.0, math.log(max_freq), half, dtype=t.dtype))
    ang = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


def _norm_groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    """GroupNorm conv block with an additive time-embedding shift."""

    def __init__(self, in_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_norm_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_norm_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(nn.functional.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class Denoiser(nn.Module):
    """Small convolutional encoder-decoder predicting z0 from (z_t, t [, cond]).

    Output shape always equals input shape. Conditioning is injected either
    as per-stage feature maps concatenated on the encoder path (image-like
    conditions, via a cond_encoder producing one map per stage) or as a
    vector added to the time embedding.
    """

    def __init__(self, channels: int, base: int = 24, emb_dim: int = 96,
                 cond_encoder: nn.Module | None = None):
        super().__init__()
        self.channels = channels
        self.cond_encoder = cond_encoder
        cond_ch = list(getattr(cond_encoder, "stage_channels", (0, 0, 0)))
        self.time_mlp = nn.Sequential(
            nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.emb_dim = emb_dim

        c0, c1, c2 = base, 2 * base, 3 * base
        self.stem = nn.Conv2d(channels, c0, 3, padding=1)
        self.enc0 = ResBlock(c0 + cond_ch[0], c0, emb_dim)
        self.down0 = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.enc1 = ResBlock(c1 + cond_ch[1], c1, emb_dim)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.mid = ResBlock(c2 + cond_ch[2], c2, emb_dim)
        self.up1 = nn.Upsample(scale_factor=2, mode="nearest")
        self.dec1 = ResBlock(c2 + c1, c1, emb_dim)
        self.up0 = nn.Upsample(scale_factor=2, mode="nearest")
        self.dec0 = ResBlock(c1 + c0, c0, emb_dim)
        self.head_norm = nn.GroupNorm(_norm_groups(c0), c0)
        self.head = nn.Conv2d(c0, channels, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, cond=None) -> torch.Tensor:
        if z_t.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {z_t.shape[1]}")
        t = torch.as_tensor(t, dtype=z_t.dtype)
        if t.ndim == 0:
            t = t.expand(z_t.shape[0])
        emb = self.time_mlp(sinusoidal_embedding(t, self.emb_dim))

        maps = (None, None, None)
        if cond is not None:
            if self.cond_encoder is None:
                raise ValueError("model was built without a condition encoder")
            enc = self.cond_encoder(cond)
            if self.cond_encoder.mode == "vector":
                emb = emb + enc
            else:
                maps = enc

        def inject(h, m):
            return h if m is None else torch.cat([h, m], dim=1)

        h0 = self.enc0(inject(self.stem(z_t), maps[0]), emb)
        h1 = self.enc1(inject(self.down0(h0), maps[1]), emb)
        hm = self.mid(inject(self.down1(h1), maps[2]), emb)
        d1 = self.dec1(torch.cat([self.up1(hm), h1], dim=1), emb)
        d0 = self.dec0(torch.cat([self.up0(d1), h0], dim=1), emb)
        return self.head(nn.functional.silu(self.head_norm(d0)))
