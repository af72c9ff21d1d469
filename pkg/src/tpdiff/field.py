"""Triplane feature fields and the radiance decoder.

A triplane stores three axis-aligned feature planes (XY, XZ, YZ), each an
(C, R, R) grid over [-extent, extent]^2. The feature of a 3-D point is the
sum of bilinear lookups of its three orthogonal projections; points outside
the [-extent, extent]^3 box get the zero feature. Generator-produced planes
are tanh-bounded into (-1, 1).

Plane/grid convention: plane p covers coordinate pair (u, v) with
XY -> (x, y), XZ -> (x, z), YZ -> (y, z); u indexes columns, v indexes rows,
and grid node i sits at coordinate -extent + 2*extent*i/(R-1).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import torch
import torch.nn as nn
import torch.nn.functional as F

# (u, v) coordinate indices per plane: XY, XZ, YZ
_PLANE_AXES = ((0, 1), (0, 2), (1, 2))
_AXIS_U = [a[0] for a in _PLANE_AXES]
_AXIS_V = [a[1] for a in _PLANE_AXES]


@dataclass
class Triplane:
    """Three feature planes of shape (3, C, R, R) over a cube of half-width extent."""

    planes: torch.Tensor
    extent: float = 1.0

    def __post_init__(self):
        if self.planes.ndim != 4 or self.planes.shape[0] != 3:
            raise ValueError(f"planes must have shape (3, C, R, R), got {tuple(self.planes.shape)}")
        if self.planes.shape[-1] != self.planes.shape[-2]:
            raise ValueError("planes must be square")
        if self.extent <= 0:
            raise ValueError("extent must be positive")

    @property
    def channels(self) -> int:
        return self.planes.shape[1]

    @property
    def resolution(self) -> int:
        return self.planes.shape[-1]


def clamp_bound(raw_planes: torch.Tensor, extent: float = 1.0) -> Triplane:
    """Bound raw plane values into the open interval (-1, 1) with tanh.

    tanh saturates to exactly +/-1.0 in floating point for large inputs, so
    saturated values are nudged one ulp inside to keep the bound strict.
    """
    if not torch.isfinite(raw_planes).all():
        raise ValueError("raw plane values must be finite")
    edge = 1.0 - torch.finfo(raw_planes.dtype).eps
    return Triplane(torch.tanh(raw_planes).clamp(-edge, edge), extent)


def l2_reg(tp: Triplane) -> torch.Tensor:
    """Mean squared plane value; the caller applies its own weight."""
    return tp.planes.square().mean()


def lookup_planes(planes: torch.Tensor, points: torch.Tensor, extent: float = 1.0) -> torch.Tensor:
    """Batched triple-projection lookup.

    planes: (3, C, R, R) or (B, 3, C, R, R); points: (P, 3) or (B, P, 3)
    matching the plane batching. Returns (P, C) or (B, P, C). Points outside
    the box contribute the zero feature.
    """
    if not torch.isfinite(points).all():
        raise ValueError("points must be finite")
    q = points / extent  # normalized to [-1, 1] inside the box
    batched = planes.ndim == 5
    B = planes.shape[0] if batched else 1
    C = planes.shape[-3]
    P = q.shape[-2]
    # one grid_sample call over (B*3) plane images; align_corners puts node i
    # at coordinate -1 + 2i/(R-1), i.e. bilinear interpolation between nodes
    u = q[..., _AXIS_U]  # (..., P, 3): per-plane u coordinate
    v = q[..., _AXIS_V]
    grid = torch.stack([u, v], dim=-1)  # (..., P, 3, 2)
    grid = grid.movedim(-2, -3).reshape(B * 3, P, 1, 2)
    imgs = planes.reshape(B * 3, C, *planes.shape[-2:])
    # clamp keeps weights bounded; out-of-box features are masked to zero below
    sampled = F.grid_sample(imgs, grid.clamp(-1.0, 1.0).to(imgs.dtype),
                            mode="bilinear", align_corners=True)
    feats = sampled.reshape(B, 3, C, P).sum(dim=1).movedim(-1, -2)  # (B, P, C)
    inside = (q.abs() <= 1.0).all(dim=-1)
    feats = feats if batched else feats[0]
    return feats * inside.unsqueeze(-1)


def lookup(tp: Triplane, points: torch.Tensor) -> torch.Tensor:
    """Feature of each point (..., 3) -> (..., C)."""
    flat = points.reshape(-1, 3)
    feats = lookup_planes(tp.planes, flat, tp.extent)
    return feats.reshape(*points.shape[:-1], tp.channels)


class FieldDecoder(nn.Module):
    """Small MLP mapping a triplane feature to (rgb, density).

    Color is squashed into [0,1] with a sigmoid; density is
    softplus(raw) * density_scale, hence non-negative. View direction is
    ignored. The density head bias starts negative so empty space begins
    near-transparent.
    """

    def __init__(self, channels: int = 8, hidden: int = 32, density_scale: float = 12.0,
                 density_bias_init: float = -2.0):
        super().__init__()
        self.density_scale = density_scale
        self.body = nn.Sequential(
            nn.Linear(channels, hidden),
            nn.SiLU(),
            nn.Linear(hidden, hidden),
            nn.SiLU(),
        )
        self.color_head = nn.Linear(hidden, 3)
        self.density_head = nn.Linear(hidden, 1)
        nn.init.constant_(self.density_head.bias, density_bias_init)

    def forward(self, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.body(features)
        color = torch.sigmoid(self.color_head(h))
        density = F.softplus(self.density_head(h)).squeeze(-1) * self.density_scale
        return color, density


def decode(features: torch.Tensor, decoder: FieldDecoder) -> tuple[torch.Tensor, torch.Tensor]:
    """Decode features (..., C) to (color (..., 3), density (...))."""
    return decoder(features)
