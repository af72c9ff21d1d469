"""Continuous-time variance-preserving noise schedules.

A schedule defines the marginal q(z_t | z_0) = N(alpha_t z_0, sigma_t^2 I)
for t in [0, 1] (t=0 clean data, t=1 pure noise), plus the transition
coefficients between two times and the signal-weighted loss weight.

Conventions:
  - variance preserving: alpha_t^2 + sigma_t^2 = 1
  - log-SNR: lambda_t = log(alpha_t^2 / sigma_t^2), strictly decreasing in t
  - all time inputs are clamped to [t_min, t_max] before evaluation to keep
    the endpoints non-singular

All methods accept python floats or torch tensors and return float64
tensors of the broadcast shape; callers cast to their working dtype.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

KINDS = ("cosine", "shifted_cosine")


def _as_time(t) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.float64)
    if not torch.isfinite(t).all():
        raise ValueError("time must be finite")
    if (t < 0).any() or (t > 1).any():
        raise ValueError("time must lie in [0, 1]")
    return t


@dataclass(frozen=True)
class Schedule:
    """Cosine-family schedule, optionally shifted by a log-SNR offset."""

    kind: str = "cosine"
    shift: float = 0.0
    t_min: float = 1e-4
    t_max: float = 1.0 - 1e-4

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "cosine" and self.shift != 0.0:
            raise ValueError("plain cosine schedule takes no shift")
        if not (0.0 < self.t_min < self.t_max < 1.0):
            raise ValueError("need 0 < t_min < t_max < 1")

    def clamp_time(self, t) -> torch.Tensor:
        return _as_time(t).clamp(self.t_min, self.t_max)

    def log_snr(self, t) -> torch.Tensor:
        """lambda_t = 2 log cot(pi t / 2) + shift."""
        u = 0.5 * math.pi * self.clamp_time(t)
        return 2.0 * (torch.log(torch.cos(u)) - torch.log(torch.sin(u))) + self.shift

    def alpha_sigma(self, t) -> tuple[torch.Tensor, torch.Tensor]:
        """Marginal coefficients (alpha_t, sigma_t); alpha^2 = sigmoid(lambda_t)."""
        lam = self.log_snr(t)
        return torch.sigmoid(lam).sqrt(), torch.sigmoid(-lam).sqrt()

    def transition(self, s, t) -> tuple[torch.Tensor, torch.Tensor]:
        """Coefficients of q(z_t | z_s): (alpha_{t|s}, sigma^2_{t|s}) for s < t."""
        s = _as_time(s)
        t = _as_time(t)
        if not (s < t).all():
            raise ValueError("transition requires s < t")
        alpha_s, sigma_s = self.alpha_sigma(s)
        alpha_t, sigma_t = self.alpha_sigma(t)
        alpha_ts = alpha_t / alpha_s
        var_ts = sigma_t**2 - alpha_ts**2 * sigma_s**2
        return alpha_ts, var_ts.clamp_min(0.0)

    def loss_weight(self, t) -> torch.Tensor:
        """omega_t = sigmoid(lambda_t) = SNR_t / (1 + SNR_t); in (0, 1)."""
        return torch.sigmoid(self.log_snr(t))


def cosine_schedule() -> Schedule:
    return Schedule(kind="cosine")


def shifted_cosine(shift_ratio: float) -> Schedule:
    """Cosine schedule with log-SNR lowered by 2*log(shift_ratio).

    A ratio > 1 shifts noise toward lower SNR uniformly in t (ratio 1 is the
    plain cosine curve).
    """
    if not math.isfinite(shift_ratio) or shift_ratio <= 0:
        raise ValueError("shift_ratio must be positive and finite")
    return Schedule(kind="shifted_cosine", shift=-2.0 * math.log(shift_ratio))
