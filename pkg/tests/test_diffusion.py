"""Forward noising, signal-prediction losses, and parameterization views."""

import math

import pytest
import torch

from tpdiff.diffusion import (Denoiser, TrainingFault, cond_loss, eps_from_z0,
                              q_sample, z0_loss)
from tpdiff.field import FieldDecoder, Triplane
from tpdiff.render import RenderConfig, look_at_camera
from tpdiff.schedule import cosine_schedule


def test_q_sample_mean_and_identity(torch_gen):
    sched = cosine_schedule()
    z0 = torch.randn(4, 2, 8, 8, generator=torch_gen)
    alpha, _ = sched.alpha_sigma(0.37)
    z_t = q_sample(z0, 0.37, torch.zeros_like(z0), sched)
    assert torch.allclose(z_t, float(alpha) * z0, atol=1e-6)
    near_clean = q_sample(z0, sched.t_min, torch.randn_like(z0), sched)
    assert float((near_clean - z0).abs().max()) < 1e-3
    with pytest.raises(ValueError):
        q_sample(z0, 0.5, torch.zeros(4, 2, 8, 9), sched)


def test_q_sample_monte_carlo_moments():
    sched = cosine_schedule()
    gen = torch.Generator().manual_seed(11)
    n = 100_000
    z0 = torch.full((n,), 0.8)
    t = 0.6
    alpha, sigma = (float(x) for x in sched.alpha_sigma(t))
    z_t = q_sample(z0, t, torch.randn(n, generator=gen), sched)
    se_mean = sigma / math.sqrt(n)
    se_var = sigma**2 * math.sqrt(2.0 / (n - 1))
    assert abs(float(z_t.mean()) - alpha * 0.8) < 3 * se_mean
    assert abs(float(z_t.var(correction=1)) - sigma**2) < 3 * se_var


def test_q_sample_batched_times(torch_gen):
    sched = cosine_schedule()
    z0 = torch.randn(3, 2, 4, 4, generator=torch_gen)
    noise = torch.randn_like(z0)
    t = torch.tensor([0.2, 0.5, 0.9], dtype=torch.float64)
    out = q_sample(z0, t, noise, sched)
    for i in range(3):
        single = q_sample(z0[i:i + 1], float(t[i]), noise[i:i + 1], sched)
        assert torch.allclose(out[i], single[0], atol=1e-6)


class _PerfectModel(torch.nn.Module):
    def __init__(self, z0):
        super().__init__()
        self.z0 = z0

    def forward(self, z_t, t, cond=None):
        return self.z0.expand_as(z_t)


def test_z0_loss_perfect_and_zero_model(torch_gen):
    sched = cosine_schedule()
    z0 = torch.randn(2, 3, 4, 4, generator=torch_gen)
    perfect = _PerfectModel(z0)
    loss = z0_loss(perfect, z0, 0.4, sched, noise=torch.randn_like(z0))
    assert float(loss) == 0.0

    zero_model = lambda z_t, t: torch.zeros_like(z_t)
    t = 0.7
    loss = z0_loss(zero_model, z0, t, sched, noise=torch.randn_like(z0))
    omega = float(sched.loss_weight(t))
    expect = omega * float(z0.square().mean())
    assert float(loss) == pytest.approx(expect, rel=1e-6)


def test_z0_loss_linear_model_closed_form():
    """Analytic expectation oracle for zhat0 = a * z_t on 1-D data."""
    sched = cosine_schedule()
    gen = torch.Generator().manual_seed(21)
    a, z0_val, t = 0.6, 1.3, 0.55
    n = 200_000
    z0 = torch.full((n, 1), z0_val, dtype=torch.float64)
    model = lambda z_t, tt: a * z_t
    loss = z0_loss(model, z0, t, sched, noise=torch.randn(n, 1, generator=gen,
                                                          dtype=torch.float64))
    alpha, sigma = (float(x) for x in sched.alpha_sigma(t))
    omega = float(sched.loss_weight(t))
    expect = omega * ((a * alpha - 1.0) ** 2 * z0_val**2 + a**2 * sigma**2)
    assert float(loss) == pytest.approx(expect, rel=5e-3)


def test_z0_loss_non_finite_raises():
    sched = cosine_schedule()
    bad = lambda z_t, t: z_t * float("nan")
    with pytest.raises(TrainingFault):
        z0_loss(bad, torch.ones(2, 1, 4, 4), 0.5, sched,
                noise=torch.zeros(2, 1, 4, 4))


def test_eps_round_trip(torch_gen):
    sched = cosine_schedule()
    z0 = torch.randn(3, 2, 4, 4, generator=torch_gen, dtype=torch.float64)
    noise = torch.randn_like(z0)
    t = 0.65
    z_t = q_sample(z0, t, noise, sched)
    eps = eps_from_z0(z_t, z0, t, sched)
    assert torch.allclose(eps, noise, atol=1e-6)
    # zero-residual case
    alpha, _ = sched.alpha_sigma(t)
    eps0 = eps_from_z0(z_t, z_t / float(alpha), t, sched)
    assert float(eps0.abs().max()) < 1e-9
    # reconstruction identity
    z0_hat = torch.randn_like(z0)
    eps_hat = eps_from_z0(z_t, z0_hat, t, sched)
    alpha, sigma = (float(x) for x in sched.alpha_sigma(t))
    recon = alpha * z0_hat + sigma * eps_hat
    assert float(((recon - z_t).abs() / z_t.abs().clamp_min(1e-6)).max()) < 1e-6


class _TinyDenoiser(torch.nn.Module):
    """10-parameter toy: one 3x3 conv (9 weights + 1 bias) with a time ramp."""

    def __init__(self):
        super().__init__()
        self.conv = torch.nn.Conv2d(1, 1, 3, padding=1)

    def forward(self, z_t, t, cond=None):
        return self.conv(z_t) * (1.0 + 0.1 * t.reshape(-1, 1, 1, 1))


def test_z0_loss_gradient_matches_finite_differences(torch_gen):
    sched = cosine_schedule()
    model = _TinyDenoiser().double()
    z0 = torch.randn(4, 1, 6, 6, generator=torch_gen, dtype=torch.float64)
    noise = torch.randn_like(z0)
    t = torch.tensor([0.3, 0.5, 0.7, 0.9], dtype=torch.float64)

    loss = z0_loss(model, z0, t, sched, noise=noise)
    grads = torch.autograd.grad(loss, list(model.parameters()))
    h = 1e-6
    with torch.no_grad():
        for param, grad in zip(model.parameters(), grads):
            flat = param.reshape(-1)
            for idx in range(flat.numel()):
                orig = float(flat[idx])
                flat[idx] = orig + h
                up = float(z0_loss(model, z0, t, sched, noise=noise))
                flat[idx] = orig - h
                dn = float(z0_loss(model, z0, t, sched, noise=noise))
                flat[idx] = orig
                fd = (up - dn) / (2 * h)
                ref = float(grad.reshape(-1)[idx])
                assert abs(fd - ref) / (abs(ref) + 1e-9) < 1e-3


def test_loss_invariant_to_eval_seed(torch_gen):
    """Forward passes draw no randomness in eval mode."""
    sched = cosine_schedule()
    model = Denoiser(6, base=8)
    model.eval()
    z0 = torch.randn(2, 6, 8, 8, generator=torch_gen)
    noise = torch.randn_like(z0)
    torch.manual_seed(1)
    l1 = float(z0_loss(model, z0, 0.5, sched, noise=noise))
    torch.manual_seed(2)
    l2 = float(z0_loss(model, z0, 0.5, sched, noise=noise))
    assert l1 == l2


def test_denoiser_shape_contract(torch_gen):
    model = Denoiser(24, base=8)
    z = torch.randn(2, 24, 32, 32, generator=torch_gen)
    out = model(z, torch.tensor([0.5, 0.7]))
    assert out.shape == z.shape
    with pytest.raises(ValueError):
        model(torch.randn(2, 23, 32, 32), torch.tensor([0.5, 0.7]))
    with pytest.raises(ValueError):
        model(z, torch.tensor([0.5, 0.7]), cond=torch.zeros(2, 32, 32, 3))


def test_cond_loss_identity_render_perfect_model(torch_gen):
    """A = identity on the rendered view; a perfect conditional model hits 0."""
    sched = cosine_schedule()
    planes = torch.tanh(torch.randn(6, 8, 8, generator=torch_gen) * 0.3)
    decoder = FieldDecoder(2, hidden=8)
    cam = look_at_camera((2.6, 0.0, 0.3))
    model = _PerfectModel(planes.unsqueeze(0))
    loss = cond_loss(model, planes.unsqueeze(0), 0.5, sched, cam,
                     lambda img: img, decoder, RenderConfig(8, 8),
                     noise=torch.randn(1, 6, 8, 8, generator=torch_gen))
    assert float(loss) == 0.0


def test_cond_loss_zero_condition_reduces_to_unconditional(torch_gen):
    """Masking c to zeros makes cond_loss the plain z0_loss of the same net."""
    from tpdiff.condition import ImageConditionEncoder

    sched = cosine_schedule()
    encoder = ImageConditionEncoder(3, base=4)
    model = Denoiser(6, base=8, cond_encoder=encoder)
    planes = torch.tanh(torch.randn(2, 6, 8, 8, generator=torch_gen) * 0.3)
    decoder = FieldDecoder(2, hidden=8)
    cam = look_at_camera((2.6, 0.0, 0.3))
    noise = torch.randn_like(planes)
    masked = cond_loss(model, planes, 0.6, sched, cam,
                       lambda img: torch.zeros_like(img), decoder,
                       RenderConfig(8, 8), noise=noise)
    direct = z0_loss(model, planes, 0.6, sched, noise=noise,
                     cond=torch.zeros(2, 8, 8, 3))
    assert float(masked) == pytest.approx(float(direct), rel=1e-7)
