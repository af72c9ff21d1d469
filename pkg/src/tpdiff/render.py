"""Cameras, ray generation, and differentiable volume rendering.

Camera model: pinhole with a 4x4 camera-to-world extrinsic (right-handed,
camera looks along its -Z axis, +Y is image-up) and a 3x3 intrinsic in
normalized image units (focal lengths and principal point as fractions of
the image side). World up is +Z.

Rendering: per ray, N quadrature samples on [near, far] (deterministic
midpoints, or stratified jitter when requested); standard alpha compositing
with opacity a_i = 1 - exp(-density_i * delta) and a constant background
behind the last sample. Everything is autograd-differentiable w.r.t. plane
values and decoder parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .field import FieldDecoder, Triplane, lookup_planes


@dataclass
class Camera:
    """Pinhole camera: 4x4 cam-to-world extrinsic + normalized 3x3 intrinsic."""

    extrinsic: torch.Tensor
    intrinsic: torch.Tensor
    near: float = 0.8
    far: float = 4.4

    def __post_init__(self):
        self.extrinsic = torch.as_tensor(self.extrinsic, dtype=torch.float64)
        self.intrinsic = torch.as_tensor(self.intrinsic, dtype=torch.float64)
        if self.extrinsic.shape != (4, 4) or self.intrinsic.shape != (3, 3):
            raise ValueError("extrinsic must be 4x4 and intrinsic 3x3")
        rot = self.extrinsic[:3, :3]
        if (rot @ rot.T - torch.eye(3, dtype=torch.float64)).abs().max() > 1e-6:
            raise ValueError("extrinsic rotation block is not orthonormal")
        if torch.linalg.det(rot) < 0:
            raise ValueError("extrinsic rotation must have determinant +1")
        if not (0 < self.near < self.far):
            raise ValueError("need 0 < near < far")
        if self.intrinsic[0, 0] <= 0 or self.intrinsic[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def position(self) -> torch.Tensor:
        return self.extrinsic[:3, 3]

    @property
    def forward_axis(self) -> torch.Tensor:
        return -self.extrinsic[:3, 2]


@dataclass
class RenderConfig:
    image_size: int = 32
    samples_per_ray: int = 32
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    stratified: bool = False

    def __post_init__(self):
        if self.image_size < 1:
            raise ValueError("image_size must be >= 1")
        if self.samples_per_ray < 2:
            raise ValueError("samples_per_ray must be >= 2")


def intrinsic_matrix(focal: float, focal_y: float | None = None,
                     center: tuple[float, float] = (0.5, 0.5)) -> torch.Tensor:
    fy = focal if focal_y is None else focal_y
    return torch.tensor([[focal, 0.0, center[0]],
                         [0.0, fy, center[1]],
                         [0.0, 0.0, 1.0]], dtype=torch.float64)


def look_at_extrinsic(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> torch.Tensor:
    """Camera-to-world transform with the camera at eye, -Z toward target."""
    eye = torch.as_tensor(eye, dtype=torch.float64)
    target = torch.as_tensor(target, dtype=torch.float64)
    up = torch.as_tensor(up, dtype=torch.float64)
    z = eye - target
    zn = torch.linalg.norm(z)
    if zn < 1e-12:
        raise ValueError("eye and target coincide")
    z = z / zn
    x = torch.linalg.cross(up, z)
    if torch.linalg.norm(x) < 1e-9:  # viewing straight along up: pick another up
        x = torch.linalg.cross(torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64), z)
    x = x / torch.linalg.norm(x)
    y = torch.linalg.cross(z, x)
    ext = torch.eye(4, dtype=torch.float64)
    ext[:3, 0], ext[:3, 1], ext[:3, 2], ext[:3, 3] = x, y, z, eye
    return ext


def look_at_camera(eye, target=(0.0, 0.0, 0.0), focal: float = 1.1,
                   near: float | None = None, far: float | None = None,
                   intrinsic: torch.Tensor | None = None) -> Camera:
    """Camera at eye looking at target; near/far default to a bounding-sphere
    margin around the unit scene box."""
    ext = look_at_extrinsic(eye, target)
    dist = float(torch.linalg.norm(ext[:3, 3] - torch.as_tensor(target, dtype=torch.float64)))
    margin = math.sqrt(3.0) + 0.1
    near = max(dist - margin, 0.05) if near is None else near
    far = dist + margin if far is None else far
    K = intrinsic_matrix(focal) if intrinsic is None else intrinsic
    return Camera(ext, K, near, far)


def flatten_camera(cam: Camera) -> torch.Tensor:
    """25-vector: 16 extrinsic entries row-major, then 9 intrinsic entries."""
    return torch.cat([cam.extrinsic.reshape(16), cam.intrinsic.reshape(9)])


def unflatten_camera(vec: torch.Tensor, near: float = 0.8, far: float = 4.4) -> Camera:
    vec = torch.as_tensor(vec, dtype=torch.float64)
    if vec.shape != (25,):
        raise ValueError("camera vector must have 25 entries")
    return Camera(vec[:16].reshape(4, 4), vec[16:].reshape(3, 3), near, far)


def generate_rays(cam: Camera, cfg: RenderConfig, dtype=torch.float32
                  ) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-pixel (origin, unit direction), each (H, W, 3).

    Pixel (row j, col i) uses image coordinates u=(i+0.5)/W, v=(j+0.5)/H;
    v grows downward, so the camera-frame y component is negated.
    """
    H = W = cfg.image_size
    fx, fy = cam.intrinsic[0, 0], cam.intrinsic[1, 1]
    cx, cy = cam.intrinsic[0, 2], cam.intrinsic[1, 2]
    u = (torch.arange(W, dtype=torch.float64) + 0.5) / W
    v = (torch.arange(H, dtype=torch.float64) + 0.5) / H
    vv, uu = torch.meshgrid(v, u, indexing="ij")
    d_cam = torch.stack([(uu - cx) / fx, -(vv - cy) / fy, -torch.ones_like(uu)], dim=-1)
    d_world = d_cam @ cam.extrinsic[:3, :3].T
    d_world = d_world / torch.linalg.norm(d_world, dim=-1, keepdim=True)
    origins = cam.position.expand(H, W, 3)
    return origins.to(dtype), d_world.to(dtype)


def _sample_depths(near: float, far: float, n: int, shape: tuple, stratified: bool,
                   generator, dtype) -> torch.Tensor:
    delta = (far - near) / n
    base = near + (torch.arange(n, dtype=dtype) + 0.5) * delta
    base = base.expand(*shape, n)
    if stratified:
        jitter = torch.rand(*shape, n, generator=generator, dtype=dtype) - 0.5
        base = base + jitter * delta
    return base


def render_rays(field_fn, origins: torch.Tensor, dirs: torch.Tensor, near: float,
                far: float, samples_per_ray: int, background=(0.0, 0.0, 0.0), *,
                stratified: bool = False, generator=None) -> torch.Tensor:
    """Volume-render arbitrary rays (..., 3) through a field; returns (..., 3)."""
    if far <= near:
        raise ValueError("degenerate ray segment: far must exceed near")
    n = samples_per_ray
    depths = _sample_depths(near, far, n, origins.shape[:-1], stratified,
                            generator, origins.dtype)
    points = origins.unsqueeze(-2) + depths.unsqueeze(-1) * dirs.unsqueeze(-2)
    color, density = field_fn(points)
    return composite(color, density, (far - near) / n, background)


def render_field(field_fn, cam: Camera, cfg: RenderConfig, *, generator=None,
                 dtype=torch.float32) -> torch.Tensor:
    """Volume-render an arbitrary field field_fn(points (...,3)) -> (rgb, density)."""
    origins, dirs = generate_rays(cam, cfg, dtype=dtype)
    return render_rays(field_fn, origins, dirs, cam.near, cam.far,
                       cfg.samples_per_ray, cfg.background,
                       stratified=cfg.stratified, generator=generator)


def ray_weights(density: torch.Tensor, delta: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Compositing weights T_i a_i (..., N) and residual transmittance (...).

    The weights and the residual partition unity along every ray.
    """
    alpha = 1.0 - torch.exp(-density * delta)
    trans = torch.cumprod(1.0 - alpha, dim=-1)
    trans_excl = torch.cat([torch.ones_like(trans[..., :1]), trans[..., :-1]], dim=-1)
    return trans_excl * alpha, trans[..., -1]


def composite(color: torch.Tensor, density: torch.Tensor, delta: float,
              background) -> torch.Tensor:
    """Alpha-composite samples along the last sample axis.

    color (..., N, 3), density (..., N) -> image (..., 3).
    """
    weights, residual = ray_weights(density, delta)
    bg = torch.as_tensor(background, dtype=color.dtype)
    return (weights.unsqueeze(-1) * color).sum(dim=-2) + residual.unsqueeze(-1) * bg


def triplane_field(tp: Triplane, decoder: FieldDecoder):
    """Field adapter: triplane lookup + decode, with zero density outside the box."""

    def field_fn(points):
        flat = points.reshape(-1, 3)
        feats = lookup_planes(tp.planes, flat, tp.extent)
        color, density = decoder(feats)
        inside = (flat.abs() <= tp.extent).all(dim=-1)
        color = color.reshape(*points.shape[:-1], 3)
        density = (density * inside).reshape(points.shape[:-1])
        return color, density

    return field_fn


def render(tp: Triplane, decoder: FieldDecoder, cam: Camera, cfg: RenderConfig, *,
           generator=None) -> torch.Tensor:
    """Render a triplane to an (H, W, 3) image in [0, 1]."""
    return render_field(triplane_field(tp, decoder), cam, cfg, generator=generator,
                        dtype=tp.planes.dtype)


def render_planes_batch(planes: torch.Tensor, decoder: FieldDecoder,
                        cams: list[Camera], cfg: RenderConfig, *, extent: float = 1.0,
                        generator=None) -> torch.Tensor:
    """Render a batch of plane tensors (B, 3, C, R, R) with one camera each."""
    dtype = planes.dtype
    B = planes.shape[0]
    if len(cams) != B:
        raise ValueError("one camera per batch item required")
    origins = torch.stack([generate_rays(c, cfg, dtype)[0] for c in cams])
    dirs = torch.stack([generate_rays(c, cfg, dtype)[1] for c in cams])
    near, far = cams[0].near, cams[0].far
    if any(abs(c.near - near) > 1e-9 or abs(c.far - far) > 1e-9 for c in cams):
        raise ValueError("batched rendering requires shared near/far")
    n = cfg.samples_per_ray
    depths = _sample_depths(near, far, n, origins.shape[:-1], cfg.stratified,
                            generator, dtype)
    pts = origins.unsqueeze(-2) + depths.unsqueeze(-1) * dirs.unsqueeze(-2)  # (B,H,W,N,3)
    flat = pts.reshape(B, -1, 3)
    feats = lookup_planes(planes, flat, extent)
    color, density = decoder(feats)
    inside = (flat.abs() <= extent).all(dim=-1)
    density = density * inside
    H = W = cfg.image_size
    color = color.reshape(B, H, W, n, 3)
    density = density.reshape(B, H, W, n)
    return composite(color, density, (far - near) / n, cfg.background)


def render_grad(tp: Triplane, decoder: FieldDecoder, cam: Camera, cfg: RenderConfig,
                upstream: torch.Tensor) -> torch.Tensor:
    """Gradient of <render(tp), upstream> w.r.t. the plane values."""
    planes = tp.planes.detach().requires_grad_(True)
    image = render(Triplane(planes, tp.extent), decoder, cam, cfg)
    (grad,) = torch.autograd.grad((image * upstream.to(image.dtype)).sum(), planes)
    return grad


# ---------------------------------------------------------------------------
# image metrics
# ---------------------------------------------------------------------------

PSNR_CAP_DB = 100.0


def psnr(image_a: torch.Tensor, image_b: torch.Tensor) -> float:
    """10 log10(1/MSE) for images in [0,1], capped at 100 dB."""
    if image_a.shape != image_b.shape:
        raise ValueError("psnr: shape mismatch")
    mse = float((image_a.double() - image_b.double()).square().mean())
    if mse < 1e-10:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-x.square() / (2 * sigma * sigma))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(image_a: torch.Tensor, image_b: torch.Tensor) -> float:
    """Mean SSIM with the standard 11-tap Gaussian window (valid positions only)."""
    if image_a.shape != image_b.shape:
        raise ValueError("ssim: shape mismatch")
    c1, c2 = 0.01**2, 0.03**2
    win = _gaussian_window().reshape(1, 1, 11, 11)
    a = image_a.double().permute(2, 0, 1).unsqueeze(1)  # (3,1,H,W)
    b = image_b.double().permute(2, 0, 1).unsqueeze(1)
    mu_a = F.conv2d(a, win)
    mu_b = F.conv2d(b, win)
    var_a = F.conv2d(a * a, win) - mu_a**2
    var_b = F.conv2d(b * b, win) - mu_b**2
    cov = F.conv2d(a * b, win) - mu_a * mu_b
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)
             / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)))
    return float(score.mean())
