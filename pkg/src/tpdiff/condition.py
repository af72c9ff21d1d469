"""Conditioning machinery: the resampled camera prior, joint camera-pose
packing for diffusion, condition encoders, and pose evaluation.

Joint targets append 25 spatially-constant channels (the flattened camera,
affinely rescaled into [-1, 1] with bounds fixed from the camera prior) to
the stacked triplane channels, so pose is denoised alongside the scene.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .field import Triplane
from .render import Camera, flatten_camera, intrinsic_matrix, look_at_camera

CAMERA_DIM = 25


@dataclass(frozen=True)
class CameraPrior:
    """Look-at-origin cameras on a sphere band, with jittered intrinsics.

    azimuth narrows the band to an arc; the full circle is the default. A
    narrowed arc makes world placement identifiable from a single view,
    which joint camera-pose diffusion needs.
    """

    radius: float = 2.6
    z_band: tuple[float, float] = (-0.7, 0.7)
    focal: float = 1.1
    focal_rel_std: float = 0.05
    azimuth: tuple[float, float] = (0.0, 2.0 * math.pi)

    def __post_init__(self):
        if not -1.0 < self.z_band[0] < self.z_band[1] < 1.0:
            raise ValueError("z_band must be an increasing pair inside (-1, 1)")
        if self.radius <= math.sqrt(3.0) or self.focal <= 0:
            raise ValueError("camera sphere must enclose the scene box with positive focal")
        if not self.azimuth[0] < self.azimuth[1] <= self.azimuth[0] + 2.0 * math.pi:
            raise ValueError("azimuth must be an increasing arc of at most a full turn")


def resample_camera(rng: np.random.Generator, prior: CameraPrior = CameraPrior()) -> Camera:
    """Draw a camera from the prior: position uniform on the sphere band arc,
    oriented at the origin, focal lengths perturbed with Gaussian noise."""
    phi = rng.uniform(*prior.azimuth)
    z = rng.uniform(*prior.z_band)
    rho = math.sqrt(1.0 - z * z)
    eye = prior.radius * np.array([rho * math.cos(phi), rho * math.sin(phi), z])
    while True:  # rejection keeps intrinsics non-degenerate
        fx = prior.focal * (1.0 + prior.focal_rel_std * rng.standard_normal())
        fy = prior.focal * (1.0 + prior.focal_rel_std * rng.standard_normal())
        if fx > 0.05 * prior.focal and fy > 0.05 * prior.focal:
            break
    return look_at_camera(eye, intrinsic=intrinsic_matrix(fx, fy))


def camera_bounds(prior: CameraPrior = CameraPrior()) -> tuple[np.ndarray, np.ndarray]:
    """Per-slot affine bounds (lo, hi) for scaling a 25-vector into [-1, 1]."""
    lo = np.empty(CAMERA_DIM)
    hi = np.empty(CAMERA_DIM)
    lo[:16], hi[:16] = -1.0, 1.0  # rotation entries and the fixed bottom row
    for i in (3, 7, 11):  # translation
        lo[i], hi[i] = -1.1 * prior.radius, 1.1 * prior.radius
    lo[15], hi[15] = 0.0, 2.0  # homogeneous 1
    lo[16:], hi[16:] = -1.0, 1.0
    for i in (16, 20):  # focal lengths
        lo[i], hi[i] = 0.4 * prior.focal, 1.6 * prior.focal
    for i in (18, 21):  # principal point
        lo[i], hi[i] = 0.0, 1.0
    lo[24], hi[24] = 0.0, 2.0
    return lo, hi


@dataclass
class JointLayout:
    """Channel layout of a packed (triplane + camera) diffusion target."""

    triplane_channels: int
    resolution: int
    extent: float
    lo: np.ndarray
    hi: np.ndarray
    camera_dim: int = CAMERA_DIM

    @property
    def total_channels(self) -> int:
        return self.triplane_channels + self.camera_dim

    def descriptor(self) -> np.ndarray:
        """Flat float32 descriptor, stable across runs (checkpoint-embeddable)."""
        head = np.array([self.triplane_channels, self.camera_dim, self.resolution,
                         self.extent], dtype=np.float32)
        return np.concatenate([head, self.lo.astype(np.float32), self.hi.astype(np.float32)])

    @classmethod
    def from_descriptor(cls, vec: np.ndarray) -> "JointLayout":
        tc, cd, res, extent = (float(x) for x in vec[:4])
        cd = int(cd)
        lo = vec[4:4 + cd].astype(np.float64)
        hi = vec[4 + cd:4 + 2 * cd].astype(np.float64)
        return cls(int(tc), int(res), extent, lo, hi, cd)


@dataclass
class JointTarget:
    data: torch.Tensor  # (3C + 25, R, R)
    layout: JointLayout


def joint_layout(tp: Triplane, prior: CameraPrior = CameraPrior()) -> JointLayout:
    lo, hi = camera_bounds(prior)
    return JointLayout(3 * tp.channels, tp.resolution, tp.extent, lo, hi)


def scale_camera_vec(vec: torch.Tensor, layout: JointLayout) -> torch.Tensor:
    lo = torch.as_tensor(layout.lo, dtype=vec.dtype)
    hi = torch.as_tensor(layout.hi, dtype=vec.dtype)
    return 2.0 * (vec - lo) / (hi - lo) - 1.0


def unscale_camera_vec(scaled: torch.Tensor, layout: JointLayout) -> torch.Tensor:
    lo = torch.as_tensor(layout.lo, dtype=scaled.dtype)
    hi = torch.as_tensor(layout.hi, dtype=scaled.dtype)
    return (scaled + 1.0) * (hi - lo) / 2.0 + lo


def pack_joint(tp: Triplane, cam: Camera, prior: CameraPrior = CameraPrior(),
               layout: JointLayout | None = None) -> JointTarget:
    """Stack plane channels and append the rescaled camera as constant channels."""
    layout = layout or joint_layout(tp, prior)
    R = tp.resolution
    planes = tp.planes.reshape(3 * tp.channels, R, R)
    vec = scale_camera_vec(flatten_camera(cam).to(planes.dtype), layout)
    cam_channels = vec.reshape(-1, 1, 1).expand(CAMERA_DIM, R, R)
    return JointTarget(torch.cat([planes, cam_channels], dim=0), layout)


def unpack_joint(jt: JointTarget) -> tuple[Triplane, torch.Tensor]:
    """Exact inverse of pack_joint; camera channels are averaged spatially."""
    layout = jt.layout
    if jt.data.shape[0] != layout.total_channels:
        raise ValueError(
            f"layout mismatch: target has {jt.data.shape[0]} channels, "
            f"layout expects {layout.total_channels}")
    tc = layout.triplane_channels
    planes = jt.data[:tc].reshape(3, tc // 3, layout.resolution, layout.resolution)
    cam_scaled = jt.data[tc:].mean(dim=(1, 2))
    return Triplane(planes, layout.extent), unscale_camera_vec(cam_scaled, layout).double()


# ---------------------------------------------------------------------------
# condition encoders
# ---------------------------------------------------------------------------


class ImageConditionEncoder(nn.Module):
    """Conv encoder producing one feature map per denoiser stage.

    Input images are (B, H, W, 3) in [0, 1]; outputs have spatial sizes
    H, H/2, H/4 so they concatenate onto the denoiser's encoder stages.
    """

    mode = "maps"

    def __init__(self, in_channels: int = 3, base: int = 16):
        super().__init__()
        self.stage_channels = (base, 2 * base, 3 * base)
        self.stage0 = nn.Sequential(
            nn.Conv2d(in_channels, base, 3, padding=1), nn.SiLU(),
            nn.Conv2d(base, base, 3, padding=1))
        self.stage1 = nn.Sequential(
            nn.SiLU(), nn.Conv2d(base, 2 * base, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * base, 2 * base, 3, padding=1))
        self.stage2 = nn.Sequential(
            nn.SiLU(), nn.Conv2d(2 * base, 3 * base, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(3 * base, 3 * base, 3, padding=1))

    def forward(self, images: torch.Tensor):
        if images.ndim != 4:
            raise ValueError("image condition must be batched (B, H, W, C)")
        x = images.permute(0, 3, 1, 2)
        f0 = self.stage0(x)
        f1 = self.stage1(f0)
        f2 = self.stage2(f1)
        return (f0, f1, f2)


class VectorConditionEncoder(nn.Module):
    """Bias-free linear map of a condition vector into the time embedding."""

    mode = "vector"
    stage_channels = (0, 0, 0)

    def __init__(self, dim: int, emb_dim: int = 96):
        super().__init__()
        self.proj = nn.Linear(dim, emb_dim, bias=False)

    def forward(self, vec: torch.Tensor) -> torch.Tensor:
        if vec.ndim != 2:
            raise ValueError("vector condition must be batched (B, D)")
        return self.proj(vec)


def encode_condition(payload: torch.Tensor, encoder: nn.Module):
    """Run a condition payload through its encoder (thin dispatch wrapper)."""
    return encoder(payload)


# ---------------------------------------------------------------------------
# pose evaluation
# ---------------------------------------------------------------------------


def nearest_rotation(mat: torch.Tensor) -> torch.Tensor:
    """Orthonormal projection of a 3x3 block onto SO(3)."""
    U, _, Vh = torch.linalg.svd(mat.double())
    det = torch.linalg.det(U @ Vh)
    fix = torch.diag(torch.tensor([1.0, 1.0, float(torch.sign(det))], dtype=torch.float64))
    return U @ fix @ Vh


def pose_error(pred_vec: torch.Tensor, true_cam: Camera) -> tuple[float, float, float]:
    """(rotation error deg, translation L2, mean relative focal error)."""
    pred_vec = torch.as_tensor(pred_vec, dtype=torch.float64)
    if pred_vec.shape != (CAMERA_DIM,) or not torch.isfinite(pred_vec).all():
        raise ValueError("predicted camera vector is not a finite 25-vector")
    ext = pred_vec[:16].reshape(4, 4)
    rot = nearest_rotation(ext[:3, :3])
    rel = rot.T @ true_cam.extrinsic[:3, :3]
    cos = ((rel.diagonal().sum() - 1.0) / 2.0).clamp(-1.0, 1.0)
    rot_deg = float(torch.rad2deg(torch.arccos(cos)))
    trans = float(torch.linalg.norm(ext[:3, 3] - true_cam.position))
    fx, fy = pred_vec[16], pred_vec[20]
    tfx, tfy = true_cam.intrinsic[0, 0], true_cam.intrinsic[1, 1]
    focal = float(((fx - tfx).abs() / tfx + (fy - tfy).abs() / tfy) / 2.0)
    return rot_deg, trans, focal
