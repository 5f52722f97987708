"""Camera model and discretized volume rendering.

Cameras sit on an object-centered sphere (fixed radius, look-at origin,
world up (0,1,0)) and are parameterized by (pitch, yaw). Rendering samples
each pixel ray at N depths in [t_n, t_f], queries the generator once for
the whole batch, and composites color, semantics, and depth from a single
shared weight vector per ray: the density is one field, so the three
outputs cannot disagree about geometry.

Semantics integrate raw logits and apply softmax per pixel afterwards;
color applies sigmoid per sample before compositing. Image row 0 is the
top of the frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import diffmath as dm
from .generator import Generator

Tensor = torch.Tensor


@dataclass
class CameraPose:
    pitch: float = 0.0
    yaw: float = 0.0
    radius: float = 1.0
    fov: float = 12.0  # full angle, degrees


@dataclass
class PoseDistribution:
    pitch_sigma: float = 0.15
    yaw_sigma: float = 0.3
    # clamp bounds sit at ~5 sigma: wide enough not to distort the marginal,
    # tight enough to keep |pitch| < pi/2 (up-vector degeneracy)
    pitch_max: float = 0.75
    yaw_max: float = 1.5


@dataclass
class SamplingConfig:
    n_samples: int = 24
    stratified: bool = False
    t_near: float = 0.8
    t_far: float = 1.2


@dataclass
class Rays:
    origins: Tensor  # (R, 3)
    dirs: Tensor     # (R, 3) unit
    t_near: float = 0.8
    t_far: float = 1.2


@dataclass
class RenderOutput:
    rgb: Tensor        # (B, H, W, 3) in [0,1]
    sem_probs: Tensor  # (B, H, W, k) simplex per pixel
    depth: Tensor      # (B, H, W)
    weights: Tensor    # (B, H, W, N)
    aux: dict = field(default_factory=dict)


def sample_pose(dist: PoseDistribution, g: torch.Generator) -> CameraPose:
    if dist.pitch_sigma < 0 or dist.yaw_sigma < 0:
        raise ValueError("sample_pose: sigmas must be >= 0")
    eps = torch.randn(2, generator=g)
    pitch = max(-dist.pitch_max, min(dist.pitch_max, float(eps[0]) * dist.pitch_sigma))
    yaw = max(-dist.yaw_max, min(dist.yaw_max, float(eps[1]) * dist.yaw_sigma))
    return CameraPose(pitch=pitch, yaw=yaw)


def camera_basis(pose: CameraPose,
                 dtype: torch.dtype = torch.float32) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Returns (eye, right, up, forward) for a look-at-origin camera."""
    cp, sp = math.cos(pose.pitch), math.sin(pose.pitch)
    cy, sy = math.cos(pose.yaw), math.sin(pose.yaw)
    if abs(cp) < 1e-7:
        raise ValueError("camera_basis: |pitch| = pi/2 degenerates the up vector")
    eye = torch.tensor([cp * sy, sp, cp * cy], dtype=dtype) * pose.radius
    forward = -eye / eye.norm()
    world_up = torch.tensor([0.0, 1.0, 0.0], dtype=dtype)
    right = torch.linalg.cross(forward, world_up)
    right = right / right.norm()
    up = torch.linalg.cross(right, forward)
    return eye, right, up, forward


def pose_to_rays(pose: CameraPose, resolution: int, fov: float | None = None) -> Rays:
    """Pinhole rays through pixel centers; row 0 is the top of the image."""
    if resolution < 1:
        raise ValueError("pose_to_rays: resolution must be >= 1")
    eye, right, up, forward = camera_basis(pose)
    half = math.tan(math.radians(fov if fov is not None else pose.fov) / 2.0)
    steps = (torch.arange(resolution, dtype=torch.float32) + 0.5) / resolution * 2.0 - 1.0
    ys, xs = torch.meshgrid(-steps, steps, indexing="ij")
    dirs = (forward[None, None]
            + xs[..., None] * half * right[None, None]
            + ys[..., None] * half * up[None, None])
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    dirs = dirs.reshape(-1, 3)
    origins = eye[None].expand_as(dirs).contiguous()
    return Rays(origins=origins, dirs=dirs)


def sample_depths(sampling: SamplingConfig, n_rays_shape: tuple[int, ...],
                  g: torch.Generator | None = None) -> Tensor:
    """Depth values per ray, shape (*n_rays_shape, N): bin midpoints, or one
    uniform draw per bin when stratified."""
    if sampling.n_samples < 2:
        raise ValueError("sample_depths: need N >= 2 samples")
    n = sampling.n_samples
    length = sampling.t_far - sampling.t_near
    base = torch.arange(n, dtype=torch.float32)
    if sampling.stratified:
        u = torch.rand(*n_rays_shape, n, generator=g)
    else:
        u = torch.full((*n_rays_shape, n), 0.5)
    return sampling.t_near + (base + u) / n * length


def integrate_ray(sigma: Tensor, c_pre: Tensor, s_logits: Tensor,
                  t: Tensor, t_far: float) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Composite one or many rays. sigma/t: (..., N); c_pre: (..., N, 3);
    s_logits: (..., N, k). Returns (C, S, depth, weights); the weights
    tensor returned is the very object used for all three composites.
    """
    delta_in = t[..., 1:] - t[..., :-1]
    if delta_in.numel() and float(delta_in.detach().min()) <= 0:
        raise ValueError("integrate_ray: depths must be strictly increasing")
    last = t_far - t[..., -1:]
    if float(last.detach().min()) < 0:
        raise ValueError("integrate_ray: last depth exceeds t_far")
    if float(sigma.detach().min()) < 0:
        raise ValueError("integrate_ray: sigma must be non-negative")
    delta = dm.concat([delta_in, last], -1)
    alpha = 1.0 - dm.exponential(-sigma * delta)
    keep = 1.0 - alpha
    transmit = dm.cumprod(
        dm.concat([torch.ones_like(keep[..., :1]), keep[..., :-1]], -1), -1)
    w = transmit * alpha
    color = (w.unsqueeze(-1) * dm.sigmoid(c_pre)).sum(-2)
    sem = dm.softmax((w.unsqueeze(-1) * s_logits).sum(-2), -1)
    depth = (w * t).sum(-1)
    return color, sem, depth, w


def render_rays(gen: Generator, z_s: Tensor, z_t: Tensor,
                origins: Tensor, dirs: Tensor, sampling: SamplingConfig,
                g: torch.Generator | None = None, aux: bool = False) -> RenderOutput:
    """Composite an arbitrary ray set. origins/dirs: (B, R, 3); latents
    (B, d). Output fields have ray layout (B, R, ...) instead of (B, H, W, ...).
    """
    b, r_count = origins.shape[0], origins.shape[1]
    n, k = sampling.n_samples, gen.config.k_classes
    mods_s = gen.map_latent(z_s, "shape")
    mods_t = gen.map_latent(z_t, "texture")

    t = sample_depths(sampling, (b, r_count), g)      # (B, R, N)
    points = origins[:, :, None, :] + dirs[:, :, None, :] * t[..., None]
    view = dirs[:, :, None, :].expand(b, r_count, n, 3)

    sigma, c_pre, s_logits = gen.query_field(
        points.reshape(b, r_count * n, 3), view.reshape(b, r_count * n, 3), mods_s, mods_t)
    sigma = sigma.reshape(b, r_count, n)
    c_pre = c_pre.reshape(b, r_count, n, 3)
    s_logits = s_logits.reshape(b, r_count, n, k)

    color, sem, depth, w = integrate_ray(sigma, c_pre, s_logits, t, sampling.t_far)
    out = RenderOutput(rgb=color, sem_probs=sem, depth=depth, weights=w)
    if aux:
        rgb_sg = (w.unsqueeze(-1) * dm.sigmoid(c_pre).detach()).sum(-2)
        out.aux = {"t": t, "sigma": sigma, "c_pre": c_pre, "s_logits": s_logits,
                   "rgb_color_detached": rgb_sg}
    return out


def _expand_latents(z_s: Tensor, z_t: Tensor, b: int) -> tuple[Tensor, Tensor]:
    if z_s.dim() == 1:
        z_s = z_s.unsqueeze(0).expand(b, -1)
    if z_t.dim() == 1:
        z_t = z_t.unsqueeze(0).expand(b, -1)
    if z_s.shape[0] != b or z_t.shape[0] != b:
        raise dm.ShapeError(f"render: latent batch {tuple(z_s.shape)} vs {b} poses")
    return z_s, z_t


def render(gen: Generator, z_s: Tensor, z_t: Tensor,
           pose: CameraPose | list[CameraPose], sampling: SamplingConfig | None = None,
           resolution: int = 32, g: torch.Generator | None = None,
           aux: bool = False) -> RenderOutput:
    """Full-image render for a batch of poses.

    z_s/z_t may be (d,) or (B, d) matching the pose list. With aux=True the
    output carries the per-sample field values and a color-detached rgb
    composite (same values as rgb; gradients flow only through geometry).
    """
    sampling = sampling or SamplingConfig()
    poses = [pose] if isinstance(pose, CameraPose) else list(pose)
    b, res = len(poses), resolution
    z_s, z_t = _expand_latents(z_s, z_t, b)
    rays = [pose_to_rays(p, res) for p in poses]
    origins = torch.stack([r.origins for r in rays])  # (B, R, 3)
    dirs = torch.stack([r.dirs for r in rays])

    flat = render_rays(gen, z_s, z_t, origins, dirs, sampling, g=g, aux=aux)
    n, k = sampling.n_samples, gen.config.k_classes
    out = RenderOutput(
        rgb=flat.rgb.reshape(b, res, res, 3),
        sem_probs=flat.sem_probs.reshape(b, res, res, k),
        depth=flat.depth.reshape(b, res, res),
        weights=flat.weights.reshape(b, res, res, n),
    )
    if aux:
        out.aux = dict(flat.aux)
        out.aux["rgb_color_detached"] = flat.aux["rgb_color_detached"].reshape(b, res, res, 3)
    return out


def semantic_argmax(sem_probs) -> np.ndarray:
    """Per-pixel argmax label map; ties break to the lowest class index."""
    if isinstance(sem_probs, Tensor):
        sem_probs = sem_probs.detach().numpy()
    return np.argmax(sem_probs, axis=-1).astype(np.int64)
