"""Procedural training corpus: random sphere/box scenes rendered to
monocular image + semantic-mask pairs with an analytic raytracer.

Scenes hold 1-3 primitives with distinct class ids (background is 0), all
inside the camera's sampling shell so every view covers the whole scene.
Shading is Lambertian under one fixed light; background is black. Rays are
generated by the same camera code the neural renderer uses, so real and
generated pixels are geometrically aligned.

Sampler ranges (uniform unless stated): primitive count {1,2,3}, kind
{sphere, box}, size [0.025, 0.05] (sphere radius / box half-extent), albedo
[0.25, 0.95] per channel, center uniform in the ball that keeps the whole
primitive within SCENE_RADIUS of the origin. Poses are Gaussian in
(pitch, yaw), clamped like the renderer's pose distribution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import imageio
from .renderer import CameraPose, PoseDistribution, pose_to_rays

SCENE_RADIUS = 0.10
SIZE_RANGE = (0.025, 0.05)
ALBEDO_RANGE = (0.25, 0.95)
LIGHT_DIR = np.array([0.35, 0.65, 0.7]) / np.linalg.norm([0.35, 0.65, 0.7])
AMBIENT, DIFFUSE = 0.25, 0.75


@dataclass
class Primitive:
    kind: str          # "sphere" | "box"
    center: np.ndarray  # (3,)
    size: float        # sphere radius or box half-extent
    albedo: np.ndarray  # (3,)
    class_id: int      # 1..k-1


@dataclass
class PrimitiveScene:
    primitives: list[Primitive]
    k: int = 4


@dataclass
class DatasetSpec:
    n_scenes: int = 2000
    resolution: int = 32
    k: int = 4
    pose_sigma: tuple[float, float] = (0.15, 0.3)
    seed: int = 0


def _bounding_radius(kind: str, size: float) -> float:
    return size * np.sqrt(3.0) if kind == "box" else size


def sample_scene(rng: np.random.Generator, k: int = 4) -> PrimitiveScene:
    n = int(rng.integers(1, min(3, k - 1) + 1))
    class_ids = rng.choice(np.arange(1, k), size=n, replace=False)
    prims = []
    for class_id in class_ids:
        kind = "sphere" if rng.random() < 0.5 else "box"
        size = float(rng.uniform(*SIZE_RANGE))
        max_c = max(SCENE_RADIUS - _bounding_radius(kind, size), 0.0)
        while True:
            center = rng.uniform(-max_c, max_c, size=3)
            if np.linalg.norm(center) <= max_c:
                break
        albedo = rng.uniform(*ALBEDO_RANGE, size=3)
        prims.append(Primitive(kind, center, size, albedo, int(class_id)))
    return PrimitiveScene(primitives=prims, k=k)


# ---------------------------------------------------------------------------
# Analytic intersection
# ---------------------------------------------------------------------------

def _hit_sphere(o, d, center, radius):
    """o,d: (R,3). Returns (t, normal) with t=inf on miss."""
    oc = o - center[None]
    b = np.sum(d * oc, axis=1)
    c = np.sum(oc * oc, axis=1) - radius * radius
    disc = b * b - c
    t = np.full(o.shape[0], np.inf)
    ok = disc >= 0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    tc = np.where(t0 > 1e-6, t0, np.where(t1 > 1e-6, t1, np.inf))
    t[ok] = tc[ok]
    t_safe = np.where(np.isfinite(t), t, 1.0)
    n = o + t_safe[:, None] * d - center[None]
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    n = n / np.where(norm > 0, norm, 1.0)
    return t, n


def _hit_box(o, d, center, half):
    """Axis-aligned cube; slab method. Returns (t, normal), t=inf on miss."""
    safe_d = np.where(np.abs(d) < 1e-12, 1e-12, d)
    lo = (center[None] - half - o) / safe_d
    hi = (center[None] + half - o) / safe_d
    tmin_ax = np.minimum(lo, hi)
    tmax_ax = np.maximum(lo, hi)
    tmin = tmin_ax.max(axis=1)
    tmax = tmax_ax.min(axis=1)
    hit = (tmax >= tmin) & (tmax > 1e-6)
    t = np.where(hit & (tmin > 1e-6), tmin, np.inf)
    axis = np.argmax(tmin_ax, axis=1)
    n = np.zeros_like(o)
    rows = np.arange(o.shape[0])
    n[rows, axis] = -np.sign(d[rows, axis])
    return t, n


def raytrace_gt(scene: PrimitiveScene, pose: CameraPose, resolution: int,
                return_depth: bool = False):
    """Nearest-hit raytrace. Returns (image HxWx3 float in [0,1],
    mask HxW int64), plus the hit-distance map (inf on miss) when asked."""
    rays = pose_to_rays(pose, resolution)
    o = rays.origins.numpy().astype(np.float64)
    d = rays.dirs.numpy().astype(np.float64)
    r = o.shape[0]

    best_t = np.full(r, np.inf)
    best_n = np.zeros((r, 3))
    best_albedo = np.zeros((r, 3))
    best_class = np.zeros(r, dtype=np.int64)
    for prim in scene.primitives:
        hit = _hit_sphere if prim.kind == "sphere" else _hit_box
        t, n = hit(o, d, np.asarray(prim.center, dtype=np.float64), prim.size)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_n[closer] = n[closer]
        best_albedo[closer] = prim.albedo
        best_class[closer] = prim.class_id

    lit = AMBIENT + DIFFUSE * np.maximum(0.0, best_n @ LIGHT_DIR)
    img = np.clip(best_albedo * lit[:, None], 0.0, 1.0)
    img[~np.isfinite(best_t)] = 0.0
    image = img.reshape(resolution, resolution, 3).astype(np.float32)
    mask = best_class.reshape(resolution, resolution)
    if return_depth:
        return image, mask, best_t.reshape(resolution, resolution)
    return image, mask


# ---------------------------------------------------------------------------
# Dataset generation and loading
# ---------------------------------------------------------------------------

def _sample_dataset_pose(rng: np.random.Generator, sigma: tuple[float, float]) -> CameraPose:
    dist = PoseDistribution(pitch_sigma=sigma[0], yaw_sigma=sigma[1])
    pitch = float(np.clip(rng.normal(0.0, dist.pitch_sigma), -dist.pitch_max, dist.pitch_max))
    yaw = float(np.clip(rng.normal(0.0, dist.yaw_sigma), -dist.yaw_max, dist.yaw_max))
    return CameraPose(pitch=pitch, yaw=yaw)


def generate_dataset(spec: DatasetSpec, out_dir: str | Path) -> dict:
    """Writes n image/mask PNG pairs plus manifest.json; returns the manifest."""
    if spec.k < 2:
        raise ValueError("generate_dataset: k must be >= 2")
    if spec.resolution not in (32, 64, 128):
        raise ValueError("generate_dataset: resolution must be one of 32, 64, 128")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise RuntimeError(f"generate_dataset: cannot create {out}: {e}") from e

    seeds = np.random.SeedSequence(spec.seed).spawn(spec.n_scenes)
    records = []
    for i in range(spec.n_scenes):
        rng = np.random.default_rng(seeds[i])
        scene = sample_scene(rng, k=spec.k)
        pose = _sample_dataset_pose(rng, spec.pose_sigma)
        image, mask = raytrace_gt(scene, pose, spec.resolution)
        img_name, mask_name = f"image_{i:05d}.png", f"mask_{i:05d}.png"
        try:
            imageio.save_rgb(out / img_name, image)
            imageio.save_label(out / mask_name, mask)
        except OSError as e:
            raise RuntimeError(f"generate_dataset: cannot write under {out}: {e}") from e
        records.append({"image": img_name, "mask": mask_name,
                        "pose": [pose.pitch, pose.yaw]})

    manifest = {
        "n_scenes": spec.n_scenes, "resolution": spec.resolution, "k": spec.k,
        "pose_sigma": list(spec.pose_sigma), "seed": spec.seed, "records": records,
    }
    try:
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    except OSError as e:
        raise RuntimeError(f"generate_dataset: cannot write {out / 'manifest.json'}: {e}") from e
    return manifest


@dataclass
class Dataset:
    images: torch.Tensor  # (n, H, W, 3) float32 in [0,1]
    masks: torch.Tensor   # (n, H, W) int64
    poses: torch.Tensor   # (n, 2) float32 (pitch, yaw)
    k: int = 4
    resolution: int = 32
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return self.images.shape[0]


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    images, masks, poses = [], [], []
    for rec in manifest["records"]:
        images.append(imageio.load_rgb(path / rec["image"]))
        masks.append(imageio.load_label(path / rec["mask"]))
        poses.append(rec["pose"])
    return Dataset(
        images=torch.from_numpy(np.stack(images)),
        masks=torch.from_numpy(np.stack(masks)),
        poses=torch.tensor(poses, dtype=torch.float32),
        k=manifest["k"], resolution=manifest["resolution"], manifest=manifest,
    )
