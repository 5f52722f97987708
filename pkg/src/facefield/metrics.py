"""Evaluation metrics: mIoU, PSNR, depth-based multi-view reprojection error."""

import math
from dataclasses import dataclass

import numpy as np
import torch

from .renderer import CameraPose, SamplingConfig, camera_basis, render


def _as_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


# ---------------------------------------------------------------------------
# Label-map agreement
# ---------------------------------------------------------------------------

@dataclass
class ConfusionTable:
    counts: np.ndarray  # (k, k) int64; row = ground truth, column = prediction

    @classmethod
    def from_maps(cls, pred, gt, k: int) -> "ConfusionTable":
        pred = _as_numpy(pred).astype(np.int64)
        gt = _as_numpy(gt).astype(np.int64)
        if pred.shape != gt.shape:
            raise ValueError(f"confusion: shape mismatch {pred.shape} vs {gt.shape}")
        if k < 1:
            raise ValueError("confusion: k must be >= 1")
        for name, m in (("pred", pred), ("gt", gt)):
            if m.size and (int(m.min()) < 0 or int(m.max()) >= k):
                raise ValueError(f"confusion: {name} labels outside [0, {k})")
        flat = gt.reshape(-1) * k + pred.reshape(-1)
        counts = np.bincount(flat, minlength=k * k).reshape(k, k)
        return cls(counts=counts)

    def miou(self) -> float:
        """Mean IoU over classes, skipping classes absent from both maps."""
        c = self.counts.astype(np.float64)
        inter = np.diag(c)
        union = c.sum(axis=0) + c.sum(axis=1) - inter
        present = union > 0
        if not present.any():
            raise ValueError("miou: both maps are empty")
        return float((inter[present] / union[present]).mean())


def miou(pred, gt, k: int) -> float:
    """Mean over classes of |pred n gt| / |pred u gt|; classes missing from
    both maps are excluded from the mean."""
    return ConfusionTable.from_maps(pred, gt, k).miou()


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images valued in [0, 1]; inf when identical."""
    a = _as_numpy(a).astype(np.float64)
    b = _as_numpy(b).astype(np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    for name, img in (("a", a), ("b", b)):
        if img.size and (img.min() < -1e-6 or img.max() > 1.0 + 1e-6):
            raise ValueError(f"psnr: image {name} has values outside [0, 1]")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


# ---------------------------------------------------------------------------
# Depth-based reprojection consistency
# ---------------------------------------------------------------------------
# All warp geometry runs in float64: the self-reprojection identity must hold
# to ~1e-6 and an f32 camera basis alone eats most of that budget.

def _basis_np(pose: CameraPose):
    eye, right, up, forward = camera_basis(pose, dtype=torch.float64)
    return eye.numpy(), right.numpy(), up.numpy(), forward.numpy()


def unproject_pixels(depth, pose: CameraPose) -> np.ndarray:
    """Lift each pixel center to the 3D point at ray parameter depth[i, j]
    (same unit-direction metric the renderer integrates over). Returns
    (H, H, 3) float64 world points."""
    depth = _as_numpy(depth).astype(np.float64)
    if depth.ndim != 2 or depth.shape[0] != depth.shape[1]:
        raise ValueError(f"unproject: depth must be square, got {depth.shape}")
    res = depth.shape[0]
    eye, right, up, forward = _basis_np(pose)
    half = math.tan(math.radians(pose.fov) / 2.0)
    steps = (np.arange(res, dtype=np.float64) + 0.5) / res * 2.0 - 1.0
    ys, xs = np.meshgrid(-steps, steps, indexing="ij")
    d = forward + xs[..., None] * half * right + ys[..., None] * half * up
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    return eye + depth[..., None] * d


def project_points(points, pose: CameraPose, resolution: int):
    """Project world points into pose's image plane. Returns float64 arrays
    (rows, cols, z_forward); z_forward <= 0 means behind the camera and the
    row/col values there are meaningless."""
    pts = _as_numpy(points).astype(np.float64)
    if pts.shape[-1] != 3:
        raise ValueError(f"project: points must end in dim 3, got {pts.shape}")
    eye, right, up, forward = _basis_np(pose)
    q = pts - eye
    z = q @ forward
    half = math.tan(math.radians(pose.fov) / 2.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = (q @ right) / (z * half)
        v = (q @ up) / (z * half)
    cols = (u + 1.0) / 2.0 * resolution - 0.5
    rows = (1.0 - v) / 2.0 * resolution - 0.5
    return rows, cols, z


def _bilinear(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample img (H, W, C) at fractional (rows, cols) already inside
    [0, H-1] x [0, W-1]."""
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    r1 = np.minimum(r0 + 1, img.shape[0] - 1)
    c1 = np.minimum(c0 + 1, img.shape[1] - 1)
    fr = (rows - r0)[..., None]
    fc = (cols - c0)[..., None]
    top = img[r0, c0] * (1.0 - fc) + img[r0, c1] * fc
    bot = img[r1, c0] * (1.0 - fc) + img[r1, c1] * fc
    return top * (1.0 - fr) + bot * fr


def reproject_error(rgb_a, depth_a, weight_sum_a, rgb_b,
                    pose_a: CameraPose, pose_b: CameraPose,
                    weight_threshold: float = 0.5) -> float:
    """Photometric error of warping view a onto view b through rendered depth.

    Every view-a pixel whose compositing-weight sum passes the threshold is
    lifted to 3D at its normalized hit depth (depth / weight sum, so the
    expected-termination depth of the ray rather than the background-diluted
    expectation), projected through pose_b's camera, and compared against a
    bilinear sample of rgb_b there. Returns the mean |delta rgb| over pixels
    that land inside view b's frame. Accepts analytic renders too: pass the
    hit-distance map as depth and the hit mask as the weight sum.
    """
    rgb_a = _as_numpy(rgb_a).astype(np.float64)
    rgb_b = _as_numpy(rgb_b).astype(np.float64)
    depth_a = _as_numpy(depth_a).astype(np.float64)
    wsum = _as_numpy(weight_sum_a).astype(np.float64)
    if rgb_a.shape != rgb_b.shape:
        raise ValueError(f"reproject: rgb shapes differ {rgb_a.shape} vs {rgb_b.shape}")
    if rgb_a.shape[:2] != depth_a.shape or depth_a.shape != wsum.shape:
        raise ValueError(
            f"reproject: rgb {rgb_a.shape} vs depth {depth_a.shape} vs weights {wsum.shape}")
    res = rgb_a.shape[0]
    ok = wsum >= weight_threshold
    if not ok.any():
        raise ValueError("reproject: no pixels pass the weight-sum threshold")
    t_hat = np.where(ok, depth_a / np.maximum(wsum, 1e-12), 1.0)
    pts = unproject_pixels(t_hat, pose_a)
    rows, cols, z = project_points(pts, pose_b, res)
    valid = (ok & (z > 0.0) & np.isfinite(rows) & np.isfinite(cols)
             & (rows >= 0.0) & (rows <= res - 1.0)
             & (cols >= 0.0) & (cols <= res - 1.0))
    if not valid.any():
        raise ValueError("reproject: no valid pixels land inside the target frame")
    warped = _bilinear(rgb_b, rows[valid], cols[valid])
    return float(np.abs(warped - rgb_a[valid]).mean())


def reprojection_consistency(gen, z_s: torch.Tensor, z_t: torch.Tensor,
                             pose_a: CameraPose, pose_b: CameraPose,
                             sampling: SamplingConfig | None = None,
                             resolution: int = 32) -> float:
    """Render at both poses and score how well pose_a's image, warped through
    its own depth map, predicts pose_b's image."""
    if z_s.dim() == 2 and z_s.shape[0] == 1:
        z_s = z_s[0]
    if z_t.dim() == 2 and z_t.shape[0] == 1:
        z_t = z_t[0]
    with torch.no_grad():
        out = render(gen, z_s, z_t, [pose_a, pose_b], sampling, resolution)
    rgb = out.rgb.numpy().astype(np.float64)
    depth = out.depth.numpy().astype(np.float64)
    wsum = out.weights.sum(dim=-1).numpy().astype(np.float64)
    return reproject_error(rgb[0], depth[0], wsum[0], rgb[1], pose_a, pose_b)
