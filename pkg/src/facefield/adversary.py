"""Two convolutional discriminators on (B, H, W, C) inputs in [0,1].

D_c scores image realism and regresses the camera pose (score, pitch, yaw)
from one shared trunk; D_s scores the alignment of an image with its
semantic map, taking the channel-concatenated pair. Both append two
CoordConv channels (pixel position in [-1,1]^2) at the input, so absolute
image position is visible to the score: translation equivariance is
deliberately broken, which is what lets a pose head work at all.

The trunk is conv3x3 -> leaky-relu(0.2) -> avg-pool blocks with widths
32/64/128/128 at 32 pixels; each resolution doubling adds one block of
width 128 at the front of the pooling chain, and residual skips turn on
once there are 5 or more blocks.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from . import diffmath as dm
from .generator import kaiming_leaky_init_

Tensor = torch.Tensor

BASE_WIDTHS = (32, 64, 128, 128)


def block_widths(resolution: int) -> list[int]:
    if resolution < 32 or resolution & (resolution - 1):
        raise ValueError(f"discriminator resolution must be a power of two >= 32, got {resolution}")
    extra = int(math.log2(resolution // 32))
    return [128] * extra + list(BASE_WIDTHS)


def coord_channels(resolution: int) -> Tensor:
    """(2, H, W): x then y in [-1,1], pixel centers, row 0 at y=+1."""
    steps = (torch.arange(resolution, dtype=torch.float32) + 0.5) / resolution * 2.0 - 1.0
    ys, xs = torch.meshgrid(-steps, steps, indexing="ij")
    return torch.stack([xs, ys])


class ConvEncoder(nn.Module):
    """Shared trunk: blocks then a linear head over the flattened 2x2 map."""

    def __init__(self, in_channels: int, resolution: int, out_dim: int, seed: int = 0):
        super().__init__()
        self.resolution = resolution
        self.in_channels = in_channels
        widths = block_widths(resolution)
        self.residual = len(widths) >= 5
        convs, skips = [], []
        c = in_channels + 2  # CoordConv
        for w in widths:
            convs.append(nn.Conv2d(c, w, 3, padding=1))
            skips.append(nn.Conv2d(c, w, 1) if self.residual else None)
            c = w
        self.convs = nn.ModuleList(convs)
        self.skips = nn.ModuleList([s for s in skips if s is not None]) if self.residual else None
        final_res = resolution // (2 ** len(widths))
        self.head = nn.Linear(widths[-1] * final_res * final_res, out_dim)
        self.register_buffer("coords", coord_channels(resolution))
        self.reset_parameters(torch.Generator().manual_seed(seed))

    def reset_parameters(self, g: torch.Generator) -> None:
        mods = list(self.convs) + ([*self.skips] if self.residual else []) + [self.head]
        for m in mods:
            kaiming_leaky_init_(m.weight.reshape(m.weight.shape[0], -1), g)
            m.bias.data.zero_()

    def forward(self, x: Tensor) -> Tensor:
        """x: (B, H, W, C) -> (B, out_dim)."""
        if x.dim() != 4 or x.shape[1] != self.resolution or x.shape[2] != self.resolution:
            raise dm.ShapeError(
                f"discriminator: expected (B, {self.resolution}, {self.resolution}, "
                f"{self.in_channels}), got {tuple(x.shape)}")
        if x.shape[3] != self.in_channels:
            raise dm.ShapeError(
                f"discriminator: expected {self.in_channels} channels, got {x.shape[3]}")
        h = x.permute(0, 3, 1, 2)
        h = dm.concat([h, self.coords.unsqueeze(0).expand(h.shape[0], -1, -1, -1)], 1)
        for i, conv in enumerate(self.convs):
            y = dm.avg_pool2d(dm.leaky_relu(conv(h), 0.2), 2)
            if self.residual:
                y = (y + dm.avg_pool2d(self.skips[i](h), 2)) / math.sqrt(2.0)
            h = y
        return self.head(h.reshape(h.shape[0], -1))


class ColorDiscriminator(ConvEncoder):
    def __init__(self, resolution: int = 32, seed: int = 0):
        super().__init__(3, resolution, 3, seed=seed)


class SemanticDiscriminator(ConvEncoder):
    def __init__(self, k: int = 4, resolution: int = 32, seed: int = 0):
        super().__init__(3 + k, resolution, 1, seed=seed)
        self.k = k


def d_color(params: ColorDiscriminator, image: Tensor) -> tuple[Tensor, Tensor]:
    """image (B,H,W,3) -> (score (B,), pose_pred (B,2))."""
    out = params(image)
    return out[:, 0], out[:, 1:]


def d_semantic(params: SemanticDiscriminator, sem: Tensor, image: Tensor) -> Tensor:
    """sem (B,H,W,k) simplex + image (B,H,W,3) -> score (B,)."""
    if sem.shape[-1] != params.k:
        raise dm.ShapeError(f"d_semantic: expected {params.k} semantic channels, got {sem.shape[-1]}")
    return params(dm.concat([sem, image], -1))[:, 0]


def encode_real_mask(mask: Tensor, k: int) -> Tensor:
    """Label map (..., H, W) int -> one-hot (..., H, W, k) float."""
    mask = torch.as_tensor(mask, dtype=torch.int64)
    if mask.numel() and (int(mask.max()) >= k or int(mask.min()) < 0):
        raise ValueError(f"encode_real_mask: labels must be in [0, {k}), "
                         f"got range [{int(mask.min())}, {int(mask.max())}]")
    return torch.nn.functional.one_hot(mask, num_classes=k).to(torch.float32)
