"""Implicit field generator: (x, d, z_s, z_t) -> (sigma, c_pre, s_logits).

Two mapping networks turn the shape and texture latents into per-layer FiLM
modulation (frequencies gamma, phase shifts beta) for a sinusoidal trunk.
The trunk plus density and semantic heads see only the shape modulation, so
geometry and semantics are view- and texture-invariant by construction. The
color branch consumes [trunk features, view direction, grid feature] under
texture modulation; the learnable 3D feature grid is injected there and
nowhere else.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from . import diffmath as dm

Tensor = torch.Tensor


@dataclass
class GeneratorConfig:
    z_shape_dim: int = 64
    z_texture_dim: int = 64
    trunk_depth: int = 8
    trunk_width: int = 128
    color_depth: int = 2
    mapping_hidden: int = 128
    k_classes: int = 4
    grid_size: int = 32
    grid_channels: int = 16
    scene_bound: float = 0.22   # half-extent of the sampled shell; grid box and coord warp
    omega0: float = 25.0        # folded into the gamma bias at init
    density_bias: float = 2.95  # softplus(2.95) ~ 3.0: shell starts semi-opaque, not void


@dataclass
class ModulationParams:
    """Per-FiLM-layer (gamma, beta), each (B, width)."""
    gammas: list = field(default_factory=list)
    betas: list = field(default_factory=list)

    def __len__(self):
        return len(self.gammas)


def film_siren_layer(x: Tensor, w: Tensor, b: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """sin(gamma * (x @ w^T + b) + beta); gamma/beta broadcast over points."""
    if x.shape[-1] != w.shape[1]:
        raise dm.ShapeError(f"film_siren_layer: input width {tuple(x.shape)} vs weight {tuple(w.shape)}")
    h = torch.nn.functional.linear(x, w, b)
    if gamma.dim() < h.dim():
        gamma = gamma.unsqueeze(-2)
        beta = beta.unsqueeze(-2)
    return dm.sine(gamma * h + beta)


class FiLMLayer(nn.Module):
    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.layer = nn.Linear(in_dim, out_dim)

    def forward(self, x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
        return film_siren_layer(x, self.layer.weight, self.layer.bias, gamma, beta)


class MappingNetwork(nn.Module):
    """3 leaky-relu layers then a linear head emitting all (gamma, beta) pairs.

    omega0 is folded into the gamma half of the head bias so an untrained
    net modulates the trunk at the canonical sinusoidal frequency.
    """

    def __init__(self, z_dim: int, hidden: int, n_layers_out: int, width: int, omega0: float):
        super().__init__()
        self.n_layers_out = n_layers_out
        self.width = width
        layers = []
        d = z_dim
        for _ in range(3):
            layers += [nn.Linear(d, hidden), nn.LeakyReLU(0.2)]
            d = hidden
        layers.append(nn.Linear(d, n_layers_out * width * 2))
        self.net = nn.Sequential(*layers)
        self._omega0 = omega0

    def reset_parameters(self, g: torch.Generator) -> None:
        for m in self.net:
            if isinstance(m, nn.Linear):
                kaiming_leaky_init_(m.weight, g)
                m.bias.data.zero_()
        head = self.net[-1]
        with torch.no_grad():
            head.weight.mul_(0.25)
            half = self.n_layers_out * self.width
            head.bias[:half] = self._omega0
            head.bias[half:] = 0.0

    def forward(self, z: Tensor) -> ModulationParams:
        if z.shape[-1] != self.net[0].in_features:
            raise dm.ShapeError(
                f"map_latent: latent dim {tuple(z.shape)} vs expected ({self.net[0].in_features},)")
        if z.dim() == 1:
            z = z.unsqueeze(0)
        out = self.net(z)
        half = self.n_layers_out * self.width
        gammas = out[:, :half].reshape(-1, self.n_layers_out, self.width)
        betas = out[:, half:].reshape(-1, self.n_layers_out, self.width)
        return ModulationParams(
            gammas=[gammas[:, i] for i in range(self.n_layers_out)],
            betas=[betas[:, i] for i in range(self.n_layers_out)],
        )


class FeatureGrid(nn.Module):
    """Learnable G^3 x F feature volume over the cube [-bound, bound]^3."""

    def __init__(self, size: int, channels: int, bound: float):
        super().__init__()
        self.bound = bound
        self.grid = nn.Parameter(torch.zeros(1, channels, size, size, size))

    def reset_parameters(self, g: torch.Generator) -> None:
        with torch.no_grad():
            self.grid.normal_(0.0, 0.1, generator=g)

    def sample(self, x: Tensor) -> Tensor:
        """x: (B, P, 3) world points; returns (B, P, F). Clamps at the box."""
        return dm.grid_sample_3d(self.grid, x / self.bound)


def sample_feature_grid(grid: FeatureGrid, x: Tensor) -> Tensor:
    return grid.sample(x)


def kaiming_leaky_init_(w: Tensor, g: torch.Generator) -> None:
    fan_in = w.shape[1]
    std = math.sqrt(2.0 / (1 + 0.2 ** 2)) / math.sqrt(fan_in)
    with torch.no_grad():
        w.normal_(0.0, std, generator=g)


def siren_init_(w: Tensor, g: torch.Generator, first: bool, omega0: float) -> None:
    fan_in = w.shape[1]
    bound = 1.0 / fan_in if first else math.sqrt(6.0 / fan_in) / omega0
    with torch.no_grad():
        w.uniform_(-bound, bound, generator=g)


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = config or GeneratorConfig()
        self.config = cfg
        w = cfg.trunk_width
        self.trunk = nn.ModuleList(
            [FiLMLayer(3, w)] + [FiLMLayer(w, w) for _ in range(cfg.trunk_depth - 1)])
        self.density_head = nn.Linear(w, 1)
        self.semantic_head = nn.Linear(w, cfg.k_classes)
        color_in = w + 3 + cfg.grid_channels
        self.color_films = nn.ModuleList(
            [FiLMLayer(color_in, w)] + [FiLMLayer(w, w) for _ in range(cfg.color_depth - 1)])
        self.color_out = nn.Linear(w, 3)
        self.grid = FeatureGrid(cfg.grid_size, cfg.grid_channels, cfg.scene_bound)
        self.mapping_shape = MappingNetwork(
            cfg.z_shape_dim, cfg.mapping_hidden, cfg.trunk_depth, w, cfg.omega0)
        self.mapping_texture = MappingNetwork(
            cfg.z_texture_dim, cfg.mapping_hidden, cfg.color_depth, w, cfg.omega0)
        self.reset_parameters(torch.Generator().manual_seed(seed))

    def reset_parameters(self, g: torch.Generator) -> None:
        for i, layer in enumerate(self.trunk):
            siren_init_(layer.layer.weight, g, first=(i == 0), omega0=self.config.omega0)
            layer.layer.bias.data.zero_()
        for layer in self.color_films:
            siren_init_(layer.layer.weight, g, first=False, omega0=self.config.omega0)
            layer.layer.bias.data.zero_()
        for head in (self.density_head, self.semantic_head, self.color_out):
            # heads are plain linear readouts, not sine layers: default bound,
            # not the omega-scaled SIREN bound (which would flatten untrained
            # renders to near-constant gray)
            bound = 1.0 / math.sqrt(head.weight.shape[1])
            with torch.no_grad():
                head.weight.uniform_(-bound, bound, generator=g)
            head.bias.data.zero_()
        with torch.no_grad():
            self.density_head.bias.fill_(self.config.density_bias)
        self.grid.reset_parameters(g)
        self.mapping_shape.reset_parameters(g)
        self.mapping_texture.reset_parameters(g)

    # -- latent plumbing -----------------------------------------------------

    def sample_latents(self, n: int, g: torch.Generator) -> tuple[Tensor, Tensor]:
        z_s = torch.randn(n, self.config.z_shape_dim, generator=g)
        z_t = torch.randn(n, self.config.z_texture_dim, generator=g)
        return z_s, z_t

    def map_latent(self, z: Tensor, which: str) -> ModulationParams:
        if which == "shape":
            return self.mapping_shape(z)
        if which == "texture":
            return self.mapping_texture(z)
        raise ValueError(f"map_latent: which must be 'shape' or 'texture', got {which!r}")

    # -- field query -----------------------------------------------------------

    def forward(self, x: Tensor, d: Tensor, z_s: Tensor, z_t: Tensor):
        return self.query_field(
            x, d, self.map_latent(z_s, "shape"), self.map_latent(z_t, "texture"))

    def query_field(self, x: Tensor, d: Tensor,
                    mods_s: ModulationParams, mods_t: ModulationParams) -> tuple[Tensor, Tensor, Tensor]:
        """x: (B, P, 3) points, d: (B, P, 3) unit view dirs.

        Returns (sigma (B,P), c_pre (B,P,3), s_logits (B,P,k)). Density and
        semantic logits never see d, the texture modulation, or the grid.
        """
        if not torch.isfinite(x).all() or not torch.isfinite(d).all():
            raise ValueError("query_field: non-finite input")
        h = x / self.config.scene_bound
        for layer, gamma, beta in zip(self.trunk, mods_s.gammas, mods_s.betas):
            h = layer(h, gamma, beta)
        sigma = dm.softplus(self.density_head(h)).squeeze(-1)
        s_logits = self.semantic_head(h)

        e = self.grid.sample(x)
        c = dm.concat([h, d, e], -1)
        for layer, gamma, beta in zip(self.color_films, mods_t.gammas, mods_t.betas):
            c = layer(c, gamma, beta)
        c_pre = self.color_out(c)
        return sigma, c_pre, s_logits


def interpolate_latents(a: Tensor, b: Tensor, t: float) -> Tensor:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"interpolate_latents: t must be in [0,1], got {t}")
    if a.shape != b.shape:
        raise dm.ShapeError(f"interpolate_latents: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (1.0 - t) * a + t * b
