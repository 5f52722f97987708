"""Renderer tests: camera geometry oracles, compositing identities against
analytic transmittance, shared-weight alignment, and self-convergence.
"""

import math

import numpy as np
import pytest
import torch

from facefield.generator import Generator, GeneratorConfig
from facefield.renderer import (CameraPose, PoseDistribution, SamplingConfig,
                                camera_basis, integrate_ray, pose_to_rays,
                                render, sample_depths, sample_pose,
                                semantic_argmax)

TINY = GeneratorConfig(
    z_shape_dim=8, z_texture_dim=8, trunk_depth=2, trunk_width=8,
    color_depth=2, mapping_hidden=8, k_classes=3, grid_size=4, grid_channels=2)


# ---------------------------------------------------------------------------
# camera
# ---------------------------------------------------------------------------

def test_frontal_center_ray():
    rays = pose_to_rays(CameraPose(), 33)
    center = rays.dirs[33 * 16 + 16]
    eye = rays.origins[0]
    assert torch.allclose(center, -eye / eye.norm(), atol=1e-6)


def test_directions_unit_norm():
    rays = pose_to_rays(CameraPose(pitch=0.3, yaw=-0.7), 16)
    assert float((rays.dirs.norm(dim=-1) - 1).abs().max()) < 1e-6


def test_center_ray_passes_through_origin():
    """Point-line distance from origin to the central ray, for random poses."""
    g = torch.Generator().manual_seed(0)
    for _ in range(20):
        pose = CameraPose(pitch=float(torch.randn(1, generator=g)) * 0.3,
                          yaw=float(torch.randn(1, generator=g)) * 0.5)
        rays = pose_to_rays(pose, 65)
        o = rays.origins[65 * 32 + 32]
        d = rays.dirs[65 * 32 + 32]
        dist = float(torch.linalg.cross(o, d).norm())  # |o x d| / |d|, unit d
        assert dist < 1e-6


def test_pitch_degeneracy_error():
    with pytest.raises(ValueError):
        camera_basis(CameraPose(pitch=math.pi / 2))
    with pytest.raises(ValueError):
        pose_to_rays(CameraPose(pitch=-math.pi / 2), 8)


def test_sample_pose_degenerate_and_seeded():
    g = torch.Generator().manual_seed(1)
    p = sample_pose(PoseDistribution(pitch_sigma=0.0, yaw_sigma=0.0), g)
    assert p.pitch == 0.0 and p.yaw == 0.0
    a = sample_pose(PoseDistribution(), torch.Generator().manual_seed(5))
    b = sample_pose(PoseDistribution(), torch.Generator().manual_seed(5))
    assert a.pitch == b.pitch and a.yaw == b.yaw


def test_sample_pose_std_within_5pct():
    g = torch.Generator().manual_seed(2)
    dist = PoseDistribution()
    draws = np.array([[p.pitch, p.yaw] for p in (sample_pose(dist, g) for _ in range(10_000))])
    assert abs(draws[:, 0].std() - dist.pitch_sigma) / dist.pitch_sigma < 0.05
    assert abs(draws[:, 1].std() - dist.yaw_sigma) / dist.yaw_sigma < 0.05


# ---------------------------------------------------------------------------
# integrate_ray
# ---------------------------------------------------------------------------

def _ray_inputs(n, k=3, sigma_val=1.0, t0=0.8, t1=1.2, g=None):
    t = sample_depths(SamplingConfig(n_samples=n, t_near=t0, t_far=t1), (1,), g)
    sigma = torch.full((1, n), sigma_val)
    c = torch.randn(1, n, 3, generator=g) if g else torch.zeros(1, n, 3)
    s = torch.randn(1, n, k, generator=g) if g else torch.zeros(1, n, k)
    return sigma, c, s, t


def test_integrate_empty_space():
    sigma, c, s, t = _ray_inputs(8, sigma_val=0.0)
    color, sem, depth, w = integrate_ray(sigma, c, s, t, 1.2)
    assert torch.equal(color, torch.zeros(1, 3))
    assert torch.equal(w, torch.zeros(1, 8))
    assert torch.allclose(sem, torch.full((1, 3), 1 / 3))
    assert float(depth) == 0.0


def test_integrate_opaque_single_sample():
    c = torch.tensor([[[0.3, -1.0, 2.0]]])
    s = torch.tensor([[[5.0, 0.0, -5.0]]])
    sigma = torch.tensor([[1e8]])
    t = torch.tensor([[1.0]])
    color, sem, depth, w = integrate_ray(sigma, c, s, t, 1.2)
    assert torch.allclose(w, torch.ones(1, 1))
    assert torch.allclose(color, torch.sigmoid(c[:, 0]))
    assert torch.allclose(depth, torch.ones(1))


def test_transmittance_analytic_sigma1_L2_N256():
    sigma, c, s, t = _ray_inputs(256, sigma_val=1.0, t0=0.0, t1=2.0)
    color, sem, depth, w = integrate_ray(sigma, c, s, t, 2.0)
    remaining = 1.0 - float(w.sum())
    assert abs(remaining - math.exp(-2.0)) < 1e-3
    assert abs(remaining - 0.135335) < 1e-3


def test_weight_sum_matches_opacity_identity():
    g = torch.Generator().manual_seed(3)
    for _ in range(20):
        n = int(torch.randint(2, 64, (1,), generator=g))
        t = sample_depths(SamplingConfig(n_samples=n, stratified=True), (4,), g)
        sigma = torch.rand(4, n, generator=g) * 5
        c = torch.randn(4, n, 3, generator=g)
        s = torch.randn(4, n, 3, generator=g)
        color, sem, depth, w = integrate_ray(sigma, c, s, t, 1.2)
        assert float(w.min()) >= 0
        assert float(w.sum(-1).max()) <= 1 + 1e-6
        delta = torch.cat([t[:, 1:] - t[:, :-1], 1.2 - t[:, -1:]], -1)
        expect = 1 - torch.exp(-(sigma * delta).sum(-1))
        assert float((w.sum(-1) - expect).abs().max()) < 1e-5


def test_segment_split_invariance():
    """Constant-density segment split into sub-segments composites identically."""
    sigma_val, c_val, s_val = 1.7, 0.4, 1.1
    out = {}
    for n in (1, 4, 16):
        t = torch.linspace(0.8, 1.2, n + 1)[:-1].reshape(1, n)
        sigma = torch.full((1, n), sigma_val)
        c = torch.full((1, n, 3), c_val)
        s = torch.full((1, n, 3), s_val)
        color, sem, depth, w = integrate_ray(sigma, c, s, t, 1.2)
        out[n] = (float(w.sum()), float(color[0, 0]))
    for n in (4, 16):
        assert abs(out[n][0] - out[1][0]) < 1e-6
        assert abs(out[n][1] - out[1][1]) < 1e-6


def test_integrate_rejects_bad_inputs():
    sigma, c, s, t = _ray_inputs(4)
    bad_t = t.clone()
    bad_t[0, 2] = bad_t[0, 1] - 0.01
    with pytest.raises(ValueError):
        integrate_ray(sigma, c, s, bad_t, 1.2)
    with pytest.raises(ValueError):
        integrate_ray(sigma - 2.0, c, s, t, 1.2)
    with pytest.raises(ValueError):
        integrate_ray(sigma, c, s, t + 1.0, 1.2)  # last depth beyond t_far


# ---------------------------------------------------------------------------
# render
# ---------------------------------------------------------------------------

def test_render_deterministic_hash():
    def once():
        gen = Generator(TINY, seed=11)
        g = torch.Generator().manual_seed(4)
        z_s, z_t = gen.sample_latents(1, g)
        out = render(gen, z_s, z_t, CameraPose(yaw=0.2),
                     SamplingConfig(n_samples=6, stratified=True), 12, g=g)
        return out

    a, b = once(), once()
    for field in ("rgb", "sem_probs", "depth", "weights"):
        assert torch.equal(getattr(a, field), getattr(b, field))


def test_render_sem_rows_sum_to_one():
    gen = Generator(TINY, seed=11)
    g = torch.Generator().manual_seed(5)
    z_s, z_t = gen.sample_latents(2, g)
    out = render(gen, z_s, z_t, [CameraPose(), CameraPose(yaw=0.4)],
                 SamplingConfig(n_samples=6), 8)
    assert float((out.sem_probs.sum(-1) - 1).abs().max().detach()) < 1e-5


def test_render_self_convergence():
    """Per-pixel transmittance error vs an N=1024 reference strictly decreases."""
    gen = Generator(TINY, seed=11)
    g = torch.Generator().manual_seed(6)
    z_s, z_t = gen.sample_latents(1, g)

    def transmittance(n):
        with torch.no_grad():
            out = render(gen, z_s, z_t, CameraPose(yaw=0.1),
                         SamplingConfig(n_samples=n), 8)
        return 1.0 - out.weights.sum(-1)

    ref = transmittance(1024)
    errs = [float((transmittance(n) - ref).abs().mean()) for n in (4, 8, 16, 32, 64)]
    assert all(a > b for a, b in zip(errs, errs[1:])), errs


def test_render_shared_weights_recompose_bitwise():
    gen = Generator(TINY, seed=11)
    g = torch.Generator().manual_seed(7)
    z_s, z_t = gen.sample_latents(1, g)
    out = render(gen, z_s, z_t, CameraPose(pitch=0.1), SamplingConfig(n_samples=6), 8, aux=True)
    w = out.weights.reshape(1, 64, 6)
    c_pre, s_logits, t = out.aux["c_pre"], out.aux["s_logits"], out.aux["t"]
    rgb = (w.unsqueeze(-1) * torch.sigmoid(c_pre)).sum(-2)
    sem = torch.softmax((w.unsqueeze(-1) * s_logits).sum(-2), -1)
    depth = (w * t).sum(-1)
    assert torch.equal(rgb.reshape(out.rgb.shape), out.rgb)
    assert torch.equal(sem.reshape(out.sem_probs.shape), out.sem_probs)
    assert torch.equal(depth.reshape(out.depth.shape), out.depth)
    assert torch.equal(out.aux["rgb_color_detached"], out.rgb)


def test_render_texture_perturbation_leaves_geometry_bit_identical():
    gen = Generator(TINY, seed=11)
    g = torch.Generator().manual_seed(8)
    z_s, z_t = gen.sample_latents(1, g)
    z_t2 = z_t + torch.randn_like(z_t)
    a = render(gen, z_s, z_t, CameraPose(yaw=-0.2), SamplingConfig(n_samples=6), 8)
    b = render(gen, z_s, z_t2, CameraPose(yaw=-0.2), SamplingConfig(n_samples=6), 8)
    assert np.array_equal(semantic_argmax(a.sem_probs), semantic_argmax(b.sem_probs))
    assert torch.equal(a.sem_probs, b.sem_probs)
    assert torch.equal(a.depth, b.depth)
    assert not torch.equal(a.rgb, b.rgb)


def test_render_batch_shape_mismatch():
    gen = Generator(TINY, seed=11)
    g = torch.Generator().manual_seed(9)
    z_s, z_t = gen.sample_latents(3, g)
    import facefield.diffmath as dm
    with pytest.raises(dm.ShapeError):
        render(gen, z_s, z_t, [CameraPose(), CameraPose()], SamplingConfig(n_samples=4), 8)


# ---------------------------------------------------------------------------
# semantic_argmax
# ---------------------------------------------------------------------------

def test_semantic_argmax_cases():
    uniform = np.full((4, 4, 3), 1 / 3)
    assert (semantic_argmax(uniform) == 0).all()
    onehot = np.zeros((2, 2, 3))
    onehot[..., 2] = 1.0
    assert (semantic_argmax(onehot) == 2).all()
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.ones(4), size=(5, 5))
    got = semantic_argmax(probs)
    for i in range(5):
        for j in range(5):
            best, cls = -1.0, 0
            for c in range(4):
                if probs[i, j, c] > best:
                    best, cls = probs[i, j, c], c
            assert got[i, j] == cls
