"""Discriminator tests: width schedule, zero-weight degenerates, CoordConv
position sensitivity, input gradients against central differences, and the
R1 double-backprop path against a finite-difference penalty oracle.
"""

import math

import pytest
import torch
from torch.func import functional_call

import facefield.diffmath as dm
from facefield.adversary import (ColorDiscriminator, SemanticDiscriminator,
                                 block_widths, coord_channels, d_color,
                                 d_semantic, encode_real_mask)


def _zero(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


# ---------------------------------------------------------------------------
# Architecture schedule
# ---------------------------------------------------------------------------

def test_block_widths_schedule():
    assert block_widths(32) == [32, 64, 128, 128]
    assert block_widths(64) == [128, 32, 64, 128, 128]
    assert block_widths(128) == [128, 128, 32, 64, 128, 128]
    for bad in (16, 48, 33):
        with pytest.raises(ValueError):
            block_widths(bad)


def test_residual_skips_only_from_five_blocks():
    assert ColorDiscriminator(resolution=32).residual is False
    assert ColorDiscriminator(resolution=64).residual is True


def test_coord_channels_layout():
    c = coord_channels(4)
    assert c.shape == (2, 4, 4)
    assert c.min() >= -1.0 and c.max() <= 1.0
    assert torch.all(c[1, 0] > c[1, -1])  # row 0 sits at the top (y = +1)
    assert torch.all(c[0, :, 0] < c[0, :, -1])  # x grows with column


# ---------------------------------------------------------------------------
# Forward contracts
# ---------------------------------------------------------------------------

def test_zero_weight_dc_scores_zero():
    dc = _zero(ColorDiscriminator(resolution=32, seed=0))
    img = torch.rand(3, 32, 32, 3, generator=torch.Generator().manual_seed(1))
    score, pose = d_color(dc, img)
    assert torch.equal(score, torch.zeros(3))
    assert torch.equal(pose, torch.zeros(3, 2))


def test_zero_weight_ds_scores_zero():
    ds = _zero(SemanticDiscriminator(k=4, resolution=32, seed=0))
    g = torch.Generator().manual_seed(2)
    sem = torch.softmax(torch.randn(2, 32, 32, 4, generator=g), dim=-1)
    img = torch.rand(2, 32, 32, 3, generator=g)
    assert torch.equal(d_semantic(ds, sem, img), torch.zeros(2))


def test_same_image_same_output():
    dc = ColorDiscriminator(resolution=32, seed=3)
    img = torch.rand(2, 32, 32, 3, generator=torch.Generator().manual_seed(4))
    s1, p1 = d_color(dc, img)
    s2, p2 = d_color(dc, img)
    assert torch.equal(s1, s2) and torch.equal(p1, p2)


def test_permuting_sem_channels_changes_score():
    ds = SemanticDiscriminator(k=4, resolution=32, seed=5)
    g = torch.Generator().manual_seed(6)
    sem = torch.softmax(torch.randn(1, 32, 32, 4, generator=g), dim=-1)
    img = torch.rand(1, 32, 32, 3, generator=g)
    a = d_semantic(ds, sem, img)
    b = d_semantic(ds, sem[..., [1, 0, 3, 2]], img)
    assert not torch.allclose(a, b)


def test_translation_changes_score():
    # CoordConv deliberately breaks translation equivariance: a shifted dot
    # must score differently at random init
    dc = ColorDiscriminator(resolution=32, seed=7)
    img = torch.zeros(1, 32, 32, 3)
    img[0, 8:10, 8:10] = 1.0
    shifted = torch.zeros(1, 32, 32, 3)
    shifted[0, 20:22, 14:16] = 1.0
    s1, _ = d_color(dc, img)
    s2, _ = d_color(dc, shifted)
    assert not torch.allclose(s1, s2)


def test_shape_errors_name_the_problem():
    dc = ColorDiscriminator(resolution=32)
    ds = SemanticDiscriminator(k=4, resolution=32)
    with pytest.raises(dm.ShapeError):
        d_color(dc, torch.rand(1, 16, 16, 3))
    with pytest.raises(dm.ShapeError):
        d_color(dc, torch.rand(1, 32, 32, 4))
    with pytest.raises(dm.ShapeError):
        d_semantic(ds, torch.rand(1, 32, 32, 3), torch.rand(1, 32, 32, 3))


def test_encode_real_mask():
    mask = torch.zeros(2, 4, 4, dtype=torch.int64)
    hot = encode_real_mask(mask, 4)
    assert torch.equal(hot[..., 0], torch.ones(2, 4, 4))
    assert torch.equal(hot.sum(-1), torch.ones(2, 4, 4))
    g = torch.Generator().manual_seed(8)
    m = torch.randint(0, 4, (3, 8, 8), generator=g)
    assert torch.equal(encode_real_mask(m, 4).argmax(-1), m)
    with pytest.raises(ValueError):
        encode_real_mask(torch.full((2, 2), 4), 4)


# ---------------------------------------------------------------------------
# Gradients vs central differences
# ---------------------------------------------------------------------------

def _patched_image(base: torch.Tensor, patch: torch.Tensor, r: int, c: int) -> torch.Tensor:
    """Differentiable insert of a (2,2,C) patch at (r, c) of a (1,H,W,C) image."""
    h, w, ch = base.shape[1], base.shape[2], base.shape[3]
    pad = torch.nn.functional.pad(
        patch.reshape(2, 2, ch).permute(2, 0, 1),
        (c, w - 2 - c, r, h - 2 - r)).permute(1, 2, 0).unsqueeze(0)
    mask = torch.zeros_like(base)
    mask[0, r:r + 2, c:c + 2] = 1.0
    return base * (1.0 - mask) + pad


def test_dc_input_gradient_matches_fd():
    dc = ColorDiscriminator(resolution=32, seed=11).double()
    g = torch.Generator().manual_seed(12)
    for seed in range(4):
        base = torch.rand(1, 32, 32, 3, generator=g, dtype=torch.float64)
        r, c = int(torch.randint(0, 30, (1,), generator=g)), int(
            torch.randint(0, 30, (1,), generator=g))

        def f(patch):
            score, _ = d_color(dc, _patched_image(base, patch, r, c))
            return score.sum()

        err = dm.gradient_check(f, base[0, r:r + 2, c:c + 2].reshape(-1).clone())
        assert err <= 1e-3, f"seed {seed}: rel err {err}"


def test_ds_input_gradient_matches_fd():
    ds = SemanticDiscriminator(k=4, resolution=32, seed=13).double()
    g = torch.Generator().manual_seed(14)
    sem = torch.softmax(torch.randn(1, 32, 32, 4, generator=g, dtype=torch.float64), -1)
    img = torch.rand(1, 32, 32, 3, generator=g, dtype=torch.float64)
    r, c = 9, 17

    def f_sem(patch):
        return d_semantic(ds, _patched_image(sem, patch, r, c), img).sum()

    def f_img(patch):
        return d_semantic(ds, sem, _patched_image(img, patch, r, c)).sum()

    assert dm.gradient_check(f_sem, sem[0, r:r + 2, c:c + 2].reshape(-1).clone()) <= 1e-3
    assert dm.gradient_check(f_img, img[0, r:r + 2, c:c + 2].reshape(-1).clone()) <= 1e-3


def _r1_penalty_of_params(net, score_of, target: str, n_coords: int, x0):
    """Returns (f, v0): the R1 penalty as a function of the first n_coords of
    one named parameter, for double-backprop checking."""
    params = {n: p.detach().clone() for n, p in net.named_parameters()}
    buffers = {n: b.detach().clone() for n, b in net.named_buffers()}
    base = params[target].reshape(-1)

    def f(vec):
        flat = torch.cat([vec, base[n_coords:]]).reshape(params[target].shape)
        call_params = {**params, **buffers, target: flat}
        xs = [x.detach().clone().requires_grad_(True) for x in x0]
        score = score_of(lambda *a: functional_call(net, call_params, a), xs)
        grads = torch.autograd.grad(score, xs, create_graph=True)
        return torch.stack([g.square().sum() for g in grads]).sum()

    return f, base[:n_coords].detach().clone()


def test_r1_double_backprop_dc_matches_fd():
    dc = ColorDiscriminator(resolution=32, seed=15).double()
    g = torch.Generator().manual_seed(16)
    x = torch.rand(1, 32, 32, 3, generator=g, dtype=torch.float64)
    f, v0 = _r1_penalty_of_params(
        dc, lambda net, xs: net(xs[0])[:, 0].sum(), "convs.0.weight", 6, [x])
    assert dm.gradient_check(f, v0, step=1e-5) <= 1e-3


def test_r1_double_backprop_ds_matches_fd():
    ds = SemanticDiscriminator(k=4, resolution=32, seed=17).double()
    g = torch.Generator().manual_seed(18)
    sem = torch.softmax(torch.randn(1, 32, 32, 4, generator=g, dtype=torch.float64), -1)
    img = torch.rand(1, 32, 32, 3, generator=g, dtype=torch.float64)

    def score_of(call, xs):
        return call(torch.cat(xs, dim=-1))[:, 0].sum()

    f, v0 = _r1_penalty_of_params(ds, score_of, "head.weight", 6, [sem, img])
    assert dm.gradient_check(f, v0, step=1e-5) <= 1e-3
