"""GAN inversion: recover latent codes that reproduce a target by Adam descent
through the frozen generator, plus the editing workflows built on it: mask
inversion into z_s, joint (z_s, z_t) image inversion, semantic local edits
with a frozen texture code, texture-swap style transfer, and morph grids.

The texture code never enters the semantic objective; its gradient is absent
from the tape, so a semantic-only objective leaves z_t bit-identical even
when z_t is nominally being optimized.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import diffmath as dm
from .generator import Generator
from .metrics import miou, psnr
from .renderer import (CameraPose, RenderOutput, SamplingConfig, render,
                       semantic_argmax)
from .training import Adam, read_tensor_table, write_tensor_table

Tensor = torch.Tensor


class InversionError(RuntimeError):
    """Raised when an inversion run aborts; carries the partial trace."""

    def __init__(self, message: str, trace: "InversionTrace | None" = None):
        super().__init__(message)
        self.trace = trace


@dataclass
class InversionTask:
    """One inversion target. `mask` is an (H, H) int64 label map; `image` an
    (H, H, 3) float rgb in [0, 1]. Weights left None pick per-op defaults."""
    pose: CameraPose = field(default_factory=CameraPose)
    mask: Tensor | None = None
    image: Tensor | None = None
    steps: int = 200
    lr: float = 1e-2
    w_sem: float | None = None
    w_rgb: float | None = None
    init_z_s: Tensor | None = None
    init_z_t: Tensor | None = None
    seed: int = 0
    sampling: SamplingConfig | None = None

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("InversionTask: steps must be >= 0")
        if self.lr <= 0:
            raise ValueError("InversionTask: lr must be > 0")
        for name in ("w_sem", "w_rgb"):
            w = getattr(self, name)
            if w is not None and w < 0:
                raise ValueError(f"InversionTask: {name} must be >= 0")
        if self.mask is not None:
            self.mask = torch.as_tensor(self.mask, dtype=torch.int64)
            if self.mask.dim() != 2:
                raise dm.ShapeError(f"InversionTask: mask must be 2-D, got {tuple(self.mask.shape)}")
        if self.image is not None:
            self.image = torch.as_tensor(self.image, dtype=torch.float32)
            if self.image.dim() != 3 or self.image.shape[-1] != 3:
                raise dm.ShapeError(
                    f"InversionTask: image must be (H, W, 3), got {tuple(self.image.shape)}")
            if self.mask is not None and self.image.shape[:2] != self.mask.shape:
                raise dm.ShapeError("InversionTask: image and mask shapes disagree")


@dataclass
class InversionTrace:
    """Per-iteration records; record `iter` = i holds loss/metrics of the
    latents after i updates, written before update i+1, so a run of `steps`
    updates yields at most `steps` records and iteration 0 shows the init."""
    records: list[dict]
    z_s: Tensor
    z_t: Tensor | None = None

    def __post_init__(self):
        iters = [r["iter"] for r in self.records]
        if any(b <= a for a, b in zip(iters, iters[1:])):
            raise ValueError("InversionTrace: iteration indices must increase")

    def to_ndjson(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records)

    def save(self, path) -> None:
        Path(path).write_text(self.to_ndjson())


def save_latents(path, z_s: Tensor, z_t: Tensor | None = None) -> None:
    table = {"latent/z_s": z_s.detach().float()}
    if z_t is not None:
        table["latent/z_t"] = z_t.detach().float()
    write_tensor_table(table, path)


def load_latents(path) -> tuple[Tensor, Tensor | None]:
    table = read_tensor_table(path)
    if "latent/z_s" not in table:
        raise KeyError(f"{path}: no latent/z_s entry")
    return table["latent/z_s"], table.get("latent/z_t")


def _check_mask(mask: Tensor, k: int) -> Tensor:
    mask = torch.as_tensor(mask, dtype=torch.int64)
    if mask.numel() == 0:
        raise ValueError("inversion: empty target mask")
    if int(mask.min()) < 0 or int(mask.max()) >= k:
        raise ValueError(f"inversion: mask labels must lie in [0, {k})")
    return mask


def _cross_entropy(sem_probs: Tensor, mask: Tensor) -> Tensor:
    """Mean per-pixel -log p(target class); probs floored for log stability."""
    k = sem_probs.shape[-1]
    flat = dm.reshape(sem_probs, (-1, k))
    picked = flat[torch.arange(flat.shape[0]), mask.reshape(-1)]
    return -dm.mean(dm.logarithm(picked.clamp_min(1e-12)))


def _init_latents(gen: Generator, task: InversionTask) -> tuple[Tensor, Tensor]:
    rng = torch.Generator().manual_seed(task.seed)
    z_s, z_t = gen.sample_latents(1, rng)
    z_s, z_t = z_s[0], z_t[0]
    if task.init_z_s is not None:
        z_s = torch.as_tensor(task.init_z_s, dtype=torch.float32).reshape(-1).clone()
    if task.init_z_t is not None:
        z_t = torch.as_tensor(task.init_z_t, dtype=torch.float32).reshape(-1).clone()
    return z_s, z_t


def _descend(gen: Generator, z_s: Tensor, z_t: Tensor, task: InversionTask,
             loss_of, optimize_z_t: bool,
             progress=None) -> InversionTrace:
    """Shared loop: Adam on the watched latents, one pre-update record per
    step, abort-with-trace on a non-finite loss."""
    sampling = task.sampling or SamplingConfig()
    resolution = task.mask.shape[0] if task.mask is not None else task.image.shape[0]
    opt = Adam({"z_s": z_s} | ({"z_t": z_t} if optimize_z_t else {}),
               task.lr, beta1=0.9, beta2=0.999)
    records: list[dict] = []
    for step in range(task.steps):
        tape = dm.Tape()
        tape.watch(z_s)
        if optimize_z_t:
            tape.watch(z_t)
        out = render(gen, z_s, z_t, task.pose, sampling, resolution)
        loss, extra = loss_of(out)
        val = float(loss.detach())
        rec = {"iter": step, "loss": val}
        if task.mask is not None:
            rec["miou"] = miou(semantic_argmax(out.sem_probs[0].detach()),
                               np.asarray(task.mask), gen.config.k_classes)
        if task.image is not None:
            rec["psnr"] = psnr(out.rgb[0].detach().clamp(0, 1), task.image)
        rec.update(extra)
        records.append(rec)
        if progress is not None:
            progress(step, task.steps)
        if not math.isfinite(val):
            trace = InversionTrace(records, z_s.detach().clone(),
                                   z_t.detach().clone())
            raise InversionError(f"inversion: non-finite loss at iteration {step}", trace)
        opt.step(tape.backward(loss))
    return InversionTrace(records, z_s.detach().clone(), z_t.detach().clone())


def invert_semantic(gen: Generator, task: InversionTask,
                    progress=None) -> tuple[Tensor, InversionTrace]:
    """Fit z_s to a target label map by cross-entropy on the rendered
    semantics; z_t stays fixed at a seed-determined random draw."""
    if task.mask is None:
        raise ValueError("invert_semantic: task needs a semantic mask target")
    mask = _check_mask(task.mask, gen.config.k_classes)
    w_sem = 1.0 if task.w_sem is None else task.w_sem
    if w_sem <= 0:
        raise ValueError("invert_semantic: w_sem must be > 0")
    z_s, z_t = _init_latents(gen, task)

    def loss_of(out: RenderOutput):
        return dm.mul(dm.tensor(w_sem), _cross_entropy(out.sem_probs, mask)), {}

    trace = _descend(gen, z_s, z_t, task, loss_of, optimize_z_t=False,
                     progress=progress)
    return trace.z_s, trace


def invert_full(gen: Generator, task: InversionTask,
                progress=None) -> tuple[Tensor, Tensor, InversionTrace]:
    """Jointly fit (z_s, z_t) to an (image, mask) pair:
    w_rgb * MSE(rgb) + w_sem * cross-entropy(sem)."""
    if task.image is None or task.mask is None:
        raise ValueError("invert_full: task needs both image and mask targets")
    mask = _check_mask(task.mask, gen.config.k_classes)
    image = task.image
    w_rgb = 1.0 if task.w_rgb is None else task.w_rgb
    w_sem = 0.5 if task.w_sem is None else task.w_sem
    if w_rgb <= 0 and w_sem <= 0:
        raise ValueError("invert_full: at least one objective weight must be > 0")
    z_s, z_t = _init_latents(gen, task)

    def loss_of(out: RenderOutput):
        loss = dm.mul(dm.tensor(w_sem), _cross_entropy(out.sem_probs, mask))
        if w_rgb > 0:
            loss = dm.add(loss, dm.mul(dm.tensor(w_rgb),
                                       dm.mean(dm.square(out.rgb[0] - image))))
        return loss, {}

    trace = _descend(gen, z_s, z_t, task, loss_of, optimize_z_t=True,
                     progress=progress)
    return trace.z_s, trace.z_t, trace


def local_edit(gen: Generator, z_s: Tensor, z_t: Tensor, edited_mask: Tensor,
               pose: CameraPose, steps: int = 200, lr: float = 1e-2,
               mu: float = 0.1, sampling: SamplingConfig | None = None,
               progress=None) -> tuple[Tensor, InversionTrace]:
    """Re-optimize z_s against an edited label map with z_t frozen, warm-
    started at the inverted z_s plus a proximity pull mu * ||z_s' - z_s||^2
    that keeps unedited regions in place."""
    if mu < 0:
        raise ValueError("local_edit: mu must be >= 0")
    mask = _check_mask(edited_mask, gen.config.k_classes)
    anchor = torch.as_tensor(z_s, dtype=torch.float32).reshape(-1).detach().clone()
    task = InversionTask(pose=pose, mask=mask, steps=steps, lr=lr,
                         init_z_s=anchor, init_z_t=z_t, sampling=sampling)
    z_s_new, z_t_new = _init_latents(gen, task)

    def loss_of(out: RenderOutput):
        ce = _cross_entropy(out.sem_probs, mask)
        prox = dm.sum(dm.square(z_s_new - anchor))
        return dm.add(ce, dm.mul(dm.tensor(mu), prox)), {"proximity": float(prox.detach())}

    trace = _descend(gen, z_s_new, z_t_new, task, loss_of, optimize_z_t=False,
                     progress=progress)
    return trace.z_s, trace


def style_transfer(gen: Generator, z_s_source: Tensor, z_t_target: Tensor,
                   poses: list[CameraPose], sampling: SamplingConfig | None = None,
                   resolution: int = 32) -> RenderOutput:
    """Render the source shape under the target texture at each pose. The
    semantic maps match the source's by generator branch isolation."""
    if not poses:
        raise ValueError("style_transfer: need at least one pose")
    z_s = torch.as_tensor(z_s_source, dtype=torch.float32).reshape(-1)
    z_t = torch.as_tensor(z_t_target, dtype=torch.float32).reshape(-1)
    with torch.no_grad():
        return render(gen, z_s, z_t, poses, sampling or SamplingConfig(), resolution)


@dataclass
class MorphGrid:
    """Cell (i, j): shape lerped by i/(n-1), texture lerped by j/(n-1)."""
    rgb: Tensor        # (n, n, H, W, 3)
    sem_probs: Tensor  # (n, n, H, W, k)
    depth: Tensor      # (n, n, H, W)


def morph_grid(gen: Generator, codes_a: tuple[Tensor, Tensor],
               codes_b: tuple[Tensor, Tensor], n: int, pose: CameraPose,
               sampling: SamplingConfig | None = None,
               resolution: int = 32) -> MorphGrid:
    if n < 2:
        raise ValueError("morph_grid: n must be >= 2")
    sampling = sampling or SamplingConfig()
    zs1, zt1 = (torch.as_tensor(c, dtype=torch.float32).reshape(-1) for c in codes_a)
    zs2, zt2 = (torch.as_tensor(c, dtype=torch.float32).reshape(-1) for c in codes_b)
    rgb, sem, depth = [], [], []
    with torch.no_grad():
        for i in range(n):
            zs = torch.lerp(zs1, zs2, i / (n - 1))
            for j in range(n):
                zt = torch.lerp(zt1, zt2, j / (n - 1))
                out = render(gen, zs, zt, pose, sampling, resolution)
                rgb.append(out.rgb[0])
                sem.append(out.sem_probs[0])
                depth.append(out.depth[0])
    shape = (n, n)
    return MorphGrid(rgb=torch.stack(rgb).reshape(shape + rgb[0].shape),
                     sem_probs=torch.stack(sem).reshape(shape + sem[0].shape),
                     depth=torch.stack(depth).reshape(shape + depth[0].shape))
