"""Adversarial training: non-saturating dual-discriminator objectives with R1
penalties, a pose-corrected image discriminator, a hand-rolled Adam, binary
checkpoints, and a supervised reconstruction sanity mode.

Update order per step: D_c, D_s, G, each on freshly sampled (z_s, z_t, xi).
R1 runs on real samples every step. The semantic-discriminator term of the
generator objective sees a color-detached rgb composite, so its gradients
reach geometry only; the optimizer skips parameters a loss never touched,
which keeps that stop-gradient bit-exact.
"""

from __future__ import annotations

import json
import math
import os
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import diffmath as dm
from .adversary import (ColorDiscriminator, SemanticDiscriminator, d_color,
                        d_semantic, encode_real_mask)
from .config import dataclass_from_dict, dataclass_to_dict
from .generator import Generator, GeneratorConfig
from .metrics import miou, psnr
from .renderer import (CameraPose, PoseDistribution, SamplingConfig,
                       pose_to_rays, render, render_rays, sample_pose,
                       semantic_argmax)
from .scenegen import Dataset

Tensor = torch.Tensor


class TrainingError(RuntimeError):
    """Non-finite loss or diverging optimization; message carries the parts."""


class CheckpointError(RuntimeError):
    """Unreadable, corrupt, or wrong-version checkpoint file."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class LossWeights:
    lambda_c: float = 10.0  # R1 on D_c reals
    lambda_s: float = 10.0  # R1 on D_s real pairs
    lambda_p: float = 10.0  # pose correction

    def __post_init__(self):
        if min(self.lambda_c, self.lambda_s, self.lambda_p) < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class StageSpec:
    iteration: int
    resolution: int
    batch: int


@dataclass
class TrainConfig:
    resolution: int = 32
    batch: int = 8
    iterations: int = 2000
    seed: int = 0
    lr_g: float = 6e-5
    lr_dc: float = 2e-4
    lr_ds: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.9
    pose_squared: bool = True  # squared L2 pose distance; False for plain L2
    checkpoint_every: int = 500
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    poses: PoseDistribution = field(default_factory=PoseDistribution)
    weights: LossWeights = field(default_factory=LossWeights)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    schedule: list[StageSpec] | None = None  # optional (iteration, res, batch)

    def __post_init__(self):
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.schedule is not None:
            self.schedule = [
                s if isinstance(s, StageSpec)
                else StageSpec(**s) if isinstance(s, dict) else StageSpec(*s)
                for s in self.schedule]


# ---------------------------------------------------------------------------
# Adam over a named-parameter table
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias correction. Parameters whose grad is absent are skipped
    outright: branches a loss never reached must stay bit-identical."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.0, beta2: float = 0.9, eps: float = 1e-8):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in self.params.items()}

    @torch.no_grad()
    def step(self, grads: dict[Tensor, Tensor]) -> None:
        """grads is keyed by parameter identity (the Tape.backward map)."""
        self.step_count += 1
        t = self.step_count
        for n, p in self.params.items():
            g = grads.get(p)
            if g is None:
                continue
            m = self.m[n].mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v = self.v[n].mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p.add_(m_hat / (v_hat.sqrt() + self.eps), alpha=-self.lr)

    def state_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {"step": torch.tensor(self.step_count, dtype=torch.int64)}
        for n in self.params:
            out[f"m/{n}"] = self.m[n]
            out[f"v/{n}"] = self.v[n]
        return out

    def load_state_tensors(self, table: dict[str, Tensor]) -> None:
        self.step_count = int(table["step"])
        for n in self.params:
            self.m[n] = table[f"m/{n}"].clone()
            self.v[n] = table[f"v/{n}"].clone()


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def gan_f(t: Tensor | float) -> Tensor:
    """f(t) = -log(1 + exp(-t)) = -softplus(-t), numerically stable."""
    t = torch.as_tensor(t, dtype=torch.float32) if not isinstance(t, Tensor) else t
    return -dm.softplus(-t)


def _f(t: Tensor) -> float:
    return float(t.detach())


def _require_finite(name: str, total: Tensor, parts: dict[str, float]) -> None:
    bad = not bool(torch.isfinite(total.detach())) or any(
        not math.isfinite(v) for v in parts.values())
    if bad:
        raise TrainingError(f"{name}: non-finite loss; components: {parts}")


def _r1_penalty(grads: list[Tensor]) -> Tensor:
    """Batch-mean squared norm of per-sample input gradients."""
    total = None
    for g in grads:
        sq = dm.sum(dm.square(g), axis=tuple(range(1, g.dim())))
        total = sq if total is None else total + sq
    return dm.mean(total)


def pose_distance(pred: Tensor, xi: Tensor, squared: bool = True) -> Tensor:
    """Batch-mean L2 distance between predicted and rendering poses."""
    if pred.shape != xi.shape:
        raise dm.ShapeError(f"pose_distance: {tuple(pred.shape)} vs {tuple(xi.shape)}")
    sq = dm.sum(dm.square(pred - xi), axis=-1)
    if not squared:
        sq = torch.sqrt(sq + 1e-12)
    return dm.mean(sq)


def loss_dc(dc: ColorDiscriminator, real: Tensor, fake: Tensor,
            weights: LossWeights | None = None) -> tuple[Tensor, dict[str, float]]:
    """softplus(D(fake)) + softplus(-D(real)) + lambda_c * R1(real)."""
    weights = weights or LossWeights()
    if real.shape[0] != fake.shape[0]:
        raise dm.ShapeError(f"loss_dc: batch sizes differ: {real.shape[0]} vs {fake.shape[0]}")
    fake = fake.detach()
    score_f, _ = d_color(dc, fake)
    x = real.detach().clone()
    tape = dm.Tape(grad_graph=True)
    tape.watch(x)
    score_r, _ = d_color(dc, x)
    adv = dm.mean(dm.softplus(score_f)) + dm.mean(dm.softplus(-score_r))
    if weights.lambda_c > 0:
        g = tape.input_gradient(dm.sum(score_r), x)
        r1 = _r1_penalty([g])
    else:
        r1 = torch.zeros(())
    total = adv + weights.lambda_c * r1
    parts = {"adv": _f(adv), "r1": _f(r1), "total": _f(total)}
    _require_finite("loss_dc", total, parts)
    return total, parts


def loss_ds(ds: SemanticDiscriminator, real_pair: tuple[Tensor, Tensor],
            fake_pair: tuple[Tensor, Tensor],
            weights: LossWeights | None = None) -> tuple[Tensor, dict[str, float]]:
    """Same functional form as loss_dc on (mask, image) pairs; R1 is taken
    w.r.t. both halves of the real pair (the concatenated input)."""
    weights = weights or LossWeights()
    sem_r, img_r = real_pair
    sem_f, img_f = fake_pair
    if sem_r.shape[0] != sem_f.shape[0] or img_r.shape[0] != img_f.shape[0]:
        raise dm.ShapeError("loss_ds: real and fake batch sizes differ")
    score_f = d_semantic(ds, sem_f.detach(), img_f.detach())
    sem_x = sem_r.detach().clone()
    img_x = img_r.detach().clone()
    tape = dm.Tape(grad_graph=True)
    tape.watch(sem_x, img_x)
    score_r = d_semantic(ds, sem_x, img_x)
    adv = dm.mean(dm.softplus(score_f)) + dm.mean(dm.softplus(-score_r))
    if weights.lambda_s > 0:
        s = dm.sum(score_r)
        r1 = _r1_penalty([tape.input_gradient(s, sem_x), tape.input_gradient(s, img_x)])
    else:
        r1 = torch.zeros(())
    total = adv + weights.lambda_s * r1
    parts = {"adv": _f(adv), "r1": _f(r1), "total": _f(total)}
    _require_finite("loss_ds", total, parts)
    return total, parts


def g_semantic_term(ds: SemanticDiscriminator, sem_probs: Tensor,
                    rgb_color_detached: Tensor) -> Tensor:
    """Generator's D_s term. The image argument must be the color-detached
    composite, so this term reaches geometry parameters only."""
    return dm.mean(dm.softplus(-d_semantic(ds, sem_probs, rgb_color_detached)))


def loss_g(dc: ColorDiscriminator, ds: SemanticDiscriminator, rendered,
           xi: Tensor, weights: LossWeights | None = None,
           pose_squared: bool = True) -> tuple[Tensor, dict[str, float]]:
    """softplus(-D_c(fake)) + softplus(-D_s(sem, fake*)) + lambda_p * pose.

    `rendered` is a RenderOutput produced with aux=True; fake* is the
    color-detached rgb composite (stop-gradient into the color branch).
    """
    weights = weights or LossWeights()
    if "rgb_color_detached" not in rendered.aux:
        raise ValueError("loss_g: render the batch with aux=True")
    score_f, pose_pred = d_color(dc, rendered.rgb)
    term_c = dm.mean(dm.softplus(-score_f))
    term_s = g_semantic_term(ds, rendered.sem_probs, rendered.aux["rgb_color_detached"])
    pose = pose_distance(pose_pred, xi, squared=pose_squared)
    total = term_c + term_s + weights.lambda_p * pose
    parts = {"adv_c": _f(term_c), "adv_s": _f(term_s),
             "pose": _f(pose), "total": _f(total)}
    _require_finite("loss_g", total, parts)
    return total, parts


# ---------------------------------------------------------------------------
# Trainer state and steps
# ---------------------------------------------------------------------------

@dataclass
class TrainerState:
    config: TrainConfig
    gen: Generator
    dc: ColorDiscriminator
    ds: SemanticDiscriminator
    opt_g: Adam
    opt_dc: Adam
    opt_ds: Adam
    rng: torch.Generator
    iteration: int = 0
    resolution: int = 32
    batch: int = 8


def _named_params(module: torch.nn.Module) -> dict[str, Tensor]:
    return dict(module.named_parameters())


def _build_discriminators(config: TrainConfig, resolution: int
                          ) -> tuple[ColorDiscriminator, SemanticDiscriminator, Adam, Adam]:
    dc = ColorDiscriminator(resolution=resolution, seed=config.seed + 1)
    ds = SemanticDiscriminator(k=config.generator.k_classes, resolution=resolution,
                               seed=config.seed + 2)
    opt_dc = Adam(_named_params(dc), config.lr_dc, config.beta1, config.beta2)
    opt_ds = Adam(_named_params(ds), config.lr_ds, config.beta1, config.beta2)
    return dc, ds, opt_dc, opt_ds


def make_state(config: TrainConfig) -> TrainerState:
    gen = Generator(config.generator, seed=config.seed)
    dc, ds, opt_dc, opt_ds = _build_discriminators(config, config.resolution)
    opt_g = Adam(_named_params(gen), config.lr_g, config.beta1, config.beta2)
    rng = torch.Generator().manual_seed(config.seed + 3)
    return TrainerState(config=config, gen=gen, dc=dc, ds=ds, opt_g=opt_g,
                        opt_dc=opt_dc, opt_ds=opt_ds, rng=rng,
                        resolution=config.resolution, batch=config.batch)


def maybe_advance_stage(state: TrainerState) -> bool:
    """Apply the resolution schedule: on reaching a stage boundary the
    discriminators restart at the new resolution (fresh init, fresh moments);
    the generator continues."""
    sched = state.config.schedule
    if not sched:
        return False
    current = None
    for stage in sorted(sched, key=lambda s: s.iteration):
        if state.iteration >= stage.iteration:
            current = stage
    if current is None or current.resolution == state.resolution:
        if current is not None:
            state.batch = current.batch
        return False
    state.resolution, state.batch = current.resolution, current.batch
    state.dc, state.ds, state.opt_dc, state.opt_ds = _build_discriminators(
        state.config, current.resolution)
    return True


def sample_real_batch(dataset: Dataset, batch: int, resolution: int,
                      rng: torch.Generator) -> tuple[Tensor, Tensor]:
    """Random (images, masks) minibatch, average-pooling images (and taking
    strided nearest labels) when the dataset is finer than the stage."""
    idx = torch.randint(len(dataset), (batch,), generator=rng)
    images = dataset.images[idx]
    masks = dataset.masks[idx]
    if dataset.resolution != resolution:
        if dataset.resolution % resolution:
            raise ValueError(
                f"dataset resolution {dataset.resolution} not divisible by {resolution}")
        f = dataset.resolution // resolution
        images = dm.avg_pool2d(images.permute(0, 3, 1, 2), f).permute(0, 2, 3, 1)
        masks = masks[:, f // 2::f, f // 2::f]
    return images, masks


def _sample_noise(state: TrainerState, batch: int
                  ) -> tuple[Tensor, Tensor, list[CameraPose], Tensor]:
    z_s, z_t = state.gen.sample_latents(batch, state.rng)
    poses = [sample_pose(state.config.poses, state.rng) for _ in range(batch)]
    xi = torch.tensor([[p.pitch, p.yaw] for p in poses], dtype=torch.float32)
    return z_s, z_t, poses, xi


def _render_fake(state: TrainerState, z_s, z_t, poses, *, grad: bool, aux: bool = False):
    if grad:
        return render(state.gen, z_s, z_t, poses, state.config.sampling,
                      state.resolution, g=state.rng, aux=aux)
    with torch.no_grad():
        return render(state.gen, z_s, z_t, poses, state.config.sampling,
                      state.resolution, g=state.rng, aux=aux)


def train_step(state: TrainerState, real_images: Tensor, real_masks: Tensor
               ) -> dict[str, float]:
    """One D_c step, one D_s step, one G step, each on fresh (z_s, z_t, xi).

    The D_c objective adds the pose-correction term on detached fakes: the
    pose head only learns poses here, since the generator-side pose term
    differentiates through frozen discriminator weights.
    """
    cfg = state.config
    w = cfg.weights
    t0 = time.perf_counter()

    # D_c phase
    z_s, z_t, poses, xi = _sample_noise(state, state.batch)
    fake = _render_fake(state, z_s, z_t, poses, grad=False)
    tape = dm.Tape()
    tape.watch(state.dc.parameters())
    l_dc, parts_dc = loss_dc(state.dc, real_images, fake.rgb, w)
    _, pose_pred = d_color(state.dc, fake.rgb)
    pose_fit = pose_distance(pose_pred, xi, squared=cfg.pose_squared)
    if not bool(torch.isfinite(pose_fit.detach())):
        raise TrainingError(f"train_step: non-finite pose fit; components: {parts_dc}")
    state.opt_dc.step(tape.backward(l_dc + w.lambda_p * pose_fit))

    # D_s phase
    z_s, z_t, poses, xi2 = _sample_noise(state, state.batch)
    fake = _render_fake(state, z_s, z_t, poses, grad=False)
    real_pair = (encode_real_mask(real_masks, state.ds.k), real_images)
    tape = dm.Tape()
    tape.watch(state.ds.parameters())
    l_ds, parts_ds = loss_ds(state.ds, real_pair, (fake.sem_probs, fake.rgb), w)
    state.opt_ds.step(tape.backward(l_ds))

    # G phase
    z_s, z_t, poses, xi3 = _sample_noise(state, state.batch)
    tape = dm.Tape()
    tape.watch(state.gen.parameters())
    out = _render_fake(state, z_s, z_t, poses, grad=True, aux=True)
    l_g, parts_g = loss_g(state.dc, state.ds, out, xi3, w, cfg.pose_squared)
    state.opt_g.step(tape.backward(l_g))

    state.iteration += 1
    return {
        "iter": state.iteration,
        "L_Dc": parts_dc["total"],
        "L_Ds": parts_ds["total"],
        "L_G": parts_g["total"],
        "pose_loss": _f(pose_fit),
        "wall_ms": (time.perf_counter() - t0) * 1e3,
    }


def train(config: TrainConfig, dataset: Dataset, out_dir: str | Path,
          resume_from: str | Path | None = None,
          log_every: int = 1, progress=None) -> TrainerState:
    """Run the training loop, appending ndjson log records to train_log.jsonl
    and checkpointing every config.checkpoint_every iterations."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = load_checkpoint(resume_from) if resume_from else make_state(config)
    log_path = out_dir / "train_log.jsonl"
    ckpt_path = out_dir / "model.fnrf"
    with open(log_path, "a") as log:
        while state.iteration < config.iterations:
            maybe_advance_stage(state)
            images, masks = sample_real_batch(dataset, state.batch,
                                              state.resolution, state.rng)
            rec = train_step(state, images, masks)
            if rec["iter"] % log_every == 0:
                log.write(json.dumps(rec) + "\n")
                log.flush()
            if progress is not None:
                progress(rec)
            if config.checkpoint_every and rec["iter"] % config.checkpoint_every == 0:
                save_checkpoint(state, ckpt_path)
    save_checkpoint(state, ckpt_path)
    return state


# ---------------------------------------------------------------------------
# Supervised reconstruction sanity
# ---------------------------------------------------------------------------

@dataclass
class ReconResult:
    psnr: float
    miou: float
    trace: list[dict]


def reconstruct_sanity(gen: Generator, targets: list[tuple[CameraPose, Tensor, Tensor]],
                       steps: int, lr: float = 2e-3,
                       sampling: SamplingConfig | None = None,
                       rays_per_step: int = 1024, seed: int = 0,
                       eval_every: int = 250) -> ReconResult:
    """Fit one fixed (z_s, z_t) to ground-truth (pose, rgb, mask) renders by
    MSE on rgb and on one-hot semantics, Adam over generator parameters.
    Ray minibatches keep a step cheap; metrics use full renders. Raises on
    a 10x loss increase from the start."""
    if not targets:
        raise ValueError("reconstruct_sanity: need at least one target view")
    sampling = sampling or SamplingConfig()
    rng = torch.Generator().manual_seed(seed)
    z_s, z_t = gen.sample_latents(1, rng)
    z_s, z_t = z_s[0], z_t[0]  # 1-D latents broadcast across target poses
    k = gen.config.k_classes

    all_o, all_d, all_rgb, all_sem = [], [], [], []
    res = targets[0][1].shape[0]
    for pose, image, mask in targets:
        rays = pose_to_rays(pose, res)
        all_o.append(rays.origins)
        all_d.append(rays.dirs)
        all_rgb.append(torch.as_tensor(image, dtype=torch.float32).reshape(-1, 3))
        all_sem.append(encode_real_mask(torch.as_tensor(mask), k).reshape(-1, k))
    origins = torch.cat(all_o)
    dirs = torch.cat(all_d)
    gt_rgb = torch.cat(all_rgb)
    gt_sem = torch.cat(all_sem)

    opt = Adam(_named_params(gen), lr, beta1=0.9, beta2=0.999)
    trace: list[dict] = []
    first_loss = None

    def full_metrics():
        with torch.no_grad():
            out = render(gen, z_s, z_t, [t[0] for t in targets], sampling, res)
        ps = [psnr(out.rgb[i].clamp(0, 1), targets[i][1]) for i in range(len(targets))]
        ious = [miou(semantic_argmax(out.sem_probs[i]), np.asarray(targets[i][2]), k)
                for i in range(len(targets))]
        return float(np.mean(ps)), float(np.mean(ious))

    for step in range(steps):
        idx = torch.randint(origins.shape[0], (min(rays_per_step, origins.shape[0]),),
                            generator=rng)
        tape = dm.Tape()
        tape.watch(gen.parameters())
        out = render_rays(gen, z_s, z_t, origins[idx].unsqueeze(0), dirs[idx].unsqueeze(0),
                          sampling, g=rng)
        loss = dm.mean(dm.square(out.rgb[0] - gt_rgb[idx])) \
            + dm.mean(dm.square(out.sem_probs[0] - gt_sem[idx]))
        val = _f(loss)
        if not math.isfinite(val):
            raise TrainingError(f"reconstruct_sanity: non-finite loss at step {step}")
        if first_loss is None:
            first_loss = val
        elif val > 10.0 * first_loss:
            raise TrainingError(
                f"reconstruct_sanity: diverged at step {step}: {val:.4f} vs {first_loss:.4f}")
        opt.step(tape.backward(loss))
        if eval_every and (step + 1) % eval_every == 0:
            p, m = full_metrics()
            trace.append({"iter": step + 1, "loss": val, "psnr": p, "miou": m})

    p, m = full_metrics()
    trace.append({"iter": steps, "loss": first_loss if steps == 0 else val, "psnr": p, "miou": m})
    return ReconResult(psnr=p, miou=m, trace=trace)


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------
# Little-endian layout:
#   magic "FNRF" | version u32 | crc32 u32 (over the table) | count u32
#   then per entry, sorted by name:
#   name_len u16 | name utf-8 | dtype u8 | rank u8 | dims u32 * rank | payload

CHECKPOINT_MAGIC = b"FNRF"
CHECKPOINT_VERSION = 1

_DTYPE_CODES = {torch.float32: 0, torch.float64: 1, torch.int64: 2, torch.uint8: 3}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
_NP_DTYPES = {0: np.float32, 1: np.float64, 2: np.int64, 3: np.uint8}


def _pack_entry(name: str, t: Tensor) -> bytes:
    t = t.detach().contiguous()
    if t.dtype not in _DTYPE_CODES:
        raise CheckpointError(f"checkpoint: unsupported dtype {t.dtype} for {name!r}")
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw
    head += struct.pack("<BB", _DTYPE_CODES[t.dtype], t.dim())
    head += struct.pack(f"<{t.dim()}I", *t.shape)
    arr = t.numpy()
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return head + arr.tobytes()


def _unpack_entries(blob: bytes, count: int) -> dict[str, Tensor]:
    table: dict[str, Tensor] = {}
    off = 0
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + name_len].decode("utf-8")
            off += name_len
            code, rank = struct.unpack_from("<BB", blob, off)
            off += 2
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            if code not in _CODE_DTYPES:
                raise CheckpointError(f"checkpoint: unknown dtype code {code} for {name!r}")
            np_dtype = np.dtype(_NP_DTYPES[code]).newbyteorder("<")
            n_bytes = int(np.prod(dims, dtype=np.int64)) * np_dtype.itemsize
            if off + n_bytes > len(blob):
                raise CheckpointError(f"checkpoint: truncated payload for {name!r}")
            arr = np.frombuffer(blob, dtype=np_dtype, count=int(np.prod(dims, dtype=np.int64)),
                                offset=off).reshape(dims)
            off += n_bytes
            table[name] = torch.from_numpy(arr.astype(_NP_DTYPES[code], copy=True))
    except struct.error as e:
        raise CheckpointError(f"checkpoint: truncated entry table: {e}") from None
    if off != len(blob):
        raise CheckpointError("checkpoint: trailing bytes after entry table")
    return table


def write_tensor_table(table: dict[str, Tensor], path: str | Path) -> None:
    """Serialize named tensors in the checkpoint container (atomic rename)."""
    body = b"".join(_pack_entry(n, table[n]) for n in sorted(table))
    head = CHECKPOINT_MAGIC + struct.pack("<III", CHECKPOINT_VERSION,
                                          zlib.crc32(body), len(table))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(head + body)
        os.replace(tmp, path)
    except OSError as e:
        raise CheckpointError(f"checkpoint: cannot write {path}: {e}") from None


def read_tensor_table(path: str | Path) -> dict[str, Tensor]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"checkpoint: cannot read {path}: {e}") from None
    if len(blob) < 16 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"checkpoint: bad magic in {path}")
    version, crc, count = struct.unpack_from("<III", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint: unsupported version {version}")
    body = blob[16:]
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"checkpoint: CRC mismatch in {path}")
    return _unpack_entries(body, count)


def _state_table(state: TrainerState) -> dict[str, Tensor]:
    cfg_json = json.dumps(dataclass_to_dict(state.config), sort_keys=True)
    table: dict[str, Tensor] = {
        "config": torch.frombuffer(bytearray(cfg_json.encode("utf-8")), dtype=torch.uint8).clone(),
        "iteration": torch.tensor(state.iteration, dtype=torch.int64),
        "stage/resolution": torch.tensor(state.resolution, dtype=torch.int64),
        "stage/batch": torch.tensor(state.batch, dtype=torch.int64),
        "rng/torch": state.rng.get_state().clone(),
    }
    for prefix, module in (("gen", state.gen), ("dc", state.dc), ("ds", state.ds)):
        for name, t in module.state_dict().items():
            table[f"model/{prefix}/{name}"] = t
    for prefix, opt in (("g", state.opt_g), ("dc", state.opt_dc), ("ds", state.opt_ds)):
        for name, t in opt.state_tensors().items():
            table[f"opt/{prefix}/{name}"] = t
    return table


def save_checkpoint(state: TrainerState, path: str | Path) -> None:
    write_tensor_table(_state_table(state), path)


def _sub_table(table: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    return {n[len(prefix):]: t for n, t in table.items() if n.startswith(prefix)}


def load_checkpoint(path: str | Path) -> TrainerState:
    table = read_tensor_table(path)
    try:
        cfg_dict = json.loads(bytes(table["config"].numpy()).decode("utf-8"))
        config = dataclass_from_dict(TrainConfig, cfg_dict)
        state = make_state(config)
        state.iteration = int(table["iteration"])
        state.resolution = int(table["stage/resolution"])
        state.batch = int(table["stage/batch"])
        if state.resolution != config.resolution:
            state.dc, state.ds, state.opt_dc, state.opt_ds = _build_discriminators(
                config, state.resolution)
        state.rng.set_state(table["rng/torch"])
        for prefix, module in (("gen", state.gen), ("dc", state.dc), ("ds", state.ds)):
            module.load_state_dict(_sub_table(table, f"model/{prefix}/"))
        for prefix, opt in (("g", state.opt_g), ("dc", state.opt_dc), ("ds", state.opt_ds)):
            opt.load_state_tensors(_sub_table(table, f"opt/{prefix}/"))
    except (KeyError, ValueError, RuntimeError, json.JSONDecodeError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"checkpoint: malformed state in {path}: {e}") from None
    return state
