"""Command line entry points. Exit codes: 0 success, 1 usage error, 2 runtime
error. Subcommands read the shared key=value config format where noted and
write their outputs under --out.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, dataclass_from_dict, parse_config
from .diffmath import ShapeError
from .generator import Generator
from .imageio import (load_label, load_rgb, save_depth16, save_label,
                      save_label_preview, save_rgb)
from .inversion import (InversionError, InversionTask, invert_full,
                        invert_semantic, load_latents, local_edit, morph_grid,
                        save_latents)
from .metrics import reprojection_consistency
from .renderer import CameraPose, render, semantic_argmax
from .scenegen import DatasetSpec, generate_dataset, load_dataset
from .service import ServiceConfig, serve
from .training import (CheckpointError, TrainConfig, TrainingError,
                       load_checkpoint, train)

USAGE_ERROR, RUNTIME_ERROR = 1, 2


def _load_config(path: str | None, cls):
    overrides = parse_config(Path(path).read_text()) if path else {}
    return dataclass_from_dict(cls, overrides)


def _load_gen(ckpt: str) -> tuple[Generator, "object"]:
    state = load_checkpoint(ckpt)
    for p in state.gen.parameters():
        p.requires_grad_(False)
    return state.gen, state


def _write_render(out_dir: Path, stem: str, out, i: int, k: int, sampling) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = semantic_argmax(out.sem_probs[i])
    save_rgb(out_dir / f"{stem}rgb.png", out.rgb[i])
    save_label(out_dir / f"{stem}mask.png", labels)
    save_label_preview(out_dir / f"{stem}mask_rgb.png", labels, k)
    save_depth16(out_dir / f"{stem}depth.png", out.depth[i], sampling.t_near, sampling.t_far)


def _cmd_dataset_gen(args) -> int:
    spec = _load_config(args.config, DatasetSpec)
    manifest = generate_dataset(spec, args.out)
    print(f"wrote {manifest['n_scenes']} pairs at {manifest['resolution']}^2 to {args.out}")
    return 0


def _cmd_train(args) -> int:
    config = _load_config(args.config, TrainConfig)
    if args.iterations is not None:
        config.iterations = args.iterations
    dataset = load_dataset(args.data)
    state = train(config, dataset, args.out, resume_from=args.resume,
                  log_every=args.log_every)
    print(f"trained to iteration {state.iteration}; checkpoint in {args.out}")
    return 0


def _resolve_latents(args, gen: Generator):
    if args.latents:
        z_s, z_t = load_latents(args.latents)
        if z_t is None:
            raise InversionError(f"{args.latents}: no texture code stored")
        return z_s, z_t
    rng = torch.Generator().manual_seed(args.seed)
    z_s, z_t = gen.sample_latents(1, rng)
    return z_s[0], z_t[0]


def _cmd_render(args) -> int:
    gen, state = _load_gen(args.ckpt)
    z_s, z_t = _resolve_latents(args, gen)
    pose = CameraPose(pitch=args.pitch, yaw=args.yaw)
    with torch.no_grad():
        out = render(gen, z_s, z_t, pose, state.config.sampling, state.resolution)
    _write_render(Path(args.out), "", out, 0, gen.config.k_classes, state.config.sampling)
    save_latents(Path(args.out) / "latents.fnrf", z_s, z_t)
    print(f"rendered pitch={pose.pitch:+.3f} yaw={pose.yaw:+.3f} to {args.out}")
    return 0


def _cmd_invert(args) -> int:
    gen, state = _load_gen(args.ckpt)
    mask = torch.from_numpy(load_label(args.target))
    image = torch.from_numpy(load_rgb(args.image)) if args.image else None
    task = InversionTask(pose=CameraPose(pitch=args.pitch, yaw=args.yaw),
                         mask=mask, image=image, steps=args.steps, lr=args.lr,
                         seed=args.seed, sampling=state.config.sampling)
    if image is None:
        z_s, trace = invert_semantic(gen, task)
        z_t = trace.z_t
    else:
        z_s, z_t, trace = invert_full(gen, task)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_latents(out / "latents.fnrf", z_s, z_t)
    trace.save(args.trace or out / "trace.jsonl")
    with torch.no_grad():
        result = render(gen, z_s, z_t, task.pose, state.config.sampling, state.resolution)
    _write_render(out, "", result, 0, gen.config.k_classes, state.config.sampling)
    last = trace.records[-1] if trace.records else {}
    print(f"inverted {args.target} in {len(trace.records)} steps"
          + (f", miou {last['miou']:.3f}" if "miou" in last else ""))
    return 0


def _cmd_edit(args) -> int:
    gen, state = _load_gen(args.ckpt)
    z_s, z_t = load_latents(args.latents)
    if z_t is None:
        raise InversionError(f"{args.latents}: no texture code stored")
    mask = torch.from_numpy(load_label(args.target))
    pose = CameraPose(pitch=args.pitch, yaw=args.yaw)
    z_s_new, trace = local_edit(gen, z_s, z_t, mask, pose, steps=args.steps,
                                lr=args.lr, mu=args.mu,
                                sampling=state.config.sampling)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_latents(out / "latents.fnrf", z_s_new, z_t)
    trace.save(args.trace or out / "trace.jsonl")
    with torch.no_grad():
        result = render(gen, z_s_new, z_t, pose, state.config.sampling, state.resolution)
    _write_render(out, "", result, 0, gen.config.k_classes, state.config.sampling)
    print(f"edited shape code: drift {float((z_s_new - z_s).norm()):.4f}")
    return 0


def _cmd_morph(args) -> int:
    gen, state = _load_gen(args.ckpt)
    zs1, zt1 = load_latents(args.latents_a)
    zs2, zt2 = load_latents(args.latents_b)
    if zt1 is None or zt2 is None:
        raise InversionError("morph needs latent files with both codes")
    pose = CameraPose(pitch=args.pitch, yaw=args.yaw)
    grid = morph_grid(gen, (zs1, zt1), (zs2, zt2), args.n, pose,
                      state.config.sampling, state.resolution)
    n, res = args.n, state.resolution
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rgb = grid.rgb.permute(0, 2, 1, 3, 4).reshape(n * res, n * res, 3)
    labels = grid.sem_probs.argmax(-1).permute(0, 2, 1, 3).reshape(n * res, n * res)
    save_rgb(out / "grid.png", rgb)
    save_label_preview(out / "grid_mask.png", labels.numpy(), gen.config.k_classes)
    print(f"wrote {n}x{n} morph grid to {out}")
    return 0


def _cmd_eval(args) -> int:
    gen, state = _load_gen(args.ckpt)
    rng = torch.Generator().manual_seed(args.seed)
    errors = []
    for _ in range(args.codes):
        z_s, z_t = gen.sample_latents(1, rng)
        err = reprojection_consistency(gen, z_s[0], z_t[0],
                                       CameraPose(), CameraPose(yaw=args.yaw_offset),
                                       state.config.sampling, state.resolution)
        errors.append(err)
    report = {
        "iteration": state.iteration,
        "resolution": state.resolution,
        "codes": args.codes,
        "yaw_offset": args.yaw_offset,
        "reprojection_error_mean": float(np.mean(errors)),
        "reprojection_error_max": float(np.max(errors)),
    }
    text = json.dumps(report, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def _cmd_serve(args) -> int:
    config = ServiceConfig(checkpoint=args.ckpt, artifacts=args.artifacts,
                           host=args.host, port=args.port,
                           max_jobs=args.max_jobs, retention=args.retention)
    serve(config)
    return 0


def _add_pose_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--pitch", type=float, default=0.0)
    p.add_argument("--yaw", type=float, default=0.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="facefield",
                                     description="semantic radiance field toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    dataset = sub.add_parser("dataset", help="dataset utilities")
    dsub = dataset.add_subparsers(dest="dataset_command", required=True)
    gen = dsub.add_parser("gen", help="generate an image+mask corpus")
    gen.add_argument("--config", help="key=value config for the dataset spec")
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=_cmd_dataset_gen)

    tr = sub.add_parser("train", help="adversarial training")
    tr.add_argument("--config", help="key=value config for training")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--resume")
    tr.add_argument("--iterations", type=int)
    tr.add_argument("--log-every", type=int, default=10)
    tr.set_defaults(func=_cmd_train)

    rd = sub.add_parser("render", help="render one view from a checkpoint")
    rd.add_argument("--ckpt", required=True)
    rd.add_argument("--out", required=True)
    rd.add_argument("--latents", help="latent table; defaults to a seeded sample")
    rd.add_argument("--seed", type=int, default=0)
    _add_pose_flags(rd)
    rd.set_defaults(func=_cmd_render)

    inv = sub.add_parser("invert", help="invert a target mask (and image)")
    inv.add_argument("--ckpt", required=True)
    inv.add_argument("--target", required=True, help="label PNG")
    inv.add_argument("--image", help="rgb PNG for joint inversion")
    inv.add_argument("--out", required=True)
    inv.add_argument("--trace", help="ndjson trace path (default <out>/trace.jsonl)")
    inv.add_argument("--steps", type=int, default=200)
    inv.add_argument("--lr", type=float, default=1e-2)
    inv.add_argument("--seed", type=int, default=0)
    _add_pose_flags(inv)
    inv.set_defaults(func=_cmd_invert)

    ed = sub.add_parser("edit", help="re-optimize the shape code for an edited mask")
    ed.add_argument("--ckpt", required=True)
    ed.add_argument("--latents", required=True)
    ed.add_argument("--target", required=True, help="edited label PNG")
    ed.add_argument("--out", required=True)
    ed.add_argument("--trace")
    ed.add_argument("--steps", type=int, default=200)
    ed.add_argument("--lr", type=float, default=1e-2)
    ed.add_argument("--mu", type=float, default=0.1)
    _add_pose_flags(ed)
    ed.set_defaults(func=_cmd_edit)

    mo = sub.add_parser("morph", help="shape x texture interpolation grid")
    mo.add_argument("--ckpt", required=True)
    mo.add_argument("--latents-a", required=True)
    mo.add_argument("--latents-b", required=True)
    mo.add_argument("--out", required=True)
    mo.add_argument("--n", type=int, default=3)
    _add_pose_flags(mo)
    mo.set_defaults(func=_cmd_morph)

    ev = sub.add_parser("eval", help="multi-view consistency report")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--out", help="JSON report path (default stdout only)")
    ev.add_argument("--codes", type=int, default=8)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--yaw-offset", type=float, default=0.2)
    ev.set_defaults(func=_cmd_eval)

    sv = sub.add_parser("serve", help="run the HTTP service")
    sv.add_argument("--ckpt", required=True)
    sv.add_argument("--artifacts", required=True)
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--port", type=int, default=8155)
    sv.add_argument("--max-jobs", type=int, default=2)
    sv.add_argument("--retention", type=int, default=64)
    sv.set_defaults(func=_cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage problems and 0 on --help
        return 0 if e.code == 0 else USAGE_ERROR
    try:
        return args.func(args)
    except (CheckpointError, ConfigError, TrainingError, InversionError,
            ShapeError, ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
