"""HTTP service: sampling, rendering, inversion, and editing exposed as
polled jobs over JSON, serving a painted-mask editing UI.

The checkpoint is loaded once and never mutated; jobs only optimize their own
latent copies. A bounded thread pool executes jobs; the job table is the one
synchronized structure. Cancellation is a flag the optimizer loop checks
every iteration. Masks cross the wire as base64 single-channel label PNGs.
"""

from __future__ import annotations

import base64
import binascii
import json
import secrets
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import FileResponse, JSONResponse

from . import imageio
from .generator import Generator
from .inversion import (InversionError, InversionTask, invert_full,
                        invert_semantic, load_latents, local_edit, morph_grid,
                        save_latents)
from .metrics import miou, psnr
from .renderer import CameraPose, render, semantic_argmax
from .training import load_checkpoint

JOB_KINDS = ("invert-semantic", "invert-full", "local-edit", "render", "morph")
_TERMINAL = ("done", "failed")
_TRANSITIONS = {"queued": ("running",), "running": ("done", "failed"), "done": (), "failed": ()}
_PREVIEW_POSES = [(0.0, 0.0), (0.0, -0.35), (0.0, 0.35)]
_MEDIA_TYPES = {".png": "image/png", ".json": "application/json",
                ".jsonl": "application/x-ndjson", ".fnrf": "application/octet-stream"}


@dataclass
class ServiceConfig:
    checkpoint: str
    artifacts: str
    host: str = "127.0.0.1"
    port: int = 8155
    max_jobs: int = 2       # workers; also the queued+running admission cap
    retention: int = 64     # finished JobRecords kept before eviction

    def __post_init__(self):
        if self.max_jobs < 1:
            raise ValueError("ServiceConfig: max_jobs must be >= 1")
        if self.retention < 1:
            raise ValueError("ServiceConfig: retention must be >= 1")


@dataclass
class JobRecord:
    id: str
    kind: str
    status: str = "queued"
    progress: tuple[int, int] = (0, 0)
    result_paths: list[str] = field(default_factory=list)
    error: str | None = None
    created: float = field(default_factory=time.time)

    def advance(self, status: str) -> None:
        if status not in _TRANSITIONS[self.status]:
            raise RuntimeError(f"job {self.id}: illegal transition {self.status} -> {status}")
        self.status = status

    def to_dict(self) -> dict:
        return {"id": self.id, "kind": self.kind, "status": self.status,
                "progress": {"iter": self.progress[0], "total": self.progress[1]},
                "result_paths": self.result_paths, "error": self.error}


class _Cancelled(Exception):
    pass


class _Job:
    def __init__(self, record: JobRecord, payload: dict):
        self.record = record
        self.payload = payload
        self.cancel = threading.Event()


def _bad(detail) -> HTTPException:
    return HTTPException(status_code=400, detail=detail)


def _field(payload: dict, name: str, kind, default=None, required=False):
    if name not in payload:
        if required:
            raise _bad(f"payload field '{name}' is required")
        return default
    value = payload[name]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise _bad(f"payload field '{name}' must be {kind.__name__}")
    return value


def _parse_pose(obj, name: str = "pose") -> CameraPose:
    if not isinstance(obj, dict):
        raise _bad(f"'{name}' must be an object with pitch and yaw")
    pitch = _field(obj, "pitch", float, required=True)
    yaw = _field(obj, "yaw", float, required=True)
    if not (np.isfinite(pitch) and np.isfinite(yaw)) or abs(pitch) >= 1.4:
        raise _bad(f"'{name}': pitch must satisfy |pitch| < 1.4 and both angles be finite")
    return CameraPose(pitch=pitch, yaw=yaw)


def _decode_b64(payload: dict, name: str) -> bytes:
    text = _field(payload, name, str, required=True)
    try:
        return base64.b64decode(text, validate=True)
    except (binascii.Error, ValueError) as e:
        raise _bad(f"payload field '{name}' is not valid base64: {e}")


class Service:
    """Owns the read-only model, the artifact tree, and the job table."""

    def __init__(self, config: ServiceConfig):
        self.config = config
        self.root = Path(config.artifacts)
        self.root.mkdir(parents=True, exist_ok=True)
        state = load_checkpoint(config.checkpoint)
        self.gen: Generator = state.gen
        for p in self.gen.parameters():
            p.requires_grad_(False)
        self.resolution = state.resolution
        self.sampling = state.config.sampling
        self.poses = state.config.poses
        self.iteration = state.iteration
        self.k = self.gen.config.k_classes
        self.lock = threading.Lock()
        self.jobs: dict[str, _Job] = {}
        self.pool = ThreadPoolExecutor(max_workers=config.max_jobs)

    # -- model + latents ----------------------------------------------------

    def model_info(self) -> dict:
        cfg = self.gen.config
        return {
            "k": self.k,
            "resolution": self.resolution,
            "z_shape_dim": cfg.z_shape_dim,
            "z_texture_dim": cfg.z_texture_dim,
            "iteration": self.iteration,
            "palette": imageio.label_palette(self.k).tolist(),
            "pose_range": {"pitch_max": self.poses.pitch_max, "yaw_max": self.poses.yaw_max},
            "t_near": self.sampling.t_near,
            "t_far": self.sampling.t_far,
        }

    def _latents_path(self, latent_id: str) -> Path:
        return self.root / "latents" / f"{latent_id}.fnrf"

    def store_latents(self, z_s: torch.Tensor, z_t: torch.Tensor) -> str:
        latent_id = uuid.uuid4().hex[:12]
        path = self._latents_path(latent_id)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_latents(path, z_s, z_t)
        return latent_id

    def resolve_latents(self, latent_id: str) -> tuple[torch.Tensor, torch.Tensor]:
        path = self._latents_path(latent_id)
        if not path.is_file():
            raise HTTPException(status_code=404, detail=f"unknown latent id '{latent_id}'")
        z_s, z_t = load_latents(path)
        if z_t is None:
            raise HTTPException(status_code=404, detail=f"latent id '{latent_id}' has no texture code")
        return z_s, z_t

    def latents_from_body(self, body: dict) -> tuple[torch.Tensor, torch.Tensor]:
        if "latent_id" in body:
            return self.resolve_latents(_field(body, "latent_id", str, required=True))
        if "latents" not in body:
            raise _bad("need 'latent_id' or 'latents'")
        obj = body["latents"]
        if not isinstance(obj, dict) or "z_s" not in obj or "z_t" not in obj:
            raise _bad("'latents' must be an object with z_s and z_t arrays")
        cfg = self.gen.config
        out = []
        for name, dim in (("z_s", cfg.z_shape_dim), ("z_t", cfg.z_texture_dim)):
            vec = obj[name]
            if (not isinstance(vec, list) or len(vec) != dim
                    or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vec)):
                raise _bad(f"'latents.{name}' must be a list of {dim} numbers")
            out.append(torch.tensor(vec, dtype=torch.float32))
        return out[0], out[1]

    def decode_mask(self, payload: dict, name: str = "mask_png") -> torch.Tensor:
        try:
            mask = imageio.label_from_png_bytes(_decode_b64(payload, name))
        except HTTPException:
            raise
        except Exception as e:
            raise _bad(f"payload field '{name}' is not a decodable PNG: {e}")
        if mask.shape != (self.resolution, self.resolution):
            raise _bad(f"'{name}' must be {self.resolution}x{self.resolution}, "
                       f"got {mask.shape[0]}x{mask.shape[1]}")
        if int(mask.max()) >= self.k:
            raise _bad(f"'{name}' has labels >= k={self.k}")
        return torch.from_numpy(mask)

    def decode_image(self, payload: dict, name: str = "image_png") -> torch.Tensor:
        try:
            img = imageio.rgb_from_png_bytes(_decode_b64(payload, name))
        except Exception as e:
            raise _bad(f"payload field '{name}' is not a decodable PNG: {e}")
        if img.shape[:2] != (self.resolution, self.resolution):
            raise _bad(f"'{name}' must be {self.resolution}x{self.resolution}")
        return torch.from_numpy(img)

    # -- rendering ----------------------------------------------------------

    def render_set(self, z_s: torch.Tensor, z_t: torch.Tensor, pose: CameraPose,
                   out_dir: Path, stem: str, out=None) -> dict:
        if out is None:
            with torch.no_grad():
                out = render(self.gen, z_s, z_t, pose, self.sampling, self.resolution)
        out_dir.mkdir(parents=True, exist_ok=True)
        labels = semantic_argmax(out.sem_probs[0])
        paths = {
            "rgb": out_dir / f"{stem}rgb.png",
            "mask": out_dir / f"{stem}mask.png",
            "mask_rgb": out_dir / f"{stem}mask_rgb.png",
            "depth": out_dir / f"{stem}depth.png",
        }
        imageio.save_rgb(paths["rgb"], out.rgb[0])
        imageio.save_label(paths["mask"], labels)
        imageio.save_label_preview(paths["mask_rgb"], labels, self.k)
        imageio.save_depth16(paths["depth"], out.depth[0],
                             self.sampling.t_near, self.sampling.t_far)
        return {key: self.url_for(p) for key, p in paths.items()}

    def url_for(self, path: Path) -> str:
        return "/artifacts/" + path.relative_to(self.root).as_posix()

    # -- job table ----------------------------------------------------------

    def submit(self, kind: str, payload: dict) -> dict:
        getattr(self, "_parse_" + kind.replace("-", "_"))(payload)  # 400/404 now, not async
        job = _Job(JobRecord(id=uuid.uuid4().hex[:12], kind=kind), payload)
        with self.lock:
            active = sum(1 for j in self.jobs.values() if j.record.status not in _TERMINAL)
            if active >= self.config.max_jobs:
                raise HTTPException(status_code=429, detail="job queue full")
            finished = sorted((j for j in self.jobs.values() if j.record.status in _TERMINAL),
                              key=lambda j: j.record.created)
            for j in finished[: max(0, len(finished) - self.config.retention + 1)]:
                del self.jobs[j.record.id]
            self.jobs[job.record.id] = job
        snapshot = job.record.to_dict()  # pre-start view; the worker may flip it any moment
        self.pool.submit(self._run, job)
        return snapshot

    def get_job(self, job_id: str) -> _Job:
        with self.lock:
            job = self.jobs.get(job_id)
        if job is None:
            raise HTTPException(status_code=404, detail=f"unknown job id '{job_id}'")
        return job

    def cancel_job(self, job_id: str) -> JobRecord:
        job = self.get_job(job_id)
        job.cancel.set()
        return job.record

    def _run(self, job: _Job) -> None:
        with self.lock:
            job.record.advance("running")
        try:
            if job.cancel.is_set():
                raise _Cancelled()
            handler = getattr(self, "_job_" + job.record.kind.replace("-", "_"))
            paths = handler(job)
            with self.lock:
                job.record.result_paths = paths
                job.record.advance("done")
        except _Cancelled:
            with self.lock:
                job.record.error = "cancelled"
                job.record.advance("failed")
        except (InversionError, HTTPException, ValueError, KeyError, OSError) as e:
            detail = e.detail if isinstance(e, HTTPException) else str(e)
            with self.lock:
                job.record.error = detail
                job.record.advance("failed")

    def _progress(self, job: _Job):
        def callback(i: int, total: int) -> None:
            if job.cancel.is_set():
                raise _Cancelled()
            job.record.progress = (i + 1, total)
        return callback

    def _job_dir(self, job: _Job) -> Path:
        path = self.root / "jobs" / job.record.id
        path.mkdir(parents=True, exist_ok=True)
        return path

    def _finish_inversion(self, job: _Job, out_dir: Path, z_s, z_t, trace,
                          pose: CameraPose, mask: torch.Tensor,
                          image: torch.Tensor | None = None) -> list[str]:
        save_latents(out_dir / "latents.fnrf", z_s, z_t)
        trace.save(out_dir / "trace.jsonl")
        with torch.no_grad():
            out = render(self.gen, z_s, z_t, pose, self.sampling, self.resolution)
        urls = self.render_set(z_s, z_t, pose, out_dir, "", out=out)
        summary = {
            "kind": job.record.kind,
            "latent_id": self.store_latents(z_s, z_t),
            "miou": miou(semantic_argmax(out.sem_probs[0]), mask.numpy(), self.k),
            "steps": len(trace.records),
        }
        if image is not None:
            summary["psnr"] = psnr(out.rgb[0].clamp(0, 1), image)
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=1))
        return ([self.url_for(out_dir / n) for n in ("latents.fnrf", "trace.jsonl", "summary.json")]
                + [urls[key] for key in ("rgb", "mask", "mask_rgb", "depth")])

    # -- payload parsing (request thread) and handlers (worker threads) -----

    def _parse_invert_semantic(self, p: dict) -> dict:
        return {"mask": self.decode_mask(p),
                "task_args": {"pose": _parse_pose(p.get("pose")),
                              "steps": _field(p, "steps", int, 200),
                              "lr": _field(p, "lr", float, 1e-2),
                              "seed": _field(p, "seed", int, 0)}}

    def _job_invert_semantic(self, job: _Job) -> list[str]:
        parsed = self._parse_invert_semantic(job.payload)
        mask = parsed["mask"]
        task = InversionTask(mask=mask, sampling=self.sampling, **parsed["task_args"])
        out_dir = self._job_dir(job)
        z_s, trace = invert_semantic(self.gen, task, progress=self._progress(job))
        return self._finish_inversion(job, out_dir, z_s, trace.z_t, trace, task.pose, mask)

    def _parse_invert_full(self, p: dict) -> dict:
        parsed = self._parse_invert_semantic(p)
        parsed["image"] = self.decode_image(p)
        parsed["task_args"].update(w_rgb=_field(p, "w_rgb", float),
                                   w_sem=_field(p, "w_sem", float))
        return parsed

    def _job_invert_full(self, job: _Job) -> list[str]:
        parsed = self._parse_invert_full(job.payload)
        mask, image = parsed["mask"], parsed["image"]
        task = InversionTask(mask=mask, image=image, sampling=self.sampling,
                             **parsed["task_args"])
        out_dir = self._job_dir(job)
        z_s, z_t, trace = invert_full(self.gen, task, progress=self._progress(job))
        return self._finish_inversion(job, out_dir, z_s, z_t, trace, task.pose, mask, image)

    def _parse_local_edit(self, p: dict) -> dict:
        z_s, z_t = self.resolve_latents(_field(p, "latent_id", str, required=True))
        return {"z_s": z_s, "z_t": z_t, "mask": self.decode_mask(p),
                "pose": _parse_pose(p.get("pose")),
                "steps": _field(p, "steps", int, 200),
                "lr": _field(p, "lr", float, 1e-2),
                "mu": _field(p, "mu", float, 0.1)}

    def _job_local_edit(self, job: _Job) -> list[str]:
        parsed = self._parse_local_edit(job.payload)
        out_dir = self._job_dir(job)
        z_s_new, trace = local_edit(self.gen, parsed["z_s"], parsed["z_t"],
                                    parsed["mask"], parsed["pose"],
                                    steps=parsed["steps"], lr=parsed["lr"],
                                    mu=parsed["mu"], sampling=self.sampling,
                                    progress=self._progress(job))
        return self._finish_inversion(job, out_dir, z_s_new, parsed["z_t"], trace,
                                      parsed["pose"], parsed["mask"])

    def _parse_render(self, p: dict) -> dict:
        z_s, z_t = self.latents_from_body(p)
        poses = p.get("poses")
        if not isinstance(poses, list) or not poses or len(poses) > 64:
            raise _bad("'poses' must be a non-empty list of at most 64 poses")
        parsed_poses = [_parse_pose(obj, f"poses[{i}]") for i, obj in enumerate(poses)]
        return {"z_s": z_s, "z_t": z_t, "poses": parsed_poses, "raw_poses": poses}

    def _job_render(self, job: _Job) -> list[str]:
        parsed = self._parse_render(job.payload)
        out_dir = self._job_dir(job)
        urls: list[str] = []
        for i, pose in enumerate(parsed["poses"]):
            if job.cancel.is_set():
                raise _Cancelled()
            urls.extend(self.render_set(parsed["z_s"], parsed["z_t"], pose,
                                        out_dir, f"{i:02d}_").values())
            job.record.progress = (i + 1, len(parsed["poses"]))
        (out_dir / "index.json").write_text(
            json.dumps({"poses": parsed["raw_poses"], "urls": urls}, indent=1))
        return [self.url_for(out_dir / "index.json")] + urls

    def _parse_morph(self, p: dict) -> dict:
        a = self.resolve_latents(_field(p, "latent_id_a", str, required=True))
        b = self.resolve_latents(_field(p, "latent_id_b", str, required=True))
        n = _field(p, "n", int, 3)
        if not 2 <= n <= 7:
            raise _bad("'n' must be between 2 and 7")
        return {"a": a, "b": b, "n": n,
                "pose": _parse_pose(p.get("pose", {"pitch": 0.0, "yaw": 0.0}))}

    def _job_morph(self, job: _Job) -> list[str]:
        parsed = self._parse_morph(job.payload)
        n, pose = parsed["n"], parsed["pose"]
        out_dir = self._job_dir(job)
        job.record.progress = (0, 1)
        grid = morph_grid(self.gen, parsed["a"], parsed["b"], n, pose,
                          self.sampling, self.resolution)
        if job.cancel.is_set():
            raise _Cancelled()
        res = self.resolution
        rgb = grid.rgb.permute(0, 2, 1, 3, 4).reshape(n * res, n * res, 3)
        labels = grid.sem_probs.argmax(-1).permute(0, 2, 1, 3).reshape(n * res, n * res)
        imageio.save_rgb(out_dir / "grid.png", rgb)
        imageio.save_label_preview(out_dir / "grid_mask.png", labels.numpy(), self.k)
        (out_dir / "grid.json").write_text(json.dumps(
            {"n": n, "pose": {"pitch": pose.pitch, "yaw": pose.yaw}}, indent=1))
        job.record.progress = (1, 1)
        return [self.url_for(out_dir / name) for name in ("grid.png", "grid_mask.png", "grid.json")]


def build_app(service: Service) -> FastAPI:
    app = FastAPI(title="facefield service")
    # the studio is served from its own origin; artifacts and JSON must be fetchable
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])

    @app.exception_handler(RequestValidationError)
    async def validation_400(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": exc.errors()})

    @app.get("/model")
    def model():
        return service.model_info()

    @app.post("/sample")
    def sample(body: dict | None = None):
        body = body or {}
        seed = _field(body, "seed", int, secrets.randbits(31))
        rng = torch.Generator().manual_seed(seed)
        z_s, z_t = service.gen.sample_latents(1, rng)
        z_s, z_t = z_s[0], z_t[0]
        latent_id = service.store_latents(z_s, z_t)
        out_dir = service.root / "samples" / latent_id
        previews = []
        for i, (pitch, yaw) in enumerate(_PREVIEW_POSES):
            pose = CameraPose(pitch=pitch, yaw=yaw)
            urls = service.render_set(z_s, z_t, pose, out_dir, f"{i:02d}_")
            previews.append({"pose": {"pitch": pitch, "yaw": yaw}, **urls})
        return {"latent_id": latent_id, "seed": seed, "previews": previews}

    @app.post("/render")
    def render_once(body: dict):
        z_s, z_t = service.latents_from_body(body)
        pose = _parse_pose(body.get("pose"))
        out_dir = service.root / "renders" / uuid.uuid4().hex[:12]
        urls = service.render_set(z_s, z_t, pose, out_dir, "")
        return {"pose": {"pitch": pose.pitch, "yaw": pose.yaw}, **urls}

    @app.post("/jobs")
    def create_job(body: dict):
        kind = body.get("kind")
        if kind not in JOB_KINDS:
            raise _bad(f"unknown job kind {kind!r}; expected one of {list(JOB_KINDS)}")
        payload = body.get("payload")
        if not isinstance(payload, dict):
            raise _bad("'payload' must be an object")
        return service.submit(kind, payload)

    @app.get("/jobs/{job_id}")
    def job_status(job_id: str):
        return service.get_job(job_id).record.to_dict()

    @app.delete("/jobs/{job_id}")
    def job_cancel(job_id: str):
        return service.cancel_job(job_id).to_dict()

    @app.get("/artifacts/{path:path}")
    def artifact(path: str):
        root = service.root.resolve()
        target = (root / path).resolve()
        if not target.is_relative_to(root) or not target.is_file():
            raise HTTPException(status_code=404, detail=f"no artifact at '{path}'")
        media = _MEDIA_TYPES.get(target.suffix, "application/octet-stream")
        return FileResponse(target, media_type=media)

    return app


def serve(config: ServiceConfig) -> None:
    import uvicorn

    service = Service(config)
    app = build_app(service)
    uvicorn.run(app, host=config.host, port=config.port, log_level="warning")
