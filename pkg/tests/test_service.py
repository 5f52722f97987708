"""HTTP service tests over the in-process test client: endpoint contracts,
the job state machine, cancellation latency, admission control, artifact
serving across restarts, and checkpoint immutability.
"""

import base64
import hashlib
import json
import time

import numpy as np
import pytest
import torch
from fastapi.testclient import TestClient

from facefield.generator import GeneratorConfig
from facefield.imageio import (label_from_png_bytes, label_png_bytes,
                               rgb_png_bytes)
from facefield.renderer import SamplingConfig
from facefield.service import Service, ServiceConfig, build_app
from facefield.training import TrainConfig, make_state, save_checkpoint

TINYG = GeneratorConfig(z_shape_dim=8, z_texture_dim=8, trunk_depth=2, trunk_width=16,
                        color_depth=2, mapping_hidden=16, k_classes=4,
                        grid_size=4, grid_channels=2)
RES = 32


def _write_checkpoint(path):
    config = TrainConfig(resolution=RES, batch=2, iterations=1, checkpoint_every=0,
                         sampling=SamplingConfig(n_samples=6), generator=TINYG)
    save_checkpoint(make_state(config), path)


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "model.fnrf"
    _write_checkpoint(path)
    return path


@pytest.fixture()
def server(ckpt, tmp_path):
    service = Service(ServiceConfig(checkpoint=str(ckpt), artifacts=str(tmp_path / "art"),
                                    max_jobs=2))
    with TestClient(build_app(service)) as client:
        yield client, service


def _mask_b64(mask) -> str:
    return base64.b64encode(label_png_bytes(mask)).decode()


def _sample(client, seed=5) -> dict:
    r = client.post("/sample", json={"seed": seed})
    assert r.status_code == 200
    return r.json()


def _wait(client, job_id, timeout=60.0) -> dict:
    t0 = time.time()
    while time.time() - t0 < timeout:
        rec = client.get(f"/jobs/{job_id}").json()
        if rec["status"] in ("done", "failed"):
            return rec
        time.sleep(0.02)
    raise AssertionError(f"job {job_id} did not finish: {rec}")


def test_config_validation():
    with pytest.raises(ValueError):
        ServiceConfig(checkpoint="x", artifacts="y", max_jobs=0)
    with pytest.raises(ValueError):
        ServiceConfig(checkpoint="x", artifacts="y", retention=0)


def test_model_endpoint(server):
    client, service = server
    info = client.get("/model").json()
    assert info["k"] == 4 and info["resolution"] == RES
    assert info["z_shape_dim"] == 8 and info["z_texture_dim"] == 8
    assert len(info["palette"]) == 4
    assert info["pose_range"]["yaw_max"] > 0


def test_sample_previews_and_artifacts(server):
    client, _ = server
    out = _sample(client, seed=5)
    assert len(out["previews"]) == 3
    for preview in out["previews"]:
        for key in ("rgb", "mask", "mask_rgb", "depth"):
            r = client.get(preview[key])
            assert r.status_code == 200
            assert r.headers["content-type"] == "image/png"
    # same seed -> byte-identical latent table
    out2 = _sample(client, seed=5)
    a = client.get(f"/artifacts/latents/{out['latent_id']}.fnrf").content
    b = client.get(f"/artifacts/latents/{out2['latent_id']}.fnrf").content
    assert out["latent_id"] != out2["latent_id"] and a == b


def test_render_endpoint_and_errors(server):
    client, _ = server
    lat = _sample(client)["latent_id"]
    ok = client.post("/render", json={"latent_id": lat, "pose": {"pitch": 0.1, "yaw": -0.2}})
    assert ok.status_code == 200
    assert client.get(ok.json()["rgb"]).status_code == 200

    raw = client.post("/render", json={
        "latents": {"z_s": [0.0] * 8, "z_t": [0.0] * 8}, "pose": {"pitch": 0, "yaw": 0}})
    assert raw.status_code == 200

    assert client.post("/render", json={"latent_id": "nope", "pose": {"pitch": 0, "yaw": 0}}).status_code == 404
    assert client.post("/render", json={"latent_id": lat}).status_code == 400
    assert client.post("/render", json={"latent_id": lat, "pose": {"pitch": 2.0, "yaw": 0}}).status_code == 400
    assert client.post("/render", json={"latents": {"z_s": [0.0] * 3, "z_t": [0.0] * 8},
                                        "pose": {"pitch": 0, "yaw": 0}}).status_code == 400

    bad = client.post("/render", content=b"{not json", headers={"content-type": "application/json"})
    assert bad.status_code == 400
    assert "detail" in bad.json()


def test_job_validation_errors(server):
    client, _ = server
    assert client.post("/jobs", json={"kind": "explode", "payload": {}}).status_code == 400
    assert client.post("/jobs", json={"kind": "invert-semantic"}).status_code == 400
    r = client.post("/jobs", json={"kind": "invert-semantic", "payload": {}})
    assert r.status_code == 400 and "mask_png" in r.json()["detail"]
    # oversized mask, bad labels, junk base64
    big = np.zeros((64, 64), dtype=np.int64)
    assert client.post("/jobs", json={"kind": "invert-semantic", "payload": {
        "mask_png": _mask_b64(big), "pose": {"pitch": 0, "yaw": 0}}}).status_code == 400
    hot = np.full((RES, RES), 9, dtype=np.int64)
    assert client.post("/jobs", json={"kind": "invert-semantic", "payload": {
        "mask_png": _mask_b64(hot), "pose": {"pitch": 0, "yaw": 0}}}).status_code == 400
    assert client.post("/jobs", json={"kind": "invert-semantic", "payload": {
        "mask_png": "%%%", "pose": {"pitch": 0, "yaw": 0}}}).status_code == 400
    assert client.get("/jobs/nope").status_code == 404
    assert client.delete("/jobs/nope").status_code == 404


def test_invert_job_lifecycle(server):
    client, service = server
    mask = np.zeros((RES, RES), dtype=np.int64)
    mask[10:22, 10:22] = 1
    r = client.post("/jobs", json={"kind": "invert-semantic", "payload": {
        "mask_png": _mask_b64(mask), "pose": {"pitch": 0.0, "yaw": 0.0},
        "steps": 40, "seed": 3}})
    assert r.status_code == 200
    job_id = r.json()["id"]
    assert r.json()["status"] == "queued"

    seen = set()
    rec = r.json()
    while rec["status"] not in ("done", "failed"):
        rec = client.get(f"/jobs/{job_id}").json()
        if rec["status"] == "running":
            seen.add(rec["progress"]["iter"])
        time.sleep(0.01)
    assert rec["status"] == "done", rec
    assert len(seen) >= 2  # polled mid-run progress strictly increased
    assert rec["progress"] == {"iter": 40, "total": 40}

    paths = rec["result_paths"]
    assert any(p.endswith("trace.jsonl") for p in paths)
    trace = client.get(next(p for p in paths if p.endswith("trace.jsonl"))).text
    lines = [json.loads(l) for l in trace.splitlines()]
    assert len(lines) <= 40
    assert [l["iter"] for l in lines] == sorted(l["iter"] for l in lines)
    summary = client.get(next(p for p in paths if p.endswith("summary.json"))).json()
    assert 0.0 <= summary["miou"] <= 1.0
    result_mask = label_from_png_bytes(
        client.get(next(p for p in paths if p.endswith("/mask.png"))).content)
    assert result_mask.shape == (RES, RES)


def test_cancel_honored_within_one_iteration(server):
    client, _ = server
    mask = np.zeros((RES, RES), dtype=np.int64)
    r = client.post("/jobs", json={"kind": "invert-semantic", "payload": {
        "mask_png": _mask_b64(mask), "pose": {"pitch": 0, "yaw": 0}, "steps": 100000}})
    job_id = r.json()["id"]
    t0 = time.time()
    while time.time() - t0 < 30:
        rec = client.get(f"/jobs/{job_id}").json()
        if rec["status"] == "running" and rec["progress"]["iter"] >= 2:
            break
        time.sleep(0.01)
    else:
        raise AssertionError("job never reached iteration 2")
    at_cancel = client.delete(f"/jobs/{job_id}").json()["progress"]["iter"]
    final = _wait(client, job_id)
    assert final["status"] == "failed" and final["error"] == "cancelled"
    assert final["progress"]["iter"] <= at_cancel + 1
    assert final["progress"]["iter"] < 100000


def test_queue_full_returns_429(ckpt, tmp_path):
    service = Service(ServiceConfig(checkpoint=str(ckpt), artifacts=str(tmp_path / "a"),
                                    max_jobs=1))
    with TestClient(build_app(service)) as client:
        mask = np.zeros((RES, RES), dtype=np.int64)
        payload = {"mask_png": _mask_b64(mask), "pose": {"pitch": 0, "yaw": 0},
                   "steps": 100000}
        first = client.post("/jobs", json={"kind": "invert-semantic", "payload": payload})
        assert first.status_code == 200
        second = client.post("/jobs", json={"kind": "invert-semantic", "payload": payload})
        assert second.status_code == 429
        client.delete(f"/jobs/{first.json()['id']}")
        _wait(client, first.json()["id"])
        third = client.post("/jobs", json={"kind": "invert-semantic", "payload": payload})
        assert third.status_code == 200  # capacity freed after termination
        client.delete(f"/jobs/{third.json()['id']}")
        _wait(client, third.json()["id"])


def test_concurrent_invert_jobs_deterministic(server):
    client, _ = server
    mask = np.zeros((RES, RES), dtype=np.int64)
    mask[4:16, 4:16] = 2
    payload = {"mask_png": _mask_b64(mask), "pose": {"pitch": 0, "yaw": 0},
               "steps": 15, "seed": 7}
    a = client.post("/jobs", json={"kind": "invert-semantic", "payload": payload}).json()
    b = client.post("/jobs", json={"kind": "invert-semantic", "payload": payload}).json()
    ra, rb = _wait(client, a["id"]), _wait(client, b["id"])
    assert ra["status"] == "done" and rb["status"] == "done"
    img_a = client.get(next(p for p in ra["result_paths"] if p.endswith("/rgb.png"))).content
    img_b = client.get(next(p for p in rb["result_paths"] if p.endswith("/rgb.png"))).content
    assert img_a == img_b  # same seed, same steps -> identical result render


def test_local_edit_render_and_morph_jobs(server):
    client, _ = server
    lat_a = _sample(client, seed=1)["latent_id"]
    lat_b = _sample(client, seed=2)["latent_id"]
    frontal = client.post("/render", json={"latent_id": lat_a,
                                           "pose": {"pitch": 0, "yaw": 0}}).json()
    mask_png = client.get(frontal["mask"]).content
    edit = client.post("/jobs", json={"kind": "local-edit", "payload": {
        "latent_id": lat_a, "mask_png": base64.b64encode(mask_png).decode(),
        "pose": {"pitch": 0, "yaw": 0}, "steps": 10}})
    assert edit.status_code == 200
    rec = _wait(client, edit.json()["id"])
    assert rec["status"] == "done", rec
    summary = client.get(next(p for p in rec["result_paths"]
                              if p.endswith("summary.json"))).json()
    assert "miou" in summary and "latent_id" in summary

    missing = client.post("/jobs", json={"kind": "local-edit", "payload": {
        "latent_id": "ghost", "mask_png": base64.b64encode(mask_png).decode(),
        "pose": {"pitch": 0, "yaw": 0}}})
    assert missing.status_code == 404

    orbit = client.post("/jobs", json={"kind": "render", "payload": {
        "latent_id": lat_a,
        "poses": [{"pitch": 0.0, "yaw": y} for y in (-0.3, 0.0, 0.3)]}})
    rec = _wait(client, orbit.json()["id"])
    assert rec["status"] == "done" and rec["progress"] == {"iter": 3, "total": 3}
    index = client.get(rec["result_paths"][0]).json()
    assert len(index["urls"]) == 12

    morph = client.post("/jobs", json={"kind": "morph", "payload": {
        "latent_id_a": lat_a, "latent_id_b": lat_b, "n": 2,
        "pose": {"pitch": 0, "yaw": 0}}})
    rec = _wait(client, morph.json()["id"])
    assert rec["status"] == "done"
    grid = client.get(next(p for p in rec["result_paths"] if p.endswith("grid.png")))
    assert grid.status_code == 200


def test_invert_full_job(server):
    client, _ = server
    lat = _sample(client, seed=9)["latent_id"]
    shown = client.post("/render", json={"latent_id": lat,
                                         "pose": {"pitch": 0, "yaw": 0}}).json()
    img = client.get(shown["rgb"]).content
    mask = client.get(shown["mask"]).content
    r = client.post("/jobs", json={"kind": "invert-full", "payload": {
        "image_png": base64.b64encode(img).decode(),
        "mask_png": base64.b64encode(mask).decode(),
        "pose": {"pitch": 0, "yaw": 0}, "steps": 10, "seed": 4}})
    assert r.status_code == 200
    rec = _wait(client, r.json()["id"])
    assert rec["status"] == "done", rec
    summary = client.get(next(p for p in rec["result_paths"]
                              if p.endswith("summary.json"))).json()
    assert "psnr" in summary


def test_artifact_traversal_blocked(server):
    client, _ = server
    assert client.get("/artifacts/../pyproject.toml").status_code == 404
    assert client.get("/artifacts/%2e%2e/pyproject.toml").status_code == 404
    assert client.get("/artifacts/absent/file.png").status_code == 404


def test_restart_reserves_artifacts_and_checkpoint_untouched(ckpt, tmp_path):
    art = tmp_path / "persist"
    before = hashlib.sha256(ckpt.read_bytes()).hexdigest()
    service = Service(ServiceConfig(checkpoint=str(ckpt), artifacts=str(art)))
    with TestClient(build_app(service)) as client:
        out = _sample(client, seed=8)
        url = out["previews"][0]["rgb"]
        body = client.get(url).content
        params_before = {n: p.detach().clone() for n, p in service.gen.named_parameters()}
        mask = np.zeros((RES, RES), dtype=np.int64)
        r = client.post("/jobs", json={"kind": "invert-semantic", "payload": {
            "mask_png": _mask_b64(mask), "pose": {"pitch": 0, "yaw": 0}, "steps": 5}})
        assert _wait(client, r.json()["id"])["status"] == "done"
        for n, p in service.gen.named_parameters():
            assert torch.equal(p.detach(), params_before[n]), n
    assert hashlib.sha256(ckpt.read_bytes()).hexdigest() == before

    fresh = Service(ServiceConfig(checkpoint=str(ckpt), artifacts=str(art)))
    with TestClient(build_app(fresh)) as client2:
        again = client2.get(url)
        assert again.status_code == 200 and again.content == body
        assert client2.post("/render", json={
            "latent_id": out["latent_id"], "pose": {"pitch": 0, "yaw": 0}}).status_code == 200


def test_job_retention_evicts_oldest(ckpt, tmp_path):
    service = Service(ServiceConfig(checkpoint=str(ckpt), artifacts=str(tmp_path / "a"),
                                    max_jobs=1, retention=2))
    with TestClient(build_app(service)) as client:
        mask = np.zeros((RES, RES), dtype=np.int64)
        ids = []
        for _ in range(4):
            r = client.post("/jobs", json={"kind": "invert-semantic", "payload": {
                "mask_png": _mask_b64(mask), "pose": {"pitch": 0, "yaw": 0}, "steps": 1}})
            assert r.status_code == 200
            ids.append(r.json()["id"])
            _wait(client, ids[-1])
        assert client.get(f"/jobs/{ids[0]}").status_code == 404  # evicted
        assert client.get(f"/jobs/{ids[-1]}").status_code == 200
