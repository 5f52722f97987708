"""PNG import/export: 8-bit RGB images, single-channel label masks, 16-bit
depth maps, and a fixed palette for human-readable mask previews.

All floating-point images live in [0,1]; label maps are integer class ids
with 0 = background. Writers are deterministic: the same array produces the
same bytes.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image


def to_numpy(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x)


def save_rgb(path: str | Path, rgb) -> None:
    arr = to_numpy(rgb)
    u8 = (np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path, format="PNG")


def load_rgb(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_label(path: str | Path, labels) -> None:
    arr = to_numpy(labels).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def load_label(path: str | Path) -> np.ndarray:
    img = Image.open(path)
    if img.mode != "L":
        img = img.convert("L")
    return np.asarray(img, dtype=np.int64)


def label_png_bytes(labels) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_numpy(labels).astype(np.uint8), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def label_from_png_bytes(data: bytes) -> np.ndarray:
    img = Image.open(io.BytesIO(data))
    if img.mode != "L":
        img = img.convert("L")
    return np.asarray(img, dtype=np.int64)


def rgb_png_bytes(rgb) -> bytes:
    arr = to_numpy(rgb)
    u8 = (np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def rgb_from_png_bytes(data: bytes) -> np.ndarray:
    arr = np.asarray(Image.open(io.BytesIO(data)).convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_depth16(path: str | Path, depth, t_near: float, t_far: float) -> None:
    """Depth linearly mapped from [t_near, t_far] to the full uint16 range."""
    arr = to_numpy(depth).astype(np.float64)
    norm = np.clip((arr - t_near) / max(t_far - t_near, 1e-12), 0.0, 1.0)
    u16 = (norm * 65535.0 + 0.5).astype(np.uint16)
    img = Image.new("I;16", (u16.shape[1], u16.shape[0]))
    img.frombytes(u16.tobytes())
    img.save(path, format="PNG")


def load_depth16(path: str | Path, t_near: float, t_far: float) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.float64) / 65535.0
    return (arr * (t_far - t_near) + t_near).astype(np.float32)


def label_palette(k: int) -> np.ndarray:
    """(k, 3) uint8 palette; class 0 is black, others evenly hued."""
    pal = np.zeros((k, 3), dtype=np.uint8)
    for c in range(1, k):
        h = (c - 1) / max(k - 1, 1) * 6.0
        i, f = int(h) % 6, h - int(h)
        v, p, q, t = 255, 40, int(255 - 215 * f), int(40 + 215 * f)
        pal[c] = [(v, q, p), (t, v, p), (p, v, q), (p, t, v), (q, p, v), (v, p, t)][i]
    return pal


def save_label_preview(path: str | Path, labels, k: int) -> None:
    arr = to_numpy(labels).astype(np.int64)
    rgb = label_palette(k)[np.clip(arr, 0, k - 1)]
    Image.fromarray(rgb, mode="RGB").save(path, format="PNG")
