"""Heatmap rendering and raw relevance-map export."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np


def diverging_rgb(map2d: np.ndarray) -> np.ndarray:
    """Symmetric blue-white-red coloring of a signed map, (H, W, 3) uint8.

    Zero maps to white; +/- max|value| map to saturated red/blue.
    """
    m = np.asarray(map2d, dtype=np.float64)
    peak = np.abs(m).max()
    t = m / peak if peak > 0 else np.zeros_like(m)
    fade = np.clip(1.0 - np.abs(t), 0.0, 1.0)
    rgb = np.empty(m.shape + (3,), dtype=np.float64)
    pos = t >= 0
    rgb[..., 0] = np.where(pos, 1.0, fade)
    rgb[..., 1] = fade
    rgb[..., 2] = np.where(pos, fade, 1.0)
    return np.round(rgb * 255).astype(np.uint8)


def write_heatmap_ppm(map2d: np.ndarray, path) -> Path:
    """Render an (H, W) map to a binary PPM (P6) heatmap."""
    rgb = diverging_rgb(map2d)
    h, w = rgb.shape[:2]
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(rgb.tobytes())
    return path


def read_ppm(path):
    data = Path(path).read_bytes()
    header, _, rest = data.partition(b"255\n")
    fields = header.split()
    if fields[0] != b"P6":
        raise ValueError(f"not a P6 PPM: {path}")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(rest, dtype=np.uint8).reshape(h, w, 3)


def write_relevance_map(map2d: np.ndarray, path) -> Path:
    """Raw export: header of two little-endian int32 (H, W), then f32 values."""
    m = np.ascontiguousarray(map2d, dtype="<f4")
    if m.ndim != 2:
        raise ValueError(f"expected an (H, W) map, got shape {m.shape}")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<ii", m.shape[0], m.shape[1]))
        fh.write(m.tobytes())
    return path


def read_relevance_map(path) -> np.ndarray:
    data = Path(path).read_bytes()
    h, w = struct.unpack("<ii", data[:8])
    m = np.frombuffer(data[8:], dtype="<f4")
    if m.size != h * w:
        raise ValueError(f"map payload has {m.size} values, header says {h}x{w}")
    return m.reshape(h, w).astype(np.float32)
