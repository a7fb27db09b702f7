"""PNG export of volume slices (grayscale or a blue-to-red ramp)."""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

__all__ = ["colorize", "render_slice", "take_slice", "write_png"]

CMAPS = ("gray", "heat")


def _chunk(tag: bytes, data: bytes) -> bytes:
    body = tag + data
    return struct.pack(">I", len(data)) + body + struct.pack(">I", zlib.crc32(body) & 0xFFFFFFFF)


def write_png(path: str | os.PathLike, pixels: np.ndarray) -> Path:
    """Write 8-bit ``(H, W)`` grayscale or ``(H, W, 3)`` RGB pixels."""
    px = np.asarray(pixels)
    if px.dtype != np.uint8:
        raise TypeError(f"pixels must be uint8, got {px.dtype}")
    if px.ndim == 2:
        color_type = 0
    elif px.ndim == 3 and px.shape[2] == 3:
        color_type = 2
    else:
        raise ValueError(f"expected (H, W) or (H, W, 3) pixels, got {px.shape}")
    h, w = px.shape[:2]
    rows = px.reshape(h, -1)
    raw = b"".join(b"\x00" + rows[i].tobytes() for i in range(h))
    png = (b"\x89PNG\r\n\x1a\n"
           + _chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0))
           + _chunk(b"IDAT", zlib.compress(raw, 9))
           + _chunk(b"IEND", b""))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(png)
    return path


def take_slice(volume: np.ndarray, axis: int = 0, index: int | None = None) -> np.ndarray:
    vol = np.asarray(volume)
    if vol.ndim == 2:
        return vol
    if vol.ndim != 3:
        raise ValueError(f"need a 2D or 3D volume, got shape {vol.shape}")
    n = vol.shape[axis]
    index = n // 2 if index is None else index
    if not 0 <= index < n:
        raise ValueError(f"slice index {index} out of range for axis of length {n}")
    return np.take(vol, index, axis=axis)


def colorize(plane: np.ndarray, vmin: float | None = None, vmax: float | None = None,
             cmap: str = "gray") -> np.ndarray:
    """Scale ``plane`` to [0, 1] over ``[vmin, vmax]`` and map to uint8 pixels."""
    if cmap not in CMAPS:
        raise ValueError(f"unknown colormap {cmap!r}; expected one of {CMAPS}")
    p = np.asarray(plane, dtype=np.float64)
    p = np.where(np.isfinite(p), p, np.nan)
    lo = float(np.nanmin(p)) if vmin is None else vmin
    hi = float(np.nanmax(p)) if vmax is None else vmax
    span = hi - lo if hi > lo else 1.0
    v = np.clip(np.nan_to_num((p - lo) / span, nan=0.0), 0.0, 1.0)
    if cmap == "gray":
        return np.round(v * 255).astype(np.uint8)
    # blue -> white -> red
    r = np.clip(2 * v, 0, 1)
    b = np.clip(2 - 2 * v, 0, 1)
    g = 1 - np.abs(2 * v - 1)
    return np.round(np.stack([r, g, b], axis=-1) * 255).astype(np.uint8)


def render_slice(volume: np.ndarray, path: str | os.PathLike, axis: int = 0,
                 index: int | None = None, vmin: float | None = None,
                 vmax: float | None = None, cmap: str = "gray") -> Path:
    return write_png(path, colorize(take_slice(volume, axis, index), vmin, vmax, cmap))
