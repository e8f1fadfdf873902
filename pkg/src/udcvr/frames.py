"""PNG frame-sequence I/O and temporal windowing helpers.

A sequence on disk is a directory of 8-bit RGB PNGs named
``frame_0000.png``, ``frame_0001.png``, ...  In memory a frame is a
float64 array of shape 3xHxW with values in [0, 1], mapped linearly
from the 8-bit integers.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError

__all__ = [
    "frame_filename",
    "load_frame",
    "save_frame",
    "load_sequence",
    "save_sequence",
    "temporal_window",
]


def frame_filename(index: int) -> str:
    return f"frame_{index:04d}.png"


def load_frame(path) -> np.ndarray:
    """Read a PNG into a 3xHxW float64 array in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"frame not found: {path}")
    try:
        img = Image.open(path).convert("RGB")
    except Exception as exc:
        raise DataError(f"unreadable frame {path}: {exc}") from exc
    arr = np.asarray(img, dtype=np.float64) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_frame(path, frame: np.ndarray) -> None:
    """Write a 3xHxW array in [0, 1] as an 8-bit RGB PNG."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[0] != 3:
        raise DataError(f"expected 3xHxW frame, got shape {frame.shape}")
    q = np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q.transpose(1, 2, 0), mode="RGB").save(Path(path))


def load_sequence(directory) -> list[np.ndarray]:
    """Read all PNGs in a directory, sorted by filename."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"sequence directory not found: {directory}")
    files = sorted(directory.glob("*.png"))
    if not files:
        raise DataError(f"no PNG frames in {directory}")
    frames = [load_frame(f) for f in files]
    shapes = {f.shape for f in frames}
    if len(shapes) > 1:
        raise DataError(f"inconsistent frame shapes in {directory}: {sorted(shapes)}")
    return frames


def save_sequence(directory, frames) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(frames):
        p = directory / frame_filename(i)
        save_frame(p, frame)
        paths.append(p)
    return paths


def temporal_window(num_frames: int, center: int, k: int) -> list[int]:
    """Indices of the k-frame window around ``center``.

    Edge positions replicate the first/last frame so every reference
    index gets a full window.
    """
    if num_frames < 1:
        raise DataError("empty sequence")
    if not (0 <= center < num_frames):
        raise DataError(f"center {center} outside sequence of {num_frames}")
    if k < 1 or k % 2 == 0:
        raise DataError(f"window size must be odd and positive, got {k}")
    half = k // 2
    return [min(max(center + off, 0), num_frames - 1) for off in range(-half, half + 1)]
