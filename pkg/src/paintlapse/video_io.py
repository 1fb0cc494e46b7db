"""Disk format for painting videos.

A video is a directory of lossless frames named ``frame_%05d.png`` plus a
``meta.json`` with the video id, medium and optional frame period. 8-bit
content round-trips bit-exactly through save/load.
"""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .core import Frame, Medium, PaintingVideo

FRAME_PATTERN = "frame_%05d.png"
_FRAME_RE = re.compile(r"^frame_(\d{5})\.png$")


class VideoFormatError(ValueError):
    """Raised for missing, misnumbered or unreadable frame files."""


def frame_to_uint8(frame: Frame) -> np.ndarray:
    return np.round(frame.pixels * 255.0).astype(np.uint8)


def uint8_to_frame(arr: np.ndarray) -> Frame:
    return Frame(np.asarray(arr, dtype=np.float64) / 255.0)


def save_frame_png(frame: Frame, path: Path) -> None:
    Image.fromarray(frame_to_uint8(frame), mode="RGB").save(path, format="PNG")


def load_frame_png(path: Path) -> Frame:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"))
    return uint8_to_frame(arr)


def save_video(video: PaintingVideo, path: Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(video.frames):
        save_frame_png(frame, path / (FRAME_PATTERN % i))
    meta = {
        "id": video.id,
        "medium": video.medium.value,
        "frame_period": video.frame_period,
    }
    (path / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def load_video(path: Path) -> PaintingVideo:
    path = Path(path)
    if not path.is_dir():
        raise VideoFormatError(f"not a video directory: {path}")
    indexed = {}
    for p in path.iterdir():
        m = _FRAME_RE.match(p.name)
        if m:
            indexed[int(m.group(1))] = p
    if not indexed:
        raise VideoFormatError(f"no frame files in {path}")
    count = max(indexed) + 1
    frames = []
    for i in range(count):
        if i not in indexed:
            raise VideoFormatError(f"missing frame index {i} in {path}")
        try:
            frames.append(load_frame_png(indexed[i]))
        except Exception as exc:
            raise VideoFormatError(f"corrupt frame index {i} in {path}: {exc}") from exc

    meta_path = path / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return PaintingVideo(
        frames=tuple(frames),
        id=meta.get("id", path.name),
        medium=Medium(meta.get("medium", "synthetic")),
        frame_period=meta.get("frame_period"),
    )
