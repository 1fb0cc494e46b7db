"""Shared value types and frame arithmetic.

Canvas images are H x W x 3 arrays of float64 intensities in [0, 1].
A painting video is an ordered sequence of such frames; the last frame
is the completed painting. A change map is the signed per-pixel
difference applied between consecutive frames.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

CHANNELS = 3


def derive_seed(master: int, key: str) -> int:
    """Stable sub-stream seed from a master seed and a string key."""
    digest = hashlib.sha256(f"{master}:{key}".encode()).digest()
    return int.from_bytes(digest[:8], "big") % (2**63)


class Medium(str, Enum):
    DIGITAL = "digital"
    WATERCOLOR = "watercolor"
    SYNTHETIC = "synthetic"


class ShapeMismatchError(ValueError):
    """Raised when two images that must share a shape do not."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


def _check_image(arr: np.ndarray, lo: float, hi: float, what: str) -> None:
    if arr.ndim != 3 or arr.shape[2] != CHANNELS:
        raise ValueError(f"{what} must have shape HxWx{CHANNELS}, got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{what} spatial dims must be >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite values")
    if arr.min() < lo or arr.max() > hi:
        raise ValueError(
            f"{what} values must lie in [{lo}, {hi}], got "
            f"[{arr.min():.6g}, {arr.max():.6g}]"
        )


@dataclass(frozen=True)
class Frame:
    """One canvas state: H x W x 3 intensities in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        frozen = _freeze(self.pixels)
        _check_image(frozen, 0.0, 1.0, "Frame")
        object.__setattr__(self, "pixels", frozen)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape

    def __eq__(self, other) -> bool:
        return isinstance(other, Frame) and np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True)
class ChangeMap:
    """Signed per-pixel intensity change between consecutive frames, in [-1, 1]."""

    values: np.ndarray

    def __post_init__(self):
        frozen = _freeze(self.values)
        _check_image(frozen, -1.0, 1.0, "ChangeMap")
        object.__setattr__(self, "values", frozen)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def __eq__(self, other) -> bool:
        return isinstance(other, ChangeMap) and np.array_equal(self.values, other.values)


def blank_frame(height: int, width: int) -> Frame:
    """The all-white canvas every synthesized rollout starts from."""
    return Frame(np.ones((height, width, CHANNELS)))


def blank_like(frame: Frame) -> Frame:
    return blank_frame(frame.shape[0], frame.shape[1])


def is_blank(frame: Frame, tol: float = 2.0 / 255.0) -> bool:
    return bool(np.max(np.abs(frame.pixels - 1.0)) <= tol)


def apply_delta(prev: Frame, delta: ChangeMap) -> Frame:
    """Apply a change map to a frame, clamping the result into [0, 1]."""
    if prev.shape != delta.shape:
        raise ShapeMismatchError(
            f"frame shape {prev.shape} != change map shape {delta.shape}"
        )
    return Frame(np.clip(prev.pixels + delta.values, 0.0, 1.0))


def frame_delta(curr: Frame, prev: Frame) -> ChangeMap:
    """Elementwise curr - prev; inverse of apply_delta when no clamping occurs."""
    if curr.shape != prev.shape:
        raise ShapeMismatchError(
            f"frame shape {curr.shape} != frame shape {prev.shape}"
        )
    return ChangeMap(curr.pixels - prev.pixels)


@dataclass(frozen=True)
class PaintingVideo:
    """An ordered painting progression; the final frame is the completed work."""

    frames: tuple[Frame, ...]
    id: str
    medium: Medium = Medium.SYNTHETIC
    frame_period: Optional[float] = None

    def __post_init__(self):
        frames = tuple(self.frames)
        if len(frames) < 1:
            raise ValueError("PaintingVideo needs at least one frame")
        shape = frames[0].shape
        for i, f in enumerate(frames):
            if f.shape != shape:
                raise ShapeMismatchError(
                    f"frame {i} shape {f.shape} != frame 0 shape {shape}"
                )
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "medium", Medium(self.medium))

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return self.frames[0].shape

    @property
    def final(self) -> Frame:
        return self.frames[-1]

    def as_array(self) -> np.ndarray:
        """Stacked (T, H, W, 3) float64 copy of all frames."""
        return np.stack([f.pixels for f in self.frames])

    def starts_blank(self, tol: float = 2.0 / 255.0) -> bool:
        return is_blank(self.frames[0], tol)


def video_from_array(
    arr: np.ndarray,
    video_id: str,
    medium: Medium = Medium.SYNTHETIC,
    frame_period: Optional[float] = None,
) -> PaintingVideo:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 4:
        raise ValueError(f"expected (T, H, W, C) array, got shape {arr.shape}")
    return PaintingVideo(
        frames=tuple(Frame(a) for a in arr),
        id=video_id,
        medium=medium,
        frame_period=frame_period,
    )
