"""Quantitative comparison of synthesized and real painting videos.

Two families of metrics: best-of-k whole-video L1 distance (lower is
better) and best-of-k change-shape IOU (higher is better), where the
change shape of a time step is the binary map of pixels altered at that
step and matching between real and synthesized steps is order-free.
"""

from __future__ import annotations

import csv
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .core import ChangeMap, Frame, PaintingVideo, derive_seed
from .datapipe import ExtractionConfig, _count_table, _unrank, extract_crops, crop_video
from .inference import SynthesisRequest, synthesize_video
from .networks import ModelParams

Sampler = Callable[[int], PaintingVideo]
SamplerFactory = Callable[[Frame, int, int], Sampler]  # (painting, seed, steps)

DEFAULT_CHANGE_THRESHOLD = 0.05


@dataclass(frozen=True)
class ChangeShape:
    """Binary map of the pixels altered at one time step."""

    mask: np.ndarray
    threshold: float

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)

    @property
    def empty(self) -> bool:
        return not bool(self.mask.any())


def change_shape(delta: ChangeMap, threshold: float = DEFAULT_CHANGE_THRESHOLD) -> ChangeShape:
    """Pixel is changed iff any channel moved by more than the threshold."""
    values = delta.values if isinstance(delta, ChangeMap) else np.asarray(delta)
    return ChangeShape(mask=(np.abs(values) > threshold).any(axis=-1), threshold=threshold)


def video_change_shapes(video: PaintingVideo, threshold: float = DEFAULT_CHANGE_THRESHOLD) -> list[ChangeShape]:
    arr = video.as_array()
    return [change_shape(arr[t] - arr[t - 1], threshold) for t in range(1, arr.shape[0])]


def iou(a: ChangeShape, b: ChangeShape) -> float:
    """Intersection over union; 1 when both masks are empty, 0 when exactly one is."""
    if a.mask.shape != b.mask.shape:
        raise ValueError(f"mask shapes differ: {a.mask.shape} vs {b.mask.shape}")
    if a.empty and b.empty:
        return 1.0
    union = np.logical_or(a.mask, b.mask).sum()
    if union == 0:
        return 1.0
    inter = np.logical_and(a.mask, b.mask).sum()
    return float(inter / union)


def video_l1(a: PaintingVideo, b: PaintingVideo) -> float:
    """Mean absolute difference over all frames and pixels."""
    if len(a) != len(b):
        raise ValueError(f"video lengths differ: {len(a)} vs {len(b)}")
    if a.frame_shape != b.frame_shape:
        raise ValueError(f"frame shapes differ: {a.frame_shape} vs {b.frame_shape}")
    return float(np.abs(a.as_array() - b.as_array()).mean())


def best_of_k_l1(real: PaintingVideo, sampler: Sampler, k: int) -> float:
    """Distance of the closest of k sampled videos to the real one."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return min(video_l1(real, sampler(i)) for i in range(k))


def change_iou_score(
    real: PaintingVideo,
    synth: PaintingVideo,
    threshold: float = DEFAULT_CHANGE_THRESHOLD,
) -> float:
    """Order-free change-shape similarity.

    Each real step's change shape is matched to the most similarly
    shaped synthesized step (max IOU over all synthesized steps,
    disregarding temporal order); the per-step maxima are averaged.
    """
    if len(real) != len(synth):
        raise ValueError(f"video lengths differ: {len(real)} vs {len(synth)}")
    real_shapes = video_change_shapes(real, threshold)
    synth_shapes = video_change_shapes(synth, threshold)
    return float(
        np.mean([max(iou(r, s) for s in synth_shapes) for r in real_shapes])
    )


def best_of_k_change_iou(
    real: PaintingVideo, sampler: Sampler, k: int, threshold: float = DEFAULT_CHANGE_THRESHOLD
) -> float:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return max(change_iou_score(real, sampler(i), threshold) for i in range(k))


@dataclass
class MetricsReport:
    """Per-method aggregates over all (video, crop) evaluation cells."""

    rows: dict[str, dict[str, float]]
    k: int
    crops_per_video: int
    seed: int
    n_cells: int
    skipped_videos: tuple[str, ...] = ()

    def render_text(self) -> str:
        lines = [f"{'Method':<10}  {'L1':>12}  {'Change IOU':>12}"]
        for method in sorted(self.rows):
            r = self.rows[method]
            lines.append(
                f"{method:<10}  {r['l1_mean']:.2f} ({r['l1_std']:.2f})"
                f"  {r['iou_mean']:.2f} ({r['iou_std']:.2f})"
            )
        lines.append(
            f"k={self.k}, crops_per_video={self.crops_per_video}, "
            f"cells={self.n_cells}, seed={self.seed}"
        )
        if self.skipped_videos:
            lines.append(f"skipped (no valid sequence): {', '.join(self.skipped_videos)}")
        return "\n".join(lines)

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", "l1_mean", "l1_std", "iou_mean", "iou_std"])
            for method in sorted(self.rows):
                r = self.rows[method]
                writer.writerow(
                    [method, r["l1_mean"], r["l1_std"], r["iou_mean"], r["iou_std"]]
                )


def method_ours(params: ModelParams) -> SamplerFactory:
    def factory(x_final: Frame, seed: int, steps: int) -> Sampler:
        def sample(i: int) -> PaintingVideo:
            req = SynthesisRequest(
                x_final=x_final, params=params, steps=steps, n_samples=1,
                seed=derive_seed(seed, str(i)),
            )
            return synthesize_video(req)

        return sample

    return factory


def method_interp() -> SamplerFactory:
    from .baselines import interp_video

    def factory(x_final: Frame, seed: int, steps: int) -> Sampler:
        video = interp_video(x_final, steps=steps)
        return lambda i: video

    return factory


def method_unet(unet_params) -> SamplerFactory:
    from .baselines import unet_predict

    def factory(x_final: Frame, seed: int, steps: int) -> Sampler:
        if steps != unet_params.out_frames:
            raise ValueError(
                f"unet baseline emits {unet_params.out_frames} frames, "
                f"evaluation wants {steps}"
            )
        video = unet_predict(x_final, unet_params)
        return lambda i: video

    return factory


def _cached(sampler: Sampler) -> Sampler:
    cache: dict[int, PaintingVideo] = {}

    def sample(i: int) -> PaintingVideo:
        if i not in cache:
            cache[i] = sampler(i)
        return cache[i]

    return sample


def last_test_sequence(video: PaintingVideo, cfg: ExtractionConfig) -> Optional[tuple[int, ...]]:
    """The latest valid sequence (ends nearest the completed painting)."""
    arr = video.as_array()
    if arr.shape[0] < cfg.sequence_length:
        return None
    count, meta = _count_table(arr, cfg)
    total = sum(count[cfg.sequence_length])
    if total == 0:
        return None
    return _unrank(total - 1, count, meta, arr.shape[0], cfg.sequence_length)


def _drop_leading_blank(video: PaintingVideo) -> PaintingVideo:
    return PaintingVideo(frames=video.frames[1:], id=video.id, medium=video.medium)


def evaluate_methods(
    test_videos: Sequence[PaintingVideo],
    methods: dict[str, SamplerFactory],
    k: int,
    crops_per_video: int = 5,
    seed: int = 0,
    extraction: Optional[ExtractionConfig] = None,
    crop_size: int = 50,
    change_threshold: float = DEFAULT_CHANGE_THRESHOLD,
    sequence_length: int = 40,
) -> MetricsReport:
    """Best-of-k metrics for every (video, crop, method) cell.

    One sequence is taken from each test video (the latest window
    passing the extraction criteria); methods synthesize from each
    crop's completed painting, and their leading blank frame is dropped
    to align lengths with the real sequence. Videos with no valid
    sequence are reported as skipped, never silently dropped.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    extraction = extraction or ExtractionConfig(
        gamma=1, epsilon=0, sequence_length=sequence_length
    )
    cells: dict[str, list[tuple[float, float]]] = {m: [] for m in methods}
    skipped: list[str] = []
    n_cells = 0
    for video in test_videos:
        seq = last_test_sequence(video, extraction)
        if seq is None:
            skipped.append(video.id)
            continue
        crops = extract_crops(video.final, crop_size)
        crop_rng = random.Random(derive_seed(seed, f"crops:{video.id}"))
        chosen = sorted(
            crop_rng.sample(range(len(crops)), min(crops_per_video, len(crops)))
        )
        seq_arr = video.as_array()[np.array(seq)]
        for idx in chosen:
            (r, c), crop_final = crops[idx]
            real = PaintingVideo(
                frames=tuple(
                    Frame(seq_arr[t, r : r + crop_size, c : c + crop_size])
                    for t in range(seq_arr.shape[0])
                ),
                id=f"{video.id}@{r},{c}",
            )
            n_cells += 1
            for name, factory in methods.items():
                method_seed = derive_seed(seed, f"{video.id}:{r},{c}:{name}")
                raw = _cached(factory(crop_final, method_seed, len(seq)))
                sampler: Sampler = lambda i, raw=raw: _drop_leading_blank(raw(i))
                l1 = best_of_k_l1(real, sampler, k)
                iou_best = best_of_k_change_iou(real, sampler, k, change_threshold)
                cells[name].append((l1, iou_best))
    rows = {}
    for name, values in cells.items():
        if values:
            arr = np.array(values)
            rows[name] = {
                "l1_mean": float(arr[:, 0].mean()),
                "l1_std": float(arr[:, 0].std()),
                "iou_mean": float(arr[:, 1].mean()),
                "iou_std": float(arr[:, 1].std()),
            }
    return MetricsReport(
        rows=rows,
        k=k,
        crops_per_video=crops_per_video,
        seed=seed,
        n_cells=n_cells,
        skipped_videos=tuple(skipped),
    )
