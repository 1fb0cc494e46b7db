"""Dataset pipeline.

Turns raw painting videos into training sequences and crops, splits
datasets by video, filters transient occluder frames, and generates
synthetic painting videos (with ground-truth region maps) for
desk-scale training and evaluation oracles.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

from .core import Frame, Medium, PaintingVideo, video_from_array
from .video_io import load_video, save_video

OCCLUDER_PIXEL_DELTA = 0.25
OCCLUDER_FRACTION = 0.20
OCCLUDER_REVERT_WINDOW = 2


@dataclass(frozen=True)
class ExtractionConfig:
    """Sequence sampling parameters: period, allowed deviation, change criterion."""

    gamma: int = 5
    epsilon: int = 2
    min_change_fraction: float = 0.01
    pixel_change_threshold: float = 0.05
    sequence_length: int = 3

    def __post_init__(self):
        if not (self.gamma > self.epsilon >= 0):
            raise ValueError(f"need gamma > epsilon >= 0, got {self.gamma}, {self.epsilon}")
        if not (0.0 < self.min_change_fraction <= 1.0):
            raise ValueError(f"min_change_fraction must be in (0, 1], got {self.min_change_fraction}")
        if not (0.0 < self.pixel_change_threshold < 1.0):
            raise ValueError(f"pixel_change_threshold must be in (0, 1), got {self.pixel_change_threshold}")
        if self.sequence_length < 2:
            raise ValueError(f"sequence_length must be >= 2, got {self.sequence_length}")

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "epsilon": self.epsilon,
            "min_change_fraction": self.min_change_fraction,
            "pixel_change_threshold": self.pixel_change_threshold,
            "sequence_length": self.sequence_length,
        }


@dataclass(frozen=True)
class IndexSequence:
    """Strictly increasing frame indices into one video."""

    video_id: str
    indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"indices must be strictly increasing, got {idx}")
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class DatasetSplit:
    """Per-video train/val/test assignment."""

    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def __post_init__(self):
        groups = [tuple(self.train), tuple(self.val), tuple(self.test)]
        seen: set[str] = set()
        for g in groups:
            if seen.intersection(g):
                raise ValueError("split groups must be disjoint")
            seen.update(g)
        object.__setattr__(self, "train", groups[0])
        object.__setattr__(self, "val", groups[1])
        object.__setattr__(self, "test", groups[2])

    def all_ids(self) -> set[str]:
        return set(self.train) | set(self.val) | set(self.test)

    def to_dict(self) -> dict:
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test)}


def pair_changes(a: np.ndarray, b: np.ndarray, cfg: ExtractionConfig) -> bool:
    """Whether enough pixels change between two frames (any channel above threshold)."""
    changed = (np.abs(a - b) > cfg.pixel_change_threshold).any(axis=-1)
    return bool(changed.mean() >= cfg.min_change_fraction)


def ingest_video(path: Path) -> PaintingVideo:
    """Load a frame-directory video, normalized to [0, 1]."""
    return load_video(path)


def filter_artifact_frames(
    video: PaintingVideo,
    filter_fn: Optional[Callable[[Frame], bool]] = None,
) -> PaintingVideo:
    """Drop occluded frames, preserving order.

    With ``filter_fn`` given, keeps frames where it returns True. The
    default heuristic drops frames that differ heavily from BOTH
    neighbors (>= 20% of pixels changed by more than 0.25) when the
    content reverts to the pre-occluder state within 2 frames.
    """
    frames = list(video.frames)
    if filter_fn is not None:
        kept = [f for f in frames if filter_fn(f)]
    else:
        arr = video.as_array()
        T = len(frames)

        def big_change(i: int, j: int) -> bool:
            changed = (np.abs(arr[i] - arr[j]) > OCCLUDER_PIXEL_DELTA).any(axis=-1)
            return bool(changed.mean() >= OCCLUDER_FRACTION)

        drop = set()
        for i in range(1, T - 1):
            if not (big_change(i - 1, i) and big_change(i, i + 1)):
                continue
            reverts = any(
                not big_change(i - 1, j)
                for j in range(i + 1, min(i + 1 + OCCLUDER_REVERT_WINDOW, T))
            )
            if reverts:
                drop.add(i)
        kept = [f for i, f in enumerate(frames) if i not in drop]
    if not kept:
        raise ValueError(f"every frame of video {video.id!r} was filtered out")
    return PaintingVideo(
        frames=tuple(kept),
        id=video.id,
        medium=video.medium,
        frame_period=video.frame_period,
    )


def _count_table(arr: np.ndarray, cfg: ExtractionConfig) -> tuple[list[list[int]], dict]:
    """count[k][i] = number of valid k-length suffixes starting at frame i."""
    T = arr.shape[0]
    L = cfg.sequence_length
    lo, hi = cfg.gamma - cfg.epsilon, cfg.gamma + cfg.epsilon
    ok_cache: dict[tuple[int, int], bool] = {}

    def ok(i: int, j: int) -> bool:
        key = (i, j)
        if key not in ok_cache:
            ok_cache[key] = pair_changes(arr[i], arr[j], cfg)
        return ok_cache[key]

    count: list[list[int]] = [[0] * T for _ in range(L + 1)]
    count[1] = [1] * T
    for k in range(2, L + 1):
        for i in range(T - 1, -1, -1):
            total = 0
            for j in range(i + lo, min(i + hi, T - 1) + 1):
                if count[k - 1][j] and ok(i, j):
                    total += count[k - 1][j]
            count[k][i] = total
    return count, {"lo": lo, "hi": hi, "ok": ok}


def _unrank(rank: int, count, meta, T: int, L: int) -> tuple[int, ...]:
    lo, hi, ok = meta["lo"], meta["hi"], meta["ok"]
    start = 0
    while rank >= count[L][start]:
        rank -= count[L][start]
        start += 1
    seq = [start]
    i = start
    for k in range(L - 1, 0, -1):
        for j in range(i + lo, min(i + hi, T - 1) + 1):
            if count[k][j] == 0 or not ok(i, j):
                continue
            if rank < count[k][j]:
                seq.append(j)
                i = j
                break
            rank -= count[k][j]
    return tuple(seq)


def _sample_ranks(total: int, k: int, rng: random.Random) -> list[int]:
    if total <= 2**62:
        return sorted(rng.sample(range(total), k))
    picked: set[int] = set()
    while len(picked) < k:
        picked.add(rng.randrange(total))
    return sorted(picked)


def extract_sequences(
    video: PaintingVideo,
    cfg: ExtractionConfig,
    count_limit: Optional[int] = None,
    seed: int = 0,
) -> list[IndexSequence]:
    """All frame-index sequences satisfying the period and change criteria.

    A reachability table over admissible gaps [gamma-epsilon,
    gamma+epsilon] is filled right to left; sequences are enumerated in
    lexicographic order. When more than ``count_limit`` exist, a uniform
    seeded sample of that many is returned (still in lexicographic
    order).
    """
    arr = video.as_array()
    T = arr.shape[0]
    L = cfg.sequence_length
    if T < L:
        return []
    count, meta = _count_table(arr, cfg)
    total = sum(count[L])
    if total == 0:
        return []
    if count_limit is not None and count_limit < total:
        ranks = _sample_ranks(total, count_limit, random.Random(seed))
    else:
        ranks = range(total)
    return [IndexSequence(video.id, _unrank(r, count, meta, T, L)) for r in ranks]


def validate_sequence(seq: IndexSequence, video: PaintingVideo, cfg: ExtractionConfig) -> bool:
    """Independently re-check every IndexSequence invariant from raw frames."""
    if len(seq) != cfg.sequence_length:
        return False
    arr = video.as_array()
    lo, hi = cfg.gamma - cfg.epsilon, cfg.gamma + cfg.epsilon
    for a, b in zip(seq.indices, seq.indices[1:]):
        if not (lo <= b - a <= hi):
            return False
        if b >= arr.shape[0] or not pair_changes(arr[a], arr[b], cfg):
            return False
    return True


def _grid_offsets(extent: int, crop: int) -> list[int]:
    n = math.ceil(extent / crop)
    if n == 1:
        return [0]
    span = extent - crop
    return [int(math.floor(i * span / (n - 1) + 0.5)) for i in range(n)]


def extract_crops(frame: Frame, crop: int = 50) -> list[tuple[tuple[int, int], Frame]]:
    """Minimal-overlap grid tiling of a frame into crop x crop patches."""
    h, w, _ = frame.shape
    if h < crop or w < crop:
        raise ValueError(f"frame {h}x{w} smaller than crop size {crop}")
    out = []
    for r in _grid_offsets(h, crop):
        for c in _grid_offsets(w, crop):
            out.append(((r, c), Frame(frame.pixels[r : r + crop, c : c + crop])))
    return out


def crop_video(video: PaintingVideo, offset: tuple[int, int], crop: int = 50) -> PaintingVideo:
    r, c = offset
    arr = video.as_array()[:, r : r + crop, c : c + crop]
    return video_from_array(
        arr, f"{video.id}@{r},{c}", medium=video.medium, frame_period=video.frame_period
    )


def split_dataset(ids: Iterable[str], seed: int = 0) -> DatasetSplit:
    """Deterministic 70:15:15 per-video split."""
    ids = sorted(set(ids))
    if len(ids) < 3:
        raise ValueError(f"need at least 3 video ids to split, got {len(ids)}")
    rng = random.Random(seed)
    rng.shuffle(ids)
    n = len(ids)
    n_val = int(n * 0.15 + 0.5)
    n_test = int(n * 0.15 + 0.5)
    return DatasetSplit(
        train=tuple(ids[: n - n_val - n_test]),
        val=tuple(ids[n - n_val - n_test : n - n_test]),
        test=tuple(ids[n - n_test :]),
    )


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for synthetic painting videos: Voronoi regions filled in a
    random order, coarse base coats first, fine detail strokes last."""

    canvas_size: int = 50
    region_count: tuple[int, int] = (3, 4)
    fill_steps: tuple[int, int] = (12, 16)
    detail_steps: tuple[int, int] = (6, 10)
    granularity: tuple[float, float] = (0.30, 0.08)
    min_sequence_frames: int = 41
    seed: int = 0

    def __post_init__(self):
        if self.canvas_size < 8:
            raise ValueError("canvas_size must be >= 8")
        for name in ("region_count", "fill_steps", "detail_steps"):
            lo, hi = getattr(self, name)
            if not (1 <= lo <= hi):
                raise ValueError(f"{name} range must satisfy 1 <= lo <= hi, got {(lo, hi)}")

    def to_dict(self) -> dict:
        return {
            "canvas_size": self.canvas_size,
            "region_count": list(self.region_count),
            "fill_steps": list(self.fill_steps),
            "detail_steps": list(self.detail_steps),
            "granularity": list(self.granularity),
            "min_sequence_frames": self.min_sequence_frames,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class SyntheticSample:
    video: PaintingVideo
    region_map: np.ndarray
    fill_order: tuple[int, ...]


def _voronoi_regions(size: int, n_regions: int, rng: np.random.Generator) -> np.ndarray:
    """Nearest-seed partition; seeds resampled until cells are reasonably even."""
    ys, xs = np.mgrid[0:size, 0:size]
    best = None
    best_min_area = -1.0
    for _ in range(50):
        pts = rng.uniform(0.12 * size, 0.88 * size, size=(n_regions, 2))
        d2 = (ys[..., None] - pts[:, 0]) ** 2 + (xs[..., None] - pts[:, 1]) ** 2
        region = np.argmin(d2, axis=-1).astype(np.int32)
        areas = np.bincount(region.ravel(), minlength=n_regions)
        min_area = areas.min() / (size * size)
        if min_area > best_min_area:
            best, best_min_area = region, min_area
        if min_area >= 0.6 / n_regions:
            break
    return best


def _region_chunks(
    region_mask: np.ndarray, n_chunks: int, min_chunk: int, rng: np.random.Generator
) -> list[np.ndarray]:
    """Split a region into blob-like paint chunks via noisy distance ordering."""
    coords = np.argwhere(region_mask)
    area = coords.shape[0]
    n_chunks = max(1, min(n_chunks, area // max(min_chunk, 1)))
    anchor = coords[rng.integers(area)]
    score = np.linalg.norm(coords - anchor, axis=1) + rng.normal(
        0.0, 0.10 * region_mask.shape[0], size=area
    )
    order = coords[np.argsort(score, kind="stable")]
    bounds = np.linspace(0, area, n_chunks + 1).round().astype(int)
    return [order[bounds[i] : bounds[i + 1]] for i in range(n_chunks)]


def _paint(canvas: np.ndarray, coords: np.ndarray, color: np.ndarray) -> None:
    canvas[coords[:, 0], coords[:, 1]] = color


def _detail_stroke(
    canvas: np.ndarray,
    region_map: np.ndarray,
    base_colors: np.ndarray,
    radius: float,
    min_pixels: int,
    threshold: float,
    rng: np.random.Generator,
) -> Optional[tuple[np.ndarray, np.ndarray]]:
    """One ellipse stroke within a single region, guaranteed to change enough pixels."""
    size = canvas.shape[0]
    ys, xs = np.mgrid[0:size, 0:size]
    for _ in range(30):
        r = int(rng.integers(region_map.max() + 1))
        inside = np.argwhere(region_map == r)
        cy, cx = inside[rng.integers(inside.shape[0])]
        ry = max(radius * (0.7 + 0.6 * rng.random()), 1.5)
        rx = max(radius * (0.7 + 0.6 * rng.random()), 1.5)
        ellipse = ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0
        mask = ellipse & (region_map == r)
        coords = np.argwhere(mask)
        if coords.shape[0] < min_pixels:
            continue
        current_mean = canvas[coords[:, 0], coords[:, 1]].mean(axis=0)
        magnitude = rng.uniform(0.08, 0.22, size=3)
        direction = np.where(current_mean < 0.5, 1.0, -1.0)
        color = np.clip(current_mean + direction * magnitude, 0.02, 0.98)
        changed = (
            np.abs(canvas[coords[:, 0], coords[:, 1]] - color) > threshold
        ).any(axis=-1)
        if changed.sum() >= min_pixels:
            return coords, color
    return None


def generate_synthetic_video(spec: SyntheticSpec, rng: np.random.Generator, video_id: str) -> SyntheticSample:
    size = spec.canvas_size
    min_chunk = max(1, math.ceil(0.011 * size * size))
    threshold = 0.05
    n_regions = int(rng.integers(spec.region_count[0], spec.region_count[1] + 1))
    region_map = _voronoi_regions(size, n_regions, rng)
    base_colors = rng.uniform(0.10, 0.80, size=(n_regions, 3))
    fill_order = tuple(int(r) for r in rng.permutation(n_regions))

    canvas = np.ones((size, size, 3))
    frames = [canvas.copy()]
    for r in fill_order:
        n_chunks = int(rng.integers(spec.fill_steps[0], spec.fill_steps[1] + 1))
        chunks = _region_chunks(region_map == r, n_chunks, min_chunk, rng)
        for chunk in chunks:
            shade = np.clip(base_colors[r] + rng.uniform(-0.06, 0.06, 3), 0.04, 0.86)
            _paint(canvas, chunk, shade)
            frames.append(canvas.copy())

    n_detail = int(rng.integers(spec.detail_steps[0], spec.detail_steps[1] + 1))
    n_detail = max(n_detail, spec.min_sequence_frames - len(frames) + 1)
    for k in range(n_detail):
        progress = k / max(n_detail - 1, 1)
        coarse, fine = spec.granularity
        radius = size * (coarse + (fine - coarse) * progress)
        stroke = _detail_stroke(canvas, region_map, base_colors, radius, min_chunk, threshold, rng)
        if stroke is None:
            continue
        coords, color = stroke
        _paint(canvas, coords, color)
        frames.append(canvas.copy())

    video = video_from_array(np.stack(frames), video_id, medium=Medium.SYNTHETIC)
    return SyntheticSample(video=video, region_map=region_map, fill_order=fill_order)


def generate_synthetic_dataset(spec: SyntheticSpec, n_videos: int) -> list[SyntheticSample]:
    """Seeded synthetic painting videos with ground-truth region maps."""
    seeds = np.random.SeedSequence(spec.seed).spawn(n_videos)
    return [
        generate_synthetic_video(spec, np.random.default_rng(seeds[i]), f"synth{i:04d}")
        for i in range(n_videos)
    ]


def region_fill_times(
    video: PaintingVideo,
    region_map: np.ndarray,
    painted_delta: float = 0.05,
    coverage: float = 0.5,
) -> np.ndarray:
    """First frame index at which each region counts as filled.

    A pixel is painted once any channel moved more than ``painted_delta``
    away from the blank canvas; a region is filled once at least
    ``coverage`` of its pixels are painted. Returns inf for regions never
    filled.
    """
    arr = video.as_array()
    n_regions = int(region_map.max()) + 1
    painted = (np.abs(arr - 1.0) > painted_delta).any(axis=-1)
    times = np.full(n_regions, np.inf)
    for r in range(n_regions):
        mask = region_map == r
        frac = painted[:, mask].mean(axis=1)
        hit = np.nonzero(frac >= coverage)[0]
        if hit.size:
            times[r] = hit[0]
    return times


def fill_ordering(
    video: PaintingVideo,
    region_map: np.ndarray,
    painted_delta: float = 0.05,
    coverage: float = 0.5,
) -> tuple[int, ...]:
    """Region ids sorted by first-fill time (ties broken by id)."""
    times = region_fill_times(video, region_map, painted_delta, coverage)
    ids = np.arange(times.shape[0])
    return tuple(int(r) for r in ids[np.lexsort((ids, times))])


def write_synthetic_dataset(root: Path, spec: SyntheticSpec, n_videos: int, split_seed: int = 0) -> DatasetSplit:
    """Materialize a synthetic dataset tree: videos/, truth/, split + spec manifests."""
    root = Path(root)
    samples = generate_synthetic_dataset(spec, n_videos)
    (root / "videos").mkdir(parents=True, exist_ok=True)
    (root / "truth").mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_video(s.video, root / "videos" / s.video.id)
        np.save(root / "truth" / f"{s.video.id}_regions.npy", s.region_map)
        (root / "truth" / f"{s.video.id}_fill_order.json").write_text(
            json.dumps(list(s.fill_order)) + "\n"
        )
    split = split_dataset([s.video.id for s in samples], seed=split_seed)
    (root / "split.json").write_text(json.dumps(split.to_dict(), indent=2, sort_keys=True) + "\n")
    (root / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return split


def load_dataset(root: Path) -> tuple[dict[str, PaintingVideo], DatasetSplit]:
    root = Path(root)
    split = DatasetSplit(**json.loads((root / "split.json").read_text()))
    videos = {}
    for vid_dir in sorted((root / "videos").iterdir()):
        if vid_dir.is_dir():
            v = load_video(vid_dir)
            videos[v.id] = v
    return videos, split


def load_region_map(root: Path, video_id: str) -> np.ndarray:
    return np.load(Path(root) / "truth" / f"{video_id}_regions.npy")


def write_sequence_index(path: Path, sequences: list[IndexSequence]) -> None:
    lines = [f"{s.video_id}\t{','.join(str(i) for i in s.indices)}" for s in sequences]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_sequence_index(path: Path) -> list[IndexSequence]:
    out = []
    for line in Path(path).read_text().splitlines():
        vid, idx = line.split("\t")
        out.append(IndexSequence(vid, tuple(int(i) for i in idx.split(","))))
    return out
