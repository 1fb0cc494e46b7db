"""Sampling painting time lapses from a trained model.

Synthesis starts from a blank canvas and recurrently applies generated
changes with latents drawn from the prior; the posterior encoder is
never consulted. Each sample is reproducible from a per-sample seed
derived from the request's master seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np
import torch

from .core import Frame, PaintingVideo, derive_seed, video_from_array
from .networks import ModelParams, make_rng


@dataclass(frozen=True)
class SynthesisRequest:
    x_final: Frame
    params: ModelParams
    steps: int = 40
    n_samples: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")


def _check_resolution(x_final: Frame, params: ModelParams) -> None:
    h, w, _ = x_final.shape
    if h != params.image_size or w != params.image_size:
        raise ValueError(
            f"painting is {h}x{w} but the model was trained at "
            f"{params.image_size}x{params.image_size}"
        )


def synthesize_video(req: SynthesisRequest, video_id: str | None = None) -> PaintingVideo:
    """One sampled progression: blank canvas to (ideally) the given painting."""
    _check_resolution(req.x_final, req.params)
    rng = make_rng(req.seed)
    dtype = next(req.params.generator.parameters()).dtype
    final = (
        torch.from_numpy(req.x_final.pixels).to(dtype).permute(2, 0, 1).unsqueeze(0)
    )
    x_hat = torch.ones_like(final)
    frames = [x_hat]
    with torch.no_grad():
        for _ in range(req.steps):
            z = torch.randn((1, req.params.latent_dim), generator=rng, dtype=dtype)
            delta = req.params.generator(z, x_hat, final)
            x_hat = torch.clamp(x_hat + delta, 0.0, 1.0)
            frames.append(x_hat)
    stack = torch.cat(frames, dim=0).permute(0, 2, 3, 1).double().numpy()
    return video_from_array(
        np.clip(stack, 0.0, 1.0), video_id or f"sample-{req.seed}"
    )


def iter_synthesized(req: SynthesisRequest) -> Iterator[PaintingVideo]:
    """Lazily yield n_samples independent videos with derived per-sample seeds."""
    for i in range(req.n_samples):
        sub = SynthesisRequest(
            x_final=req.x_final,
            params=req.params,
            steps=req.steps,
            n_samples=1,
            seed=derive_seed(req.seed, str(i)),
        )
        yield synthesize_video(sub, video_id=f"sample-{req.seed}-{i:04d}")


def synthesize_many(req: SynthesisRequest) -> list[PaintingVideo]:
    return list(iter_synthesized(req))
