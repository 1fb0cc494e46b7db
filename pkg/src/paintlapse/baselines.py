"""Reference methods for evaluation.

``interp`` linearly fades from a blank canvas to the painting. ``unet``
is a deterministic encoder-decoder that decodes the whole 40-frame
video at once from the painting, trained with the same image-similarity
losses as the main model but with no latent variable and no critic.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import Frame, PaintingVideo, derive_seed, video_from_array
from .losses import MetricsLogger, delta_l1, perceptual_l2
from .networks import FeatureExtractor, make_rng
from .training import TrainConfig, TrainingData, TrainingDiverged, _stack_frames

UNET_FORMAT_VERSION = 1
PARAM_PARITY_TOLERANCE = 0.20


class VideoUnet(nn.Module):
    """Encoder-decoder with skips mapping one painting to a full frame stack."""

    def __init__(self, base_channels: int, out_frames: int = 40):
        super().__init__()
        c = base_channels
        self.out_frames = out_frames
        self.enc_in = nn.Conv2d(3, c, 3, 1, 1)
        self.down1 = nn.Conv2d(c, 2 * c, 3, 2, 1)
        self.down2 = nn.Conv2d(2 * c, 4 * c, 3, 2, 1)
        self.down3 = nn.Conv2d(4 * c, 4 * c, 3, 2, 1)
        self.mid = nn.Conv2d(4 * c, 4 * c, 3, 1, 1)
        self.up3 = nn.Conv2d(4 * c + 4 * c, 4 * c, 3, 1, 1)
        self.up2 = nn.Conv2d(4 * c + 2 * c, 2 * c, 3, 1, 1)
        self.up1 = nn.Conv2d(2 * c + c, c, 3, 1, 1)
        self.out = nn.Conv2d(c, 3 * out_frames, 3, 1, 1)

    def forward(self, x_final: torch.Tensor) -> torch.Tensor:
        act = lambda t: F.leaky_relu(t, 0.2)
        up = lambda t, ref: F.interpolate(t, size=ref.shape[-2:], mode="nearest")
        h0 = act(self.enc_in(x_final))
        h1 = act(self.down1(h0))
        h2 = act(self.down2(h1))
        h3 = act(self.down3(h2))
        b = act(self.mid(h3))
        u3 = act(self.up3(torch.cat([up(b, h2), h2], dim=1)))
        u2 = act(self.up2(torch.cat([up(u3, h1), h1], dim=1)))
        u1 = act(self.up1(torch.cat([up(u2, h0), h0], dim=1)))
        frames = torch.sigmoid(self.out(u1))
        b_, _, h, w = frames.shape
        return frames.view(b_, self.out_frames, 3, h, w)


@dataclass
class UnetBaselineParams:
    """Trained whole-video decoder; output length fixed at construction."""

    model: VideoUnet
    base_channels: int
    out_frames: int
    image_size: int
    reference_param_count: int

    def param_count(self) -> int:
        return sum(p.numel() for p in self.model.parameters())


def _unet_count(base_channels: int, out_frames: int) -> int:
    with torch.random.fork_rng():
        torch.manual_seed(0)
        return sum(p.numel() for p in VideoUnet(base_channels, out_frames).parameters())


def init_unet_baseline(
    reference_param_count: int,
    image_size: int,
    out_frames: int = 40,
    seed: int = 0,
) -> UnetBaselineParams:
    """Build the baseline with width chosen to match the main model's size.

    The parameter count must land within +/-20% of the reference
    (generator plus posterior); construction fails otherwise.
    """
    best_c, best_err = None, None
    for c in range(4, 129):
        err = abs(_unet_count(c, out_frames) - reference_param_count)
        if best_err is None or err < best_err:
            best_c, best_err = c, err
    count = _unet_count(best_c, out_frames)
    rel = abs(count - reference_param_count) / reference_param_count
    if rel > PARAM_PARITY_TOLERANCE:
        raise ValueError(
            f"cannot match parameter budget: best unet has {count} params vs "
            f"reference {reference_param_count} ({rel:.1%} off)"
        )
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = VideoUnet(best_c, out_frames)
    return UnetBaselineParams(
        model=model,
        base_channels=best_c,
        out_frames=out_frames,
        image_size=image_size,
        reference_param_count=reference_param_count,
    )


def interp_video(x_final: Frame, steps: int = 40) -> PaintingVideo:
    """Linear fade from blank to the painting; exact in double precision."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    blank = np.ones_like(x_final.pixels)
    # affine combination keeps both endpoints exact in floating point
    frames = [
        (1.0 - t / steps) * blank + (t / steps) * x_final.pixels
        for t in range(steps + 1)
    ]
    return video_from_array(np.stack(frames), "interp")


def unet_train(
    unet: UnetBaselineParams,
    data: TrainingData,
    cfg: TrainConfig,
    extractor: FeatureExtractor,
    steps: int = 500,
    logger: Optional[MetricsLogger] = None,
    seed: int = 0,
) -> UnetBaselineParams:
    """Fit the deterministic whole-video decoder on tau-length sequences."""
    if not data.tau_sequences:
        raise ValueError(f"no length-{unet.out_frames} sequences available")
    opt = torch.optim.Adam(unet.model.parameters(), lr=1e-3)
    rng = np.random.default_rng(derive_seed(seed, "unet"))
    w = cfg.weights
    for step in range(steps):
        chosen = [
            data.tau_sequences[rng.integers(len(data.tau_sequences))]
            for _ in range(cfg.sample_batch_size)
        ]
        target = np.stack(
            [data.videos[s.video_id][np.array(s.indices)] for s in chosen]
        )
        target_t = torch.from_numpy(target).permute(0, 1, 4, 2, 3)
        finals = _stack_frames([data.finals[s.video_id] for s in chosen])
        pred = unet.model(finals)
        flat_pred = pred.reshape(-1, *pred.shape[2:])
        flat_target = target_t.reshape(-1, *target_t.shape[2:])
        l1 = (flat_pred - flat_target).abs().mean(dim=(1, 2, 3)).sum() / pred.shape[0]
        perc = perceptual_l2(flat_pred, flat_target, extractor) * unet.out_frames
        loss = w.l1_weight * l1 + w.perceptual_weight * perc
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite unet loss at step {step}")
        if logger is not None:
            logger.log(step, "unet/total", loss.item())
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return unet


def unet_predict(x_final: Frame, unet: UnetBaselineParams) -> PaintingVideo:
    """Deterministic 40-frame prediction with a blank frame prepended."""
    h, w, _ = x_final.shape
    if h != unet.image_size or w != unet.image_size:
        raise ValueError(
            f"painting is {h}x{w} but the baseline was trained at "
            f"{unet.image_size}x{unet.image_size}"
        )
    dtype = next(unet.model.parameters()).dtype
    final = torch.from_numpy(x_final.pixels).to(dtype).permute(2, 0, 1).unsqueeze(0)
    with torch.no_grad():
        pred = unet.model(final)[0]
    stack = pred.permute(0, 2, 3, 1).double().numpy()
    blank = np.ones((1, h, w, 3))
    return video_from_array(
        np.clip(np.concatenate([blank, stack]), 0.0, 1.0), "unet"
    )


def save_unet(path: Path, unet: UnetBaselineParams) -> None:
    torch.save(
        {
            "format_version": UNET_FORMAT_VERSION,
            "kind": "unet-baseline",
            "base_channels": unet.base_channels,
            "out_frames": unet.out_frames,
            "image_size": unet.image_size,
            "reference_param_count": unet.reference_param_count,
            "model": unet.model.state_dict(),
        },
        path,
    )


def load_unet(path: Path) -> UnetBaselineParams:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format_version") != UNET_FORMAT_VERSION or payload.get("kind") != "unet-baseline":
        raise ValueError(f"not a supported unet baseline checkpoint: {path}")
    with torch.random.fork_rng():
        torch.manual_seed(0)
        model = VideoUnet(payload["base_channels"], payload["out_frames"])
    model.load_state_dict(payload["model"])
    return UnetBaselineParams(
        model=model,
        base_channels=payload["base_channels"],
        out_frames=payload["out_frames"],
        image_size=payload["image_size"],
        reference_param_count=payload["reference_param_count"],
    )
