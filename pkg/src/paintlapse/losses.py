"""Training objectives.

Latent KL term, change-map L1, perceptual feature distance, their
weighted pairwise combination, and the adversarial critic terms
(Wasserstein difference plus gradient penalty). Functions are pure and
operate on batched (N, C, H, W) tensors; the core value types are
accepted anywhere a tensor is, so the same code backs both the training
graph and the public API.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from .core import ChangeMap, Frame
from .networks import FeatureExtractor, GaussianParams, ModelParams

ImageLike = Union[Frame, ChangeMap, np.ndarray, torch.Tensor]


@dataclass(frozen=True)
class LossWeights:
    """Fixed noise/penalty hyperparameters of the combined objective."""

    sigma1: float = 0.01
    sigma2: float = 0.1
    gp_weight: float = 10.0

    def __post_init__(self):
        for name in ("sigma1", "sigma2", "gp_weight"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")

    @property
    def l1_weight(self) -> float:
        return 1.0 / self.sigma1

    @property
    def perceptual_weight(self) -> float:
        return 1.0 / (2.0 * self.sigma2**2)


def as_batched(x: ImageLike, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Coerce an image-like value to a (N, C, H, W) tensor."""
    if isinstance(x, torch.Tensor):
        if x.dim() == 3:
            return x.unsqueeze(0)
        if x.dim() != 4:
            raise ValueError(f"expected 3- or 4-dim tensor, got {x.dim()}")
        return x
    if isinstance(x, Frame):
        arr = x.pixels
    elif isinstance(x, ChangeMap):
        arr = x.values
    else:
        arr = np.asarray(x)
    arr = np.ascontiguousarray(arr)
    if not arr.flags.writeable:
        arr = arr.copy()
    t = torch.from_numpy(arr).to(dtype)
    if t.dim() == 3:
        return t.permute(2, 0, 1).unsqueeze(0)
    if t.dim() == 4:
        return t.permute(0, 3, 1, 2)
    raise ValueError(f"expected HxWxC or TxHxWxC array, got shape {tuple(arr.shape)}")


def _gaussian_tensors(g) -> tuple[torch.Tensor, torch.Tensor]:
    if isinstance(g, GaussianParams):
        return torch.from_numpy(g.mu), torch.from_numpy(g.logvar)
    mu, logvar = g
    if not isinstance(mu, torch.Tensor):
        mu = torch.as_tensor(mu, dtype=torch.float64)
    if not isinstance(logvar, torch.Tensor):
        logvar = torch.as_tensor(logvar, dtype=torch.float64)
    return mu, logvar


def kl_loss(g, textbook: bool = False) -> torch.Tensor:
    """Latent divergence term, summed over dimensions (mean over a batch).

    The default form is 0.5 * (-logvar + exp(logvar) + mu^2) per
    dimension; ``textbook`` subtracts the usual 1 per dimension, which
    shifts the value by a constant without changing gradients.
    """
    mu, logvar = _gaussian_tensors(g)
    per_dim = 0.5 * (-logvar + torch.exp(logvar) + mu**2)
    if textbook:
        per_dim = per_dim - 0.5
    if per_dim.dim() == 1:
        return per_dim.sum()
    return per_dim.sum(dim=-1).mean()


def delta_l1(delta: ImageLike, delta_hat: ImageLike) -> torch.Tensor:
    """Mean absolute elementwise difference between two change maps."""
    a = as_batched(delta)
    b = as_batched(delta_hat).to(a.dtype)
    if a.shape != b.shape:
        raise ValueError(f"change map shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def perceptual_l2(x_a: ImageLike, x_b: ImageLike, extractor: FeatureExtractor) -> torch.Tensor:
    """Mean squared distance between normalized feature stacks, averaged over depths."""
    dtype = next(extractor.parameters()).dtype
    a = as_batched(x_a, dtype).to(dtype)
    b = as_batched(x_b, dtype).to(dtype)
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    feats_a = extractor(a)
    feats_b = extractor(b)
    per_layer = [((fa - fb) ** 2).mean() for fa, fb in zip(feats_a, feats_b)]
    return torch.stack(per_layer).mean()


def pairwise_loss(
    delta: ImageLike,
    delta_hat: ImageLike,
    x_prev: ImageLike,
    g,
    extractor: FeatureExtractor,
    weights: LossWeights = LossWeights(),
    recon_scale: float = 1.0,
) -> tuple[torch.Tensor, dict]:
    """Combined single-step objective with its unweighted components.

    total = kl + (1/sigma1) * l1 + (1/(2 sigma2^2)) * perceptual, where the
    perceptual term compares the clamped reconstructions x_prev + delta
    and x_prev + delta_hat. ``recon_scale`` multiplies both reconstruction
    terms (used to isolate the KL term in diagnostics).
    """
    kl = kl_loss(g)
    l1 = delta_l1(delta, delta_hat)
    prev = as_batched(x_prev)
    d = as_batched(delta).to(prev.dtype)
    d_hat = as_batched(delta_hat).to(prev.dtype)
    frame_real = torch.clamp(prev + d, 0.0, 1.0)
    frame_hat = torch.clamp(prev + d_hat, 0.0, 1.0)
    perc = perceptual_l2(frame_real, frame_hat, extractor)
    total = kl + recon_scale * (
        weights.l1_weight * l1.to(kl.dtype) + weights.perceptual_weight * perc.to(kl.dtype)
    )
    return total, {"kl": kl, "l1": l1, "perceptual": perc}


def critic_wasserstein(real_score_mean, fake_score_mean) -> torch.Tensor:
    """Critic objective: fake mean minus real mean (the critic minimizes this)."""
    real = torch.as_tensor(real_score_mean)
    fake = torch.as_tensor(fake_score_mean)
    return fake - real


def gradient_penalty(
    critic,
    x_real: ImageLike,
    x_fake: ImageLike,
    x_prev: ImageLike,
    x_final: ImageLike,
    rng: torch.Generator,
    gp_weight: float = 10.0,
) -> torch.Tensor:
    """Penalty driving the critic's input-gradient norm toward 1.

    Scores a per-sample random interpolate between real and fake frames
    (conditioning frames fixed); the gradient is taken with respect to
    the interpolate only. ``critic`` is a callable (x, x_prev, x_final)
    -> per-sample scores, e.g. the critic network or ModelParams.
    """
    if isinstance(critic, ModelParams):
        critic = critic.critic
    real = as_batched(x_real)
    fake = as_batched(x_fake).to(real.dtype)
    prev = as_batched(x_prev).to(real.dtype)
    final = as_batched(x_final).to(real.dtype)
    u = torch.rand((real.shape[0], 1, 1, 1), generator=rng, dtype=real.dtype)
    interp = (u * real + (1.0 - u) * fake).detach().requires_grad_(True)
    scores = critic(interp, prev, final)
    grad = torch.autograd.grad(
        scores.sum(), interp, create_graph=torch.is_grad_enabled()
    )[0]
    norms = grad.flatten(start_dim=1).norm(dim=1)
    return gp_weight * ((norms - 1.0) ** 2).mean()


class MetricsLogger:
    """Line-oriented per-step metrics log: one ``step<TAB>name<TAB>value`` per line."""

    def __init__(self, path: Optional[Path] = None):
        self.path = Path(path) if path is not None else None
        self._fh = open(self.path, "a") if self.path is not None else None
        self.records: list[tuple[int, str, float]] = []

    def log(self, step: int, name: str, value: float) -> None:
        value = float(value)
        self.records.append((step, name, value))
        if self._fh is not None:
            self._fh.write(f"{step}\t{name}\t{value!r}\n")
            self._fh.flush()

    def log_many(self, step: int, values: dict) -> None:
        for name in sorted(values):
            self.log(step, name, values[name])

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path: Path) -> list[tuple[int, str, float]]:
    out = []
    for line in Path(path).read_text().splitlines():
        step, name, value = line.split("\t")
        out.append((int(step), name, float(value)))
    return out
