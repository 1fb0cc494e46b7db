"""Parametric function approximators.

Four networks: the change generator (conditioned on the previous frame,
the completed painting and a latent code), the diagonal-Gaussian
posterior encoder over that code, a conditional critic scoring frame
triples, and a fixed convolutional feature extractor used by the
perceptual loss. All applications are pure functions of (inputs,
parameters); there is no hidden state between calls.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ChangeMap, Frame, ShapeMismatchError

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0
CHECKPOINT_FORMAT_VERSION = 1
FEATURE_MIN_SIZE = 8


def make_rng(seed: int) -> torch.Generator:
    g = torch.Generator(device="cpu")
    g.manual_seed(int(seed))
    return g


def image_to_tensor(arr: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """HxWxC numpy image -> (1, C, H, W) tensor."""
    arr = np.ascontiguousarray(arr)
    if not arr.flags.writeable:
        arr = arr.copy()
    t = torch.from_numpy(arr).to(dtype)
    return t.permute(2, 0, 1).unsqueeze(0)


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    """(1, C, H, W) or (C, H, W) tensor -> HxWxC float64 numpy image."""
    if t.dim() == 4:
        t = t.squeeze(0)
    return t.detach().permute(1, 2, 0).cpu().numpy().astype(np.float64)


@dataclass(frozen=True)
class GaussianParams:
    """Diagonal-Gaussian posterior: mean and log-variance per latent dim."""

    mu: np.ndarray
    logvar: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        logvar = np.asarray(self.logvar, dtype=np.float64).reshape(-1)
        if mu.shape != logvar.shape:
            raise ValueError(f"mu length {mu.shape} != logvar length {logvar.shape}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(logvar))):
            raise ValueError("GaussianParams must be finite")
        if logvar.min() < LOGVAR_MIN or logvar.max() > LOGVAR_MAX:
            raise ValueError(
                f"logvar must lie in [{LOGVAR_MIN}, {LOGVAR_MAX}], got "
                f"[{logvar.min():.3g}, {logvar.max():.3g}]"
            )
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "logvar", logvar)

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


def _upsample_to(x: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, size=ref.shape[-2:], mode="nearest")


class DeltaGenerator(nn.Module):
    """Encoder-decoder predicting a bounded per-pixel change.

    Conditioning frames are channel-concatenated at the input; the latent
    code is broadcast spatially and concatenated at the bottleneck. Three
    stride-2 stages halve the spatial extent; skip connections feed the
    decoder; a tanh output bounds the change to [-1, 1] for any
    parameter values.
    """

    def __init__(self, latent_dim: int = 32, base_channels: int = 32):
        super().__init__()
        c = base_channels
        self.latent_dim = latent_dim
        self.enc_in = nn.Conv2d(6, c, 3, 1, 1)
        self.down1 = nn.Conv2d(c, 2 * c, 3, 2, 1)
        self.down2 = nn.Conv2d(2 * c, 4 * c, 3, 2, 1)
        self.down3 = nn.Conv2d(4 * c, 4 * c, 3, 2, 1)
        self.bottleneck = nn.Conv2d(4 * c + latent_dim, 4 * c, 3, 1, 1)
        self.up3 = nn.Conv2d(4 * c + 4 * c, 4 * c, 3, 1, 1)
        self.up2 = nn.Conv2d(4 * c + 2 * c, 2 * c, 3, 1, 1)
        self.up1 = nn.Conv2d(2 * c + c, c, 3, 1, 1)
        self.out = nn.Conv2d(c, 3, 3, 1, 1)

    def forward(self, z: torch.Tensor, x_prev: torch.Tensor, x_final: torch.Tensor) -> torch.Tensor:
        act = lambda t: F.leaky_relu(t, 0.2)
        h0 = act(self.enc_in(torch.cat([x_prev, x_final], dim=1)))
        h1 = act(self.down1(h0))
        h2 = act(self.down2(h1))
        h3 = act(self.down3(h2))
        zb = z.view(z.shape[0], self.latent_dim, 1, 1).expand(-1, -1, h3.shape[2], h3.shape[3])
        b = act(self.bottleneck(torch.cat([h3, zb], dim=1)))
        u3 = act(self.up3(torch.cat([_upsample_to(b, h2), h2], dim=1)))
        u2 = act(self.up2(torch.cat([_upsample_to(u3, h1), h1], dim=1)))
        u1 = act(self.up1(torch.cat([_upsample_to(u2, h0), h0], dim=1)))
        return torch.tanh(self.out(u1))


class PosteriorEncoder(nn.Module):
    """Recognition network: (change, prev frame, final frame) -> (mu, logvar)."""

    def __init__(self, latent_dim: int = 32, base_channels: int = 32):
        super().__init__()
        c = base_channels
        self.latent_dim = latent_dim
        self.enc_in = nn.Conv2d(9, c, 3, 1, 1)
        self.down1 = nn.Conv2d(c, 2 * c, 3, 2, 1)
        self.down2 = nn.Conv2d(2 * c, 4 * c, 3, 2, 1)
        self.down3 = nn.Conv2d(4 * c, 4 * c, 3, 2, 1)
        self.head = nn.Linear(4 * c, 2 * latent_dim)

    def forward(self, delta: torch.Tensor, x_prev: torch.Tensor, x_final: torch.Tensor):
        act = lambda t: F.leaky_relu(t, 0.2)
        h = act(self.enc_in(torch.cat([delta, x_prev, x_final], dim=1)))
        h = act(self.down1(h))
        h = act(self.down2(h))
        h = act(self.down3(h))
        pooled = h.mean(dim=(2, 3))
        out = self.head(pooled)
        mu, logvar = out.chunk(2, dim=1)
        return mu, torch.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX)


class Critic(nn.Module):
    """Conditional critic on (frame, previous frame, completed painting).

    Strided convolutions only, no normalization layers (the gradient
    penalty needs per-sample gradients), smooth activations so the score
    is twice differentiable in its inputs.
    """

    def __init__(self, base_channels: int = 32):
        super().__init__()
        c = base_channels
        self.conv1 = nn.Conv2d(9, c, 4, 2, 1)
        self.conv2 = nn.Conv2d(c, 2 * c, 4, 2, 1)
        self.conv3 = nn.Conv2d(2 * c, 4 * c, 4, 2, 1)
        self.out = nn.Conv2d(4 * c, 1, 3, 1, 1)

    def forward(self, x: torch.Tensor, x_prev: torch.Tensor, x_final: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.conv1(torch.cat([x, x_prev, x_final], dim=1)))
        h = F.silu(self.conv2(h))
        h = F.silu(self.conv3(h))
        return self.out(h).mean(dim=(1, 2, 3))


class FeatureExtractor(nn.Module):
    """Fixed convolutional feature stack for perceptual distances.

    ``seeded-random`` mode (default) builds a frozen, seeded random conv
    pyramid so results are hermetic and identical across processes;
    ``pretrained`` mode reuses an externally supplied VGG16. Three feature
    depths are exposed; every spatial location's channel vector is
    L2-normalized to unit length (zero vectors stay zero).
    """

    def __init__(self, mode: str = "seeded-random", seed: int = 0):
        super().__init__()
        if mode not in ("seeded-random", "pretrained"):
            raise ValueError(f"unknown feature extractor mode: {mode}")
        self.mode = mode
        self.seed = int(seed)
        if mode == "seeded-random":
            g = make_rng(self.seed)
            self.conv1 = self._seeded_conv(3, 16, g)
            self.conv2 = self._seeded_conv(16, 32, g, stride=2)
            self.conv3 = self._seeded_conv(32, 64, g, stride=2)
            self._slices = None
        else:
            try:
                from torchvision.models import VGG16_Weights, vgg16
                feats = vgg16(weights=VGG16_Weights.IMAGENET1K_V1).features
            except Exception as exc:
                raise RuntimeError(
                    "pretrained feature extractor requires torchvision VGG16 "
                    f"weights to be available locally: {exc}"
                ) from exc
            self._slices = nn.ModuleList(
                [feats[:4], feats[4:9], feats[9:16]]  # relu1_2, relu2_2, relu3_3
            )
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @staticmethod
    def _seeded_conv(cin: int, cout: int, g: torch.Generator, stride: int = 1) -> nn.Conv2d:
        conv = nn.Conv2d(cin, cout, 3, stride, 1)
        std = (2.0 / (cin * 9 + cout * 9)) ** 0.5
        with torch.no_grad():
            conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * std)
            conv.bias.copy_(torch.randn(conv.bias.shape, generator=g) * 0.1)
        return conv

    @staticmethod
    def _unit_normalize(feat: torch.Tensor) -> torch.Tensor:
        norm = torch.linalg.vector_norm(feat, dim=1, keepdim=True)
        return feat / torch.where(norm > 0, norm, torch.ones_like(norm))

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.shape[-1] < FEATURE_MIN_SIZE or x.shape[-2] < FEATURE_MIN_SIZE:
            raise ValueError(
                f"input {tuple(x.shape[-2:])} below feature extractor minimum "
                f"size {FEATURE_MIN_SIZE}x{FEATURE_MIN_SIZE}"
            )
        feats = []
        if self.mode == "seeded-random":
            h = torch.tanh(self.conv1(x))
            feats.append(h)
            h = torch.tanh(self.conv2(h))
            feats.append(h)
            h = torch.tanh(self.conv3(h))
            feats.append(h)
        else:
            h = x
            for sl in self._slices:
                h = sl(h)
                feats.append(h)
        return [self._unit_normalize(f) for f in feats]


@dataclass
class ModelParams:
    """The three trainable parameter collections plus construction metadata."""

    generator: DeltaGenerator
    posterior: PosteriorEncoder
    critic: Critic
    latent_dim: int
    seed: int
    base_channels: int
    image_size: int

    def arch(self) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "base_channels": self.base_channels,
            "image_size": self.image_size,
            "seed": self.seed,
        }

    def generator_param_count(self) -> int:
        return sum(p.numel() for p in self.generator.parameters()) + sum(
            p.numel() for p in self.posterior.parameters()
        )


def init_model_params(
    latent_dim: int = 32,
    base_channels: int = 32,
    image_size: int = 50,
    seed: int = 0,
) -> ModelParams:
    if latent_dim < 1:
        raise ValueError(f"latent_dim must be >= 1, got {latent_dim}")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        generator = DeltaGenerator(latent_dim, base_channels)
        posterior = PosteriorEncoder(latent_dim, base_channels)
        critic = Critic(base_channels)
    return ModelParams(
        generator=generator,
        posterior=posterior,
        critic=critic,
        latent_dim=latent_dim,
        seed=seed,
        base_channels=base_channels,
        image_size=image_size,
    )


def _check_pair(x_prev: Frame, x_final: Frame) -> None:
    if x_prev.shape != x_final.shape:
        raise ShapeMismatchError(
            f"x_prev shape {x_prev.shape} != x_final shape {x_final.shape}"
        )


def _param_dtype(module: nn.Module) -> torch.dtype:
    return next(module.parameters()).dtype


def generate_delta(z: np.ndarray, x_prev: Frame, x_final: Frame, params: ModelParams) -> ChangeMap:
    """Predict the change applied on top of x_prev, given latent z."""
    _check_pair(x_prev, x_final)
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if z.shape[0] != params.latent_dim:
        raise ValueError(f"latent length {z.shape[0]} != latent_dim {params.latent_dim}")
    dtype = _param_dtype(params.generator)
    with torch.no_grad():
        out = params.generator(
            torch.from_numpy(z).to(dtype).unsqueeze(0),
            image_to_tensor(x_prev.pixels, dtype),
            image_to_tensor(x_final.pixels, dtype),
        )
    return ChangeMap(tensor_to_image(out))


def encode_posterior(delta: ChangeMap, x_prev: Frame, x_final: Frame, params: ModelParams) -> GaussianParams:
    """Approximate posterior over the latent code for an observed change."""
    _check_pair(x_prev, x_final)
    if delta.shape != x_prev.shape:
        raise ShapeMismatchError(f"delta shape {delta.shape} != frame shape {x_prev.shape}")
    dtype = _param_dtype(params.posterior)
    with torch.no_grad():
        mu, logvar = params.posterior(
            image_to_tensor(delta.values, dtype),
            image_to_tensor(x_prev.pixels, dtype),
            image_to_tensor(x_final.pixels, dtype),
        )
    return GaussianParams(mu.squeeze(0).double().numpy(), logvar.squeeze(0).double().numpy())


def reparameterize(g: GaussianParams, rng: torch.Generator) -> np.ndarray:
    """z = mu + exp(0.5 * logvar) * n with n drawn standard normal from rng."""
    n = torch.randn(g.dim, generator=rng, dtype=torch.float64).numpy()
    return g.mu + np.exp(0.5 * g.logvar) * n


def sample_prior(latent_dim: int, rng: torch.Generator) -> np.ndarray:
    """I.i.d. standard-normal latent vector."""
    if latent_dim < 1:
        raise ValueError(f"latent_dim must be >= 1, got {latent_dim}")
    return torch.randn(latent_dim, generator=rng, dtype=torch.float64).numpy()


def critic_score(x_t: Frame, x_prev: Frame, x_final: Frame, params: ModelParams) -> float:
    """Scalar realism score of a frame triple under the current critic."""
    _check_pair(x_prev, x_final)
    if x_t.shape != x_prev.shape:
        raise ShapeMismatchError(f"x_t shape {x_t.shape} != frame shape {x_prev.shape}")
    dtype = _param_dtype(params.critic)
    with torch.no_grad():
        score = params.critic(
            image_to_tensor(x_t.pixels, dtype),
            image_to_tensor(x_prev.pixels, dtype),
            image_to_tensor(x_final.pixels, dtype),
        )
    return float(score.item())


def extract_features(x: Frame, extractor: FeatureExtractor) -> list[np.ndarray]:
    """Normalized feature maps of a frame, one (C, h, w) array per depth."""
    dtype = _param_dtype(extractor)
    with torch.no_grad():
        feats = extractor(image_to_tensor(x.pixels, dtype))
    return [f.squeeze(0).double().numpy() for f in feats]


def save_checkpoint(
    path: Path,
    params: ModelParams,
    train_config: Optional[dict] = None,
    extra: Optional[dict] = None,
) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "arch": params.arch(),
        "generator": params.generator.state_dict(),
        "posterior": params.posterior.state_dict(),
        "critic": params.critic.state_dict(),
        "train_config": train_config,
        "extra": extra,
    }
    torch.save(payload, path)


def load_checkpoint(path: Path) -> tuple[ModelParams, Optional[dict], Optional[dict]]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(
            f"unsupported checkpoint format version {version!r} "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    params = init_model_params(**payload["arch"])
    params.generator.load_state_dict(payload["generator"])
    params.posterior.load_state_dict(payload["posterior"])
    params.critic.load_state_dict(payload["critic"])
    return params, payload.get("train_config"), payload.get("extra")
