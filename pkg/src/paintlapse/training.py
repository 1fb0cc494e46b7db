"""Three-stage optimization.

Stage one fits single-step changes (posterior-sampled latents). Stage
two rolls the model out over short sequences, feeding it its own
predictions. Stage three rolls out from a blank canvas with
prior-sampled latents, supervised by a conditional critic on every step
and by image similarity against the completed painting at the final
step. A full run executes stage one then alternates the two sequential
modes in blocks.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .core import ChangeMap, Frame, PaintingVideo, derive_seed, frame_delta
from .datapipe import ExtractionConfig, IndexSequence, extract_sequences, pair_changes
from .losses import (
    LossWeights,
    MetricsLogger,
    critic_wasserstein,
    delta_l1,
    kl_loss,
    perceptual_l2,
)
from .networks import (
    FeatureExtractor,
    ModelParams,
    init_model_params,
    make_rng,
    save_checkpoint,
    load_checkpoint,
)

CRITIC_SCORE_LIMIT = 1e6


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite or the critic blows up."""

    def __init__(self, message: str, snapshot_path: Optional[Path] = None):
        if snapshot_path is not None:
            message = f"{message} (diagnostic snapshot: {snapshot_path})"
        super().__init__(message)
        self.snapshot_path = snapshot_path


@dataclass(frozen=True)
class TrainConfig:
    """All optimization hyperparameters, serializable for reproducibility."""

    weights: LossWeights = LossWeights()
    tau: int = 40
    seq_lengths: tuple[int, ...] = (3, 5)
    critic_iters: int = 5
    latent_dim: int = 32
    base_channels: int = 32
    image_size: int = 50
    batch_size: int = 8
    seq_batch_size: int = 4
    sample_batch_size: int = 2
    learning_rate: float = 1e-4
    critic_learning_rate: float = 1e-4
    pairwise_steps: int = 2000
    seq_cvae_steps: int = 1000
    seq_sample_steps: int = 400
    alternation_ratio: tuple[int, int] = (1, 1)
    alternation_block: int = 200
    starter_prob: float = 0.1
    recon_scale: float = 1.0
    bootstrap_steps: int = 1000
    adversarial_weight: float = 1.0
    sample_learning_rate: Optional[float] = None
    grad_clip: float = 1.0
    feature_mode: str = "seeded-random"
    feature_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        lengths = tuple(int(s) for s in self.seq_lengths)
        object.__setattr__(self, "seq_lengths", lengths)
        object.__setattr__(self, "alternation_ratio", tuple(self.alternation_ratio))
        if not lengths or min(lengths) < 2:
            raise ValueError(f"seq_lengths must all be >= 2, got {lengths}")
        if self.tau < max(lengths):
            raise ValueError(f"tau ({self.tau}) must be >= max seq length ({max(lengths)})")
        if self.critic_iters < 1:
            raise ValueError("critic_iters must be >= 1")
        if min(self.alternation_ratio) < 1:
            raise ValueError("alternation_ratio entries must be >= 1")

    def to_dict(self) -> dict:
        d = {
            "sigma1": self.weights.sigma1,
            "sigma2": self.weights.sigma2,
            "gp_weight": self.weights.gp_weight,
        }
        for name in (
            "tau", "seq_lengths", "critic_iters", "latent_dim", "base_channels",
            "image_size", "batch_size", "seq_batch_size", "sample_batch_size",
            "learning_rate", "critic_learning_rate", "pairwise_steps",
            "seq_cvae_steps", "seq_sample_steps", "alternation_ratio",
            "alternation_block", "starter_prob", "recon_scale",
            "bootstrap_steps", "adversarial_weight", "sample_learning_rate",
            "grad_clip", "feature_mode", "feature_seed", "seed",
        ):
            value = getattr(self, name)
            d[name] = list(value) if isinstance(value, tuple) else value
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        weights = LossWeights(
            sigma1=d.pop("sigma1", 0.01),
            sigma2=d.pop("sigma2", 0.1),
            gp_weight=d.pop("gp_weight", 10.0),
        )
        for key in ("seq_lengths", "alternation_ratio"):
            if key in d:
                d[key] = tuple(d[key])
        return TrainConfig(weights=weights, **d)


@dataclass
class TrainingData:
    """Tensor-ready views of a video dataset plus its extracted sequences."""

    videos: dict[str, np.ndarray]            # id -> (T, H, W, 3) float32
    finals: dict[str, np.ndarray]            # id -> (H, W, 3) float32
    seq_by_length: dict[int, list[IndexSequence]]
    tau_sequences: list[IndexSequence]
    starter_targets: dict[str, int]          # blank-start id -> first painted frame

    @property
    def pairs(self) -> list[tuple[str, int, int]]:
        out = []
        for seqs in self.seq_by_length.values():
            for s in seqs:
                out.extend((s.video_id, a, b) for a, b in zip(s.indices, s.indices[1:]))
        return out


def prepare_training_data(
    videos: list[PaintingVideo],
    extraction: ExtractionConfig,
    cfg: TrainConfig,
    per_video_limit: int = 64,
    tau_per_video_limit: int = 8,
) -> TrainingData:
    arrays = {v.id: v.as_array().astype(np.float32) for v in videos}
    finals = {vid: arr[-1] for vid, arr in arrays.items()}
    seq_by_length: dict[int, list[IndexSequence]] = {}
    for length in cfg.seq_lengths:
        cfg_l = replace(extraction, sequence_length=length)
        seqs: list[IndexSequence] = []
        for v in videos:
            seqs.extend(
                extract_sequences(
                    v, cfg_l, count_limit=per_video_limit,
                    seed=derive_seed(cfg.seed, f"seq{length}:{v.id}"),
                )
            )
        seq_by_length[length] = seqs
    cfg_tau = replace(extraction, sequence_length=cfg.tau)
    tau_sequences: list[IndexSequence] = []
    for v in videos:
        tau_sequences.extend(
            extract_sequences(
                v, cfg_tau, count_limit=tau_per_video_limit,
                seed=derive_seed(cfg.seed, f"tau:{v.id}"),
            )
        )
    starter_targets = {}
    for v in videos:
        if not v.starts_blank():
            continue
        arr = arrays[v.id]
        for t in range(1, arr.shape[0]):
            if pair_changes(arr[0], arr[t], extraction):
                starter_targets[v.id] = t
                break
    return TrainingData(
        videos=arrays,
        finals=finals,
        seq_by_length=seq_by_length,
        tau_sequences=tau_sequences,
        starter_targets=starter_targets,
    )


def make_pairwise_batch(
    sequences: list[IndexSequence],
    videos: dict[str, PaintingVideo],
    rng: Optional[random.Random] = None,
) -> list[tuple[Frame, ChangeMap, Frame]]:
    """Consecutive-frame training triples (x_prev, delta, x_final).

    Every adjacent pair of each sequence is emitted; videos that start
    from a blank canvas additionally contribute one starter triple
    teaching the model how to begin a painting.
    """
    batch: list[tuple[Frame, ChangeMap, Frame]] = []
    for seq in sequences:
        video = videos[seq.video_id]
        x_final = video.final
        for a, b in zip(seq.indices, seq.indices[1:]):
            prev, curr = video.frames[a], video.frames[b]
            batch.append((prev, frame_delta(curr, prev), x_final))
    seen = set()
    for seq in sequences:
        video = videos[seq.video_id]
        if video.id in seen or not video.starts_blank():
            continue
        seen.add(video.id)
        first = video.frames[1] if len(video) > 1 else video.frames[0]
        blank = Frame(np.ones_like(first.pixels))
        batch.append((blank, frame_delta(first, blank), video.final))
    if rng is not None:
        rng.shuffle(batch)
    return batch


@dataclass
class TrainState:
    """Mutable optimization state; checkpointable and bit-compatibly resumable."""

    params: ModelParams
    extractor: FeatureExtractor
    opt_generator: torch.optim.Adam
    opt_critic: torch.optim.Adam
    steps: dict[str, int]
    np_rng: np.random.Generator
    torch_rng: torch.Generator


def init_train_state(cfg: TrainConfig) -> TrainState:
    params = init_model_params(
        latent_dim=cfg.latent_dim,
        base_channels=cfg.base_channels,
        image_size=cfg.image_size,
        seed=cfg.seed,
    )
    extractor = FeatureExtractor(cfg.feature_mode, cfg.feature_seed)
    opt_generator = torch.optim.Adam(
        list(params.generator.parameters()) + list(params.posterior.parameters()),
        lr=cfg.learning_rate,
    )
    opt_critic = torch.optim.Adam(
        params.critic.parameters(), lr=cfg.critic_learning_rate, betas=(0.5, 0.9)
    )
    return TrainState(
        params=params,
        extractor=extractor,
        opt_generator=opt_generator,
        opt_critic=opt_critic,
        steps={"pairwise": 0, "seq_cvae": 0, "seq_sample": 0, "global": 0},
        np_rng=np.random.default_rng(derive_seed(cfg.seed, "data")),
        torch_rng=make_rng(derive_seed(cfg.seed, "noise")),
    )


def save_train_state(path: Path, state: TrainState, cfg: TrainConfig) -> None:
    extra = {
        "opt_generator": state.opt_generator.state_dict(),
        "opt_critic": state.opt_critic.state_dict(),
        "steps": dict(state.steps),
        "np_rng_state": state.np_rng.bit_generator.state,
        "torch_rng_state": state.torch_rng.get_state(),
    }
    save_checkpoint(path, state.params, train_config=cfg.to_dict(), extra=extra)


def load_train_state(path: Path) -> tuple[TrainState, TrainConfig]:
    params, cfg_dict, extra = load_checkpoint(path)
    cfg = TrainConfig.from_dict(cfg_dict)
    state = init_train_state(cfg)
    state.params = params
    state.opt_generator = torch.optim.Adam(
        list(params.generator.parameters()) + list(params.posterior.parameters()),
        lr=cfg.learning_rate,
    )
    state.opt_critic = torch.optim.Adam(
        params.critic.parameters(), lr=cfg.critic_learning_rate, betas=(0.5, 0.9)
    )
    state.opt_generator.load_state_dict(extra["opt_generator"])
    state.opt_critic.load_state_dict(extra["opt_critic"])
    state.steps = dict(extra["steps"])
    state.np_rng = np.random.default_rng()
    state.np_rng.bit_generator.state = extra["np_rng_state"]
    state.torch_rng.set_state(extra["torch_rng_state"])
    return state, cfg


def _snapshot(state: TrainState, cfg: TrainConfig, run_dir: Optional[Path], tag: str) -> Optional[Path]:
    if run_dir is None:
        return None
    path = Path(run_dir) / f"diagnostic_{tag}.ckpt"
    save_train_state(path, state, cfg)
    return path


def _check_finite(value: torch.Tensor, state, cfg, run_dir, tag: str) -> None:
    if not torch.isfinite(value).all():
        raise TrainingDiverged(
            f"non-finite loss at {tag}", _snapshot(state, cfg, run_dir, tag)
        )


def _stack_frames(arrs: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(arrs)).permute(0, 3, 1, 2)


def _clip(optimizer: torch.optim.Optimizer, cfg: TrainConfig) -> None:
    if cfg.grad_clip > 0:
        params = [p for group in optimizer.param_groups for p in group["params"]]
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)


def _pairwise_tensors(data: TrainingData, cfg: TrainConfig, rng: np.random.Generator):
    pairs = data.pairs
    starters = sorted(data.starter_targets)
    prev_list, delta_list, final_list = [], [], []
    for _ in range(cfg.batch_size):
        use_starter = starters and rng.random() < cfg.starter_prob
        if use_starter:
            vid = starters[rng.integers(len(starters))]
            arr = data.videos[vid]
            prev = np.ones_like(arr[0])
            curr = arr[data.starter_targets[vid]]
        else:
            vid, a, b = pairs[rng.integers(len(pairs))]
            arr = data.videos[vid]
            prev, curr = arr[a], arr[b]
        prev_list.append(prev)
        delta_list.append(curr - prev)
        final_list.append(data.finals[vid])
    return _stack_frames(prev_list), _stack_frames(delta_list), _stack_frames(final_list)


def _bootstrap_ramp(step: int, bootstrap_steps: int) -> float:
    """0 during the warm-start, linearly rising to 1 over a second window.

    Escapes the ignore-the-latent local optimum: with a mostly-zero,
    multimodal change target the exact objective's L1 term is minimized
    by predicting the per-pixel median (zero), so the latent pathway
    never bootstraps. The warm start trains with a mean-seeking squared
    error and a noise-free latent read; the exact objective takes over
    once the code is informative.
    """
    if bootstrap_steps <= 0:
        return 1.0
    return min(1.0, max(0.0, (step - bootstrap_steps) / bootstrap_steps))


def _step_losses(
    params: ModelParams,
    extractor: FeatureExtractor,
    weights: LossWeights,
    x_hat_prev: torch.Tensor,
    x_real: torch.Tensor,
    x_final: torch.Tensor,
    noise: torch.Tensor,
    recon_scale: float,
    ramp: float = 1.0,
):
    """One posterior-sampled prediction step and its loss terms.

    Returns (next predicted frame, optimization loss, components).
    With ramp=1 the optimization loss IS the combined objective, and
    identical arithmetic backs both pairwise training and each
    sequential-mode rollout step, so a length-2 rollout reduces exactly
    to one pairwise step. With ramp<1 (pairwise warm-start only) the
    noise and KL scale by ramp and the L1 term blends with a squared
    error; the components always report the exact objective's terms.
    """
    delta_target = x_real - x_hat_prev
    mu, logvar = params.posterior(delta_target, x_hat_prev, x_final)
    z = mu + ramp * torch.exp(0.5 * logvar) * noise
    delta_hat = params.generator(z, x_hat_prev, x_final)
    x_hat = torch.clamp(x_hat_prev + delta_hat, 0.0, 1.0)
    kl = kl_loss((mu, logvar))
    l1 = delta_l1(delta_target, delta_hat)
    perc = perceptual_l2(torch.clamp(x_hat_prev + delta_target, 0.0, 1.0), x_hat, extractor)
    total = kl + recon_scale * (weights.l1_weight * l1 + weights.perceptual_weight * perc)
    if ramp >= 1.0:
        opt_loss = total
    else:
        l2 = ((delta_hat - delta_target) ** 2).mean()
        opt_loss = ramp * kl + recon_scale * (
            ramp * weights.l1_weight * l1
            + (1.0 - ramp) * weights.l1_weight * l2
            + weights.perceptual_weight * perc
        )
    return x_hat, opt_loss, {"total": total, "kl": kl, "l1": l1, "perceptual": perc}


def train_pairwise(
    state: TrainState,
    data: TrainingData,
    cfg: TrainConfig,
    steps: Optional[int] = None,
    logger: Optional[MetricsLogger] = None,
    run_dir: Optional[Path] = None,
) -> TrainState:
    """Optimize generator and posterior on single time steps."""
    steps = cfg.pairwise_steps if steps is None else steps
    for group in state.opt_generator.param_groups:
        group["lr"] = cfg.learning_rate
    for _ in range(steps):
        ramp = _bootstrap_ramp(state.steps["pairwise"], cfg.bootstrap_steps)
        x_prev, delta, x_final = _pairwise_tensors(data, cfg, state.np_rng)
        noise = torch.randn(
            (x_prev.shape[0], cfg.latent_dim), generator=state.torch_rng
        )
        _, opt_loss, comps = _step_losses(
            state.params, state.extractor, cfg.weights,
            x_prev, x_prev + delta, x_final, noise, cfg.recon_scale, ramp,
        )
        _check_finite(opt_loss, state, cfg, run_dir, f"pairwise{state.steps['pairwise']}")
        if logger is not None:
            logger.log_many(
                state.steps["global"],
                {
                    "pairwise/total": comps["total"].item(),
                    "pairwise/kl": comps["kl"].item(),
                    "pairwise/l1": comps["l1"].item(),
                    "pairwise/perceptual": comps["perceptual"].item(),
                    "pairwise/ramp": ramp,
                },
            )
        state.opt_generator.zero_grad(set_to_none=True)
        opt_loss.backward()
        _clip(state.opt_generator, cfg)
        state.opt_generator.step()
        state.steps["pairwise"] += 1
        state.steps["global"] += 1
    return state


def _sequence_tensors(
    data: TrainingData,
    sequences: list[IndexSequence],
    rng: np.random.Generator,
    batch: int,
):
    chosen = [sequences[rng.integers(len(sequences))] for _ in range(batch)]
    frames = np.stack(
        [data.videos[s.video_id][np.array(s.indices)] for s in chosen]
    )  # (B, S, H, W, 3)
    finals = _stack_frames([data.finals[s.video_id] for s in chosen])
    return torch.from_numpy(frames).permute(0, 1, 4, 2, 3), finals


def sequential_cvae_losses(
    params: ModelParams,
    extractor: FeatureExtractor,
    weights: LossWeights,
    frames: torch.Tensor,      # (B, S, 3, H, W) real frames
    x_final: torch.Tensor,     # (B, 3, H, W)
    noise: torch.Tensor,       # (B, S-1, latent_dim)
    recon_scale: float = 1.0,
) -> tuple[torch.Tensor, list[torch.Tensor], dict]:
    """Rollout built on the model's own predictions; per-step losses returned."""
    x_hat = frames[:, 0]
    per_step = []
    kl_sum = 0.0
    image_sum = 0.0
    for t in range(1, frames.shape[1]):
        x_hat, step_loss, comps = _step_losses(
            params, extractor, weights, x_hat, frames[:, t], x_final,
            noise[:, t - 1], recon_scale,
        )
        per_step.append(step_loss)
        kl_sum = kl_sum + comps["kl"]
        image_sum = image_sum + (
            weights.l1_weight * comps["l1"]
            + weights.perceptual_weight * comps["perceptual"]
        )
    return torch.stack(per_step).sum(), per_step, {"kl": kl_sum, "image": image_sum}


def train_sequential_cvae(
    state: TrainState,
    data: TrainingData,
    cfg: TrainConfig,
    steps: Optional[int] = None,
    logger: Optional[MetricsLogger] = None,
    run_dir: Optional[Path] = None,
) -> TrainState:
    """Rollout training with posterior-sampled latents on short sequences."""
    steps = cfg.seq_cvae_steps if steps is None else steps
    lengths = [s for s in cfg.seq_lengths if data.seq_by_length.get(s)]
    if not lengths:
        raise ValueError("no sequences available for sequential training")
    for group in state.opt_generator.param_groups:
        group["lr"] = cfg.learning_rate
    for _ in range(steps):
        length = lengths[state.np_rng.integers(len(lengths))]
        frames, finals = _sequence_tensors(
            data, data.seq_by_length[length], state.np_rng, cfg.seq_batch_size
        )
        noise = torch.randn(
            (frames.shape[0], frames.shape[1] - 1, cfg.latent_dim),
            generator=state.torch_rng,
        )
        total, per_step, stats = sequential_cvae_losses(
            state.params, state.extractor, cfg.weights,
            frames, finals, noise, cfg.recon_scale,
        )
        _check_finite(total, state, cfg, run_dir, f"seq_cvae{state.steps['seq_cvae']}")
        if logger is not None:
            logger.log_many(
                state.steps["global"],
                {
                    "seq_cvae/total": total.item(),
                    "seq_cvae/kl": stats["kl"].item(),
                    "seq_cvae/image": stats["image"].item(),
                    "seq_cvae/length": float(length),
                },
            )
        state.opt_generator.zero_grad(set_to_none=True)
        total.backward()
        _clip(state.opt_generator, cfg)
        state.opt_generator.step()
        state.steps["seq_cvae"] += 1
        state.steps["global"] += 1
    return state


def prior_rollout(
    params: ModelParams,
    x_final: torch.Tensor,
    steps: int,
    noise: torch.Tensor,
) -> list[torch.Tensor]:
    """Blank-canvas rollout with given prior noise; returns frames incl. blank."""
    x_hat = torch.ones_like(x_final)
    frames = [x_hat]
    for t in range(steps):
        delta_hat = params.generator(noise[:, t], x_hat, x_final)
        x_hat = torch.clamp(x_hat + delta_hat, 0.0, 1.0)
        frames.append(x_hat)
    return frames


def _gradient_penalty_batch(critic, real, fake, prev, final, rng, gp_weight):
    u = torch.rand((real.shape[0], 1, 1, 1), generator=rng, dtype=real.dtype)
    interp = (u * real + (1.0 - u) * fake).detach().requires_grad_(True)
    scores = critic(interp, prev, final)
    grad = torch.autograd.grad(scores.sum(), interp, create_graph=True)[0]
    norms = grad.flatten(start_dim=1).norm(dim=1)
    penalty = gp_weight * ((norms - 1.0) ** 2).mean()
    return penalty, norms.mean().item()


def _tau_batch(data: TrainingData, cfg: TrainConfig, rng: np.random.Generator):
    if not data.tau_sequences:
        raise ValueError(f"no length-{cfg.tau} sequences available for sampling training")
    chosen = [
        data.tau_sequences[rng.integers(len(data.tau_sequences))]
        for _ in range(cfg.sample_batch_size)
    ]
    frames = np.stack([data.videos[s.video_id][np.array(s.indices)] for s in chosen])
    finals = _stack_frames([data.finals[s.video_id] for s in chosen])
    return torch.from_numpy(frames).permute(0, 1, 4, 2, 3), finals


def _flatten_triples(frames: torch.Tensor):
    """(B, S, 3, H, W) -> per-step triples stacked into one batch."""
    curr = frames[:, 1:].reshape(-1, *frames.shape[2:])
    prev = frames[:, :-1].reshape(-1, *frames.shape[2:])
    return curr, prev


def train_sequential_sampling(
    state: TrainState,
    data: TrainingData,
    cfg: TrainConfig,
    steps: Optional[int] = None,
    logger: Optional[MetricsLogger] = None,
    run_dir: Optional[Path] = None,
) -> TrainState:
    """Adversarial rollout training with prior-sampled latents.

    Per generator update the critic takes ``critic_iters`` updates on
    real vs rolled-out frame triples; the generator then minimizes the
    negated critic score on every step plus image similarity against the
    completed painting at step tau only.
    """
    steps = cfg.seq_sample_steps if steps is None else steps
    w = cfg.weights
    sample_lr = cfg.sample_learning_rate
    if sample_lr is not None:
        for group in state.opt_generator.param_groups:
            group["lr"] = sample_lr
    for _ in range(steps):
        tag = f"seq_sample{state.steps['seq_sample']}"
        # critic updates
        gp_norms = []
        for _ in range(cfg.critic_iters):
            real_frames, finals = _tau_batch(data, cfg, state.np_rng)
            noise = torch.randn(
                (real_frames.shape[0], cfg.tau, cfg.latent_dim),
                generator=state.torch_rng,
            )
            with torch.no_grad():
                rollout = prior_rollout(state.params, finals, cfg.tau, noise)
            fake = torch.stack(rollout, dim=1)  # (B, tau+1, 3, H, W)
            real_curr, real_prev = _flatten_triples(real_frames)
            fake_curr, fake_prev = _flatten_triples(fake[:, : real_frames.shape[1]])
            n = real_curr.shape[0]
            final_rep = finals.repeat_interleave(real_frames.shape[1] - 1, dim=0)
            real_scores = state.params.critic(real_curr, real_prev, final_rep)
            fake_scores = state.params.critic(fake_curr, fake_prev, final_rep)
            if real_scores.abs().max() > CRITIC_SCORE_LIMIT or fake_scores.abs().max() > CRITIC_SCORE_LIMIT:
                raise TrainingDiverged(
                    f"critic score diverged at {tag}", _snapshot(state, cfg, run_dir, tag)
                )
            wass = critic_wasserstein(real_scores.mean(), fake_scores.mean())
            gp, norm_mean = _gradient_penalty_batch(
                state.params.critic, real_curr, fake_curr, real_prev, final_rep,
                state.torch_rng, w.gp_weight,
            )
            gp_norms.append(norm_mean)
            critic_loss = wass + gp
            _check_finite(critic_loss, state, cfg, run_dir, tag)
            state.opt_critic.zero_grad(set_to_none=True)
            critic_loss.backward()
            state.opt_critic.step()
        # generator update
        real_frames, finals = _tau_batch(data, cfg, state.np_rng)
        noise = torch.randn(
            (real_frames.shape[0], cfg.tau, cfg.latent_dim), generator=state.torch_rng
        )
        rollout = prior_rollout(state.params, finals, cfg.tau, noise)
        fake = torch.stack(rollout, dim=1)
        fake_curr, fake_prev = _flatten_triples(fake)
        final_rep = finals.repeat_interleave(cfg.tau, dim=0)
        adversarial = -state.params.critic(fake_curr, fake_prev, final_rep).mean()
        final_l1 = delta_l1(rollout[-1], finals)
        final_perc = perceptual_l2(rollout[-1], finals, state.extractor)
        gen_loss = cfg.adversarial_weight * adversarial + cfg.recon_scale * (
            w.l1_weight * final_l1 + w.perceptual_weight * final_perc
        )
        _check_finite(gen_loss, state, cfg, run_dir, tag)
        if logger is not None:
            logger.log_many(
                state.steps["global"],
                {
                    "seq_sample/adversarial": adversarial.item(),
                    "seq_sample/critic_wasserstein": wass.item(),
                    "seq_sample/final_l1": final_l1.item(),
                    "seq_sample/final_perceptual": final_perc.item(),
                    "seq_sample/gp_norm": float(np.mean(gp_norms)),
                    "seq_sample/total": gen_loss.item(),
                    "seq_sample/critic_updates": float(cfg.critic_iters),
                },
            )
        state.opt_generator.zero_grad(set_to_none=True)
        gen_loss.backward()
        _clip(state.opt_generator, cfg)
        state.opt_generator.step()
        state.steps["seq_sample"] += 1
        state.steps["global"] += 1
    return state


def train_full(
    state: TrainState,
    data: TrainingData,
    cfg: TrainConfig,
    logger: Optional[MetricsLogger] = None,
    run_dir: Optional[Path] = None,
) -> TrainState:
    """Pairwise stage to budget, then alternating sequential blocks."""
    if logger is not None:
        logger.log(state.steps["global"], "stage/pairwise", 0.0)
    train_pairwise(state, data, cfg, logger=logger, run_dir=run_dir)
    if run_dir is not None:
        save_train_state(Path(run_dir) / "stage_pairwise.ckpt", state, cfg)
    remaining_cvae = cfg.seq_cvae_steps
    remaining_sample = cfg.seq_sample_steps
    block_index = 0
    while remaining_cvae > 0 or remaining_sample > 0:
        for _ in range(cfg.alternation_ratio[0]):
            if remaining_cvae <= 0:
                break
            n = min(cfg.alternation_block, remaining_cvae)
            if logger is not None:
                logger.log(state.steps["global"], "stage/seq_cvae", float(block_index))
            train_sequential_cvae(state, data, cfg, steps=n, logger=logger, run_dir=run_dir)
            remaining_cvae -= n
            block_index += 1
        for _ in range(cfg.alternation_ratio[1]):
            if remaining_sample <= 0:
                break
            n = min(cfg.alternation_block, remaining_sample)
            if logger is not None:
                logger.log(state.steps["global"], "stage/seq_sample", float(block_index))
            train_sequential_sampling(state, data, cfg, steps=n, logger=logger, run_dir=run_dir)
            remaining_sample -= n
            block_index += 1
        if run_dir is not None:
            save_train_state(Path(run_dir) / f"stage_block{block_index:03d}.ckpt", state, cfg)
    if run_dir is not None:
        save_train_state(Path(run_dir) / "final.ckpt", state, cfg)
    return state
