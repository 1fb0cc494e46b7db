"""Command-line entry point.

Subcommands: gen-data, extract, train, synthesize, evaluate. Every
artifact-producing command writes its resolved configuration and seed
into the run directory so outputs are reproducible bit-exactly on the
same platform. Exit codes: 0 success, 1 usage/config error, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, EvalConfig, RunConfig, load_run_config, write_resolved_config
from .core import Frame, derive_seed
from .datapipe import (
    ExtractionConfig,
    extract_sequences,
    load_dataset,
    split_dataset,
    write_sequence_index,
    write_synthetic_dataset,
)
from .evaluation import evaluate_methods, method_interp, method_ours, method_unet
from .inference import SynthesisRequest, iter_synthesized
from .losses import MetricsLogger
from .training import (
    TrainingDiverged,
    init_train_state,
    load_train_state,
    prepare_training_data,
    save_train_state,
    train_full,
    train_pairwise,
    train_sequential_cvae,
    train_sequential_sampling,
)
from .video_io import load_frame_png, save_frame_png, save_video

DATA_ROOT_ENV = "PAINTLAPSE_DATA_ROOT"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _UsageError(Exception):
    pass


def _load_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _data_root(args, cfg: RunConfig) -> Path:
    root = getattr(args, "data", None) or cfg.data_root or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise _UsageError(
            f"no data root: pass --data, set data_root in the config, or set ${DATA_ROOT_ENV}"
        )
    return Path(root)


def _run_dir(args, command: str) -> Path:
    if getattr(args, "out", None):
        out = Path(args.out)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        out = Path("runs") / f"{command}-{stamp}"
        n = 0
        while out.exists():
            n += 1
            out = Path("runs") / f"{command}-{stamp}-{n}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    spec = dataclasses.replace(cfg.synthetic, seed=derive_seed(cfg.seed, "synthetic"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    split = write_synthetic_dataset(out, spec, cfg.n_videos, split_seed=cfg.seed)
    write_resolved_config(out / "config.yaml", cfg, f"paintlapse {__version__}")
    print(f"wrote {cfg.n_videos} videos to {out} "
          f"(train/val/test = {len(split.train)}/{len(split.val)}/{len(split.test)})")
    return EXIT_OK


def cmd_extract(args) -> int:
    cfg = _load_config(args)
    root = _data_root(args, cfg)
    run_dir = _run_dir(args, "extract")
    videos, split = load_dataset(root)
    sequences = []
    for vid in sorted(videos):
        sequences.extend(
            extract_sequences(
                videos[vid], cfg.extraction,
                count_limit=args.limit,
                seed=derive_seed(cfg.seed, f"extract:{vid}"),
            )
        )
    write_sequence_index(run_dir / "sequences.tsv", sequences)
    import json
    (run_dir / "split.json").write_text(json.dumps(split.to_dict(), indent=2, sort_keys=True) + "\n")
    write_resolved_config(run_dir / "config.yaml", cfg, f"paintlapse {__version__}")
    print(f"extracted {len(sequences)} sequences from {len(videos)} videos -> {run_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    root = _data_root(args, cfg)
    run_dir = _run_dir(args, "train")
    videos, split = load_dataset(root)
    train_videos = [videos[v] for v in split.train]
    if not train_videos:
        raise _UsageError("dataset has no training videos")
    if args.checkpoint:
        state, train_cfg = load_train_state(Path(args.checkpoint))
    else:
        train_cfg = cfg.training
        state = init_train_state(train_cfg)
    data = prepare_training_data(train_videos, cfg.extraction, train_cfg)
    write_resolved_config(run_dir / "config.yaml", cfg, f"paintlapse {__version__}")
    stages = {
        "pairwise": train_pairwise,
        "seq-cvae": train_sequential_cvae,
        "seq-sample": train_sequential_sampling,
        "full": train_full,
    }
    runner = stages[args.stage]
    with MetricsLogger(run_dir / "metrics.log") as logger:
        if args.stage == "full":
            runner(state, data, train_cfg, logger=logger, run_dir=run_dir)
        else:
            runner(state, data, train_cfg, steps=args.steps, logger=logger, run_dir=run_dir)
    ckpt = run_dir / "checkpoint.ckpt"
    save_train_state(ckpt, state, train_cfg)
    print(f"trained stage {args.stage}; checkpoint -> {ckpt}")
    return EXIT_OK


def cmd_synthesize(args) -> int:
    cfg = _load_config(args)
    run_dir = _run_dir(args, "synthesize")
    x_final = load_frame_png(Path(args.painting))
    seed = cfg.seed if args.seed is None else args.seed
    if args.method == "interp":
        from .baselines import interp_video
        videos = [interp_video(x_final, steps=args.steps)] * args.samples
        videos = [
            dataclasses.replace(v, id=f"sample-{i:04d}") for i, v in enumerate(videos)
        ]
    elif args.method == "unet":
        from .baselines import load_unet, unet_predict
        if not args.checkpoint:
            raise _UsageError("--checkpoint is required for --method unet")
        unet = load_unet(Path(args.checkpoint))
        videos = [
            dataclasses.replace(unet_predict(x_final, unet), id=f"sample-{i:04d}")
            for i in range(args.samples)
        ]
    else:
        if not args.checkpoint:
            raise _UsageError("--checkpoint is required for --method ours")
        state, _ = load_train_state(Path(args.checkpoint))
        req = SynthesisRequest(
            x_final=x_final, params=state.params,
            steps=args.steps, n_samples=args.samples, seed=seed,
        )
        videos = iter_synthesized(req)
    count = 0
    firsts = []
    for i, video in enumerate(videos):
        save_video(video, run_dir / f"sample_{i:03d}")
        firsts.append(video)
        count += 1
    if args.contact_sheet:
        _write_contact_sheet(run_dir / "contact_sheet.png", firsts)
    write_resolved_config(run_dir / "config.yaml", cfg, f"paintlapse {__version__}")
    print(f"wrote {count} samples -> {run_dir}")
    return EXIT_OK


def _write_contact_sheet(path: Path, videos, n_cols: int = 8) -> None:
    """Grid of evenly spaced frames, one row per sample."""
    rows = []
    for video in videos:
        arr = video.as_array()
        idx = np.linspace(0, arr.shape[0] - 1, n_cols).round().astype(int)
        rows.append(np.concatenate([arr[i] for i in idx], axis=1))
    sheet = np.concatenate(rows, axis=0)
    save_frame_png(Frame(sheet), path)


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    root = _data_root(args, cfg)
    run_dir = _run_dir(args, "evaluate")
    videos, split = load_dataset(root)
    test_videos = [videos[v] for v in split.test]
    if not test_videos:
        raise _UsageError("dataset has no test videos")
    method_names = [m.strip() for m in args.methods.split(",") if m.strip()]
    methods = {}
    for name in method_names:
        if name == "interp":
            methods[name] = method_interp()
        elif name == "ours":
            if not args.checkpoint:
                raise _UsageError("--checkpoint is required for method 'ours'")
            state, _ = load_train_state(Path(args.checkpoint))
            methods[name] = method_ours(state.params)
        elif name == "unet":
            if not args.unet_checkpoint:
                raise _UsageError("--unet-checkpoint is required for method 'unet'")
            from .baselines import load_unet
            methods[name] = method_unet(load_unet(Path(args.unet_checkpoint)))
        else:
            raise _UsageError(f"unknown method {name!r}")
    eval_cfg: EvalConfig = cfg.evaluation
    k = args.k if args.k is not None else eval_cfg.k
    extraction = dataclasses.replace(
        cfg.extraction, sequence_length=eval_cfg.sequence_length
    )
    report = evaluate_methods(
        test_videos, methods, k=k,
        crops_per_video=eval_cfg.crops_per_video,
        seed=cfg.seed,
        extraction=extraction,
        crop_size=cfg.training.image_size,
        change_threshold=eval_cfg.change_threshold,
    )
    report.write_csv(run_dir / "report.csv")
    (run_dir / "report.txt").write_text(report.render_text() + "\n")
    write_resolved_config(run_dir / "config.yaml", cfg, f"paintlapse {__version__}")
    print(report.render_text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="paintlapse",
        description="Learn and sample painting time-lapse videos.",
    )
    parser.add_argument("--version", action="version", version=f"paintlapse {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", type=Path, help="run configuration YAML")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", type=Path, default=None, help="output/run directory")
        if data:
            p.add_argument("--data", type=Path, default=None,
                           help=f"dataset root (default: ${DATA_ROOT_ENV})")

    p = sub.add_parser("gen-data", help="generate a synthetic painting dataset")
    common(p, data=False)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("extract", help="extract training sequences from a dataset")
    common(p)
    p.add_argument("--limit", type=int, default=64, help="max sequences per video")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train a model stage")
    common(p)
    p.add_argument("--stage", choices=["pairwise", "seq-cvae", "seq-sample", "full"],
                   default="full")
    p.add_argument("--steps", type=int, default=None, help="override stage step budget")
    p.add_argument("--checkpoint", type=Path, default=None, help="resume from checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synthesize", help="sample time-lapse videos for a painting")
    common(p, data=False)
    p.add_argument("--painting", type=Path, required=True, help="completed painting PNG")
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--method", choices=["ours", "interp", "unet"], default="ours")
    p.add_argument("--samples", type=int, default=1)
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--contact-sheet", action="store_true",
                   help="also write a frame-grid overview image")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("evaluate", help="compare methods on the test split")
    common(p)
    p.add_argument("--checkpoint", type=Path, default=None, help="main model checkpoint")
    p.add_argument("--unet-checkpoint", type=Path, default=None)
    p.add_argument("--methods", default="ours,interp")
    p.add_argument("--k", type=int, default=None, help="samples per cell")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 on --help
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, _UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
