"""Run configuration: a YAML file covering every pipeline stage.

Unknown keys are rejected so typos fail loudly; every run directory
receives the fully resolved configuration that was actually used.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import yaml

from .datapipe import ExtractionConfig, SyntheticSpec
from .training import TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


@dataclass(frozen=True)
class EvalConfig:
    k: int = 32
    crops_per_video: int = 5
    change_threshold: float = 0.05
    sequence_length: int = 40

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "crops_per_video": self.crops_per_video,
            "change_threshold": self.change_threshold,
            "sequence_length": self.sequence_length,
        }


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data_root: Optional[str] = None
    n_videos: int = 80
    synthetic: SyntheticSpec = SyntheticSpec()
    extraction: ExtractionConfig = ExtractionConfig()
    training: TrainConfig = TrainConfig()
    evaluation: EvalConfig = EvalConfig()

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "data_root": self.data_root,
            "n_videos": self.n_videos,
            "synthetic": self.synthetic.to_dict(),
            "extraction": self.extraction.to_dict(),
            "training": self.training.to_dict(),
            "evaluation": self.evaluation.to_dict(),
        }


def _build_section(cls, data: dict, section: str, factory=None):
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    if factory is not None:
        try:
            return factory(data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {section!r} section: {exc}") from exc
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    kwargs = {
        k: tuple(v) if isinstance(v, list) else v for k, v in data.items()
    }
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r} section: {exc}") from exc


def _train_section(data: dict) -> TrainConfig:
    allowed = set(TrainConfig().to_dict())
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in 'training': {sorted(unknown)}")
    return TrainConfig.from_dict(data)


def parse_run_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    raw = dict(raw)
    version = raw.pop("schema_version", SCHEMA_VERSION)
    raw.pop("code_version", None)  # resolved configs are valid inputs
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    known = {"seed", "data_root", "n_videos", "synthetic", "extraction", "training", "evaluation"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    return RunConfig(
        seed=int(raw.get("seed", 0)),
        data_root=raw.get("data_root"),
        n_videos=int(raw.get("n_videos", 80)),
        synthetic=_build_section(SyntheticSpec, raw.get("synthetic", {}), "synthetic"),
        extraction=_build_section(ExtractionConfig, raw.get("extraction", {}), "extraction"),
        training=_build_section(None, raw.get("training", {}), "training", factory=_train_section),
        evaluation=_build_section(EvalConfig, raw.get("evaluation", {}), "evaluation"),
    )


def load_run_config(path: Path) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return parse_run_config(raw or {})


def write_resolved_config(path: Path, cfg: RunConfig, code_version: str) -> None:
    payload = cfg.to_dict()
    payload["code_version"] = code_version
    Path(path).write_text(yaml.safe_dump(payload, sort_keys=True))
