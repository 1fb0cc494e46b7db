"""paintlapse: probabilistic synthesis of painting time-lapse videos.

Given a single completed painting, a trained model samples diverse,
realistic progressions from a blank canvas to that painting.
"""

__version__ = "0.1.0"

from .core import (
    ChangeMap,
    Frame,
    Medium,
    PaintingVideo,
    apply_delta,
    blank_frame,
    frame_delta,
)
from .datapipe import (
    DatasetSplit,
    ExtractionConfig,
    IndexSequence,
    SyntheticSpec,
    extract_crops,
    extract_sequences,
    generate_synthetic_dataset,
    split_dataset,
)
from .inference import SynthesisRequest, synthesize_many, synthesize_video
from .losses import LossWeights
from .networks import GaussianParams, ModelParams, init_model_params
from .training import TrainConfig, init_train_state, train_full

__all__ = [
    "ChangeMap",
    "DatasetSplit",
    "ExtractionConfig",
    "Frame",
    "GaussianParams",
    "IndexSequence",
    "LossWeights",
    "Medium",
    "ModelParams",
    "PaintingVideo",
    "SynthesisRequest",
    "SyntheticSpec",
    "TrainConfig",
    "apply_delta",
    "blank_frame",
    "extract_crops",
    "extract_sequences",
    "frame_delta",
    "generate_synthetic_dataset",
    "init_model_params",
    "init_train_state",
    "split_dataset",
    "synthesize_many",
    "synthesize_video",
    "train_full",
]
