"""Multimodal capsule-routing detector for instruction-guided image
edits: embedding ingestion, frequency-domain features, dynamic capsule
routing, margin-loss training, robustness evaluation, and saliency
analysis."""

from .errors import CapabilityError, ConfigError, ContractError, FormatError
from .features import (
    EMBED_DIM,
    EmbeddingDataset,
    EmbeddingRecord,
    ImageBuffer,
    dct2,
    freq_embed,
    idct2,
    load_ppm,
    read_emb1,
    save_ppm,
    write_emb1,
)
from .model import (
    CapsModel,
    MarginLossConfig,
    ModelConfig,
    RoutingTrace,
    classify,
    encode_capsules,
    forward,
    load_checkpoint,
    margin_loss,
    route,
    save_checkpoint,
    squash,
)
from .tensor import Tensor, backward
from .training import AdamW, MetricsReport, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "CapabilityError",
    "CapsModel",
    "ConfigError",
    "ContractError",
    "EMBED_DIM",
    "EmbeddingDataset",
    "EmbeddingRecord",
    "FormatError",
    "ImageBuffer",
    "MarginLossConfig",
    "MetricsReport",
    "ModelConfig",
    "RoutingTrace",
    "Tensor",
    "TrainConfig",
    "backward",
    "classify",
    "dct2",
    "encode_capsules",
    "evaluate",
    "forward",
    "freq_embed",
    "idct2",
    "load_checkpoint",
    "load_ppm",
    "margin_loss",
    "read_emb1",
    "route",
    "save_checkpoint",
    "save_ppm",
    "squash",
    "train",
    "write_emb1",
]
