"""Object-centric slot tokenizer: synthetic scenes, slot Q-Former, residual quantizer, diffusion decoder, tiny MLLM."""
from .config import (
    DecoderConfig,
    DiffusionConfig,
    LMConfig,
    LMTrainConfig,
    LossWeights,
    QuantizerConfig,
    SlotConfig,
    TokenizerConfig,
    TrainConfig,
    PRESETS,
)
from .tokenizer import SlotTokenizer, load_tokenizer, save_tokenizer

__version__ = "0.1.0"

__all__ = [
    "DecoderConfig",
    "DiffusionConfig",
    "LMConfig",
    "LMTrainConfig",
    "LossWeights",
    "QuantizerConfig",
    "SlotConfig",
    "TokenizerConfig",
    "TrainConfig",
    "PRESETS",
    "SlotTokenizer",
    "load_tokenizer",
    "save_tokenizer",
]
