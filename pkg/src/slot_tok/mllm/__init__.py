from .generate import SamplerConfig, extract_spans, generate
from .model import ContextOverflowError, LoraSpec, TinyLM, lora_apply
from .sequences import VocabLayout, build_vocab, check_spans

__all__ = [
    "SamplerConfig", "extract_spans", "generate", "ContextOverflowError", "LoraSpec", "TinyLM",
    "lora_apply", "VocabLayout", "build_vocab", "check_spans",
]
