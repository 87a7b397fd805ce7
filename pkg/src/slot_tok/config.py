"""Configuration dataclasses, presets and hashing.

Every config is a plain dataclass so it round-trips through YAML/JSON by
field name. ``config_hash`` is the short content hash stamped into
checkpoints and token files.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


@dataclass
class SlotConfig:
    num_slots: int = 8
    dim: int = 64
    gru_iters: int = 3
    num_layers: int = 4
    heads: int = 4
    noise_scale: float = 0.1
    temperature_init: float = 0.07
    # "weighted_mean" (renormalise over inputs) or "slot_axis" (keep the softmax over slots only)
    normalization: str = "weighted_mean"
    # replaces slot attention by standard cross-attention (ablation)
    no_slot_attention: bool = False

    def validate(self) -> None:
        if self.num_slots < 1:
            raise ValueError("num_slots must be >= 1")
        if self.gru_iters < 1:
            raise ValueError("gru_iters must be >= 1")
        if self.normalization not in ("weighted_mean", "slot_axis"):
            raise ValueError(f"unknown normalization {self.normalization!r}")


@dataclass
class QuantizerConfig:
    codebook_size: int = 512
    code_dim: int = 16
    depth: int = 4
    decay: float = 0.99
    dead_after: int = 50
    # "cumulative" or "per_depth"
    commit: str = "cumulative"

    def validate(self) -> None:
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")
        if self.codebook_size > 65536:
            raise ValueError("codebook_size must fit in 16-bit token files")
        if self.commit not in ("cumulative", "per_depth"):
            raise ValueError(f"unknown commit mode {self.commit!r}")


@dataclass
class DiffusionConfig:
    timesteps: int = 200
    schedule: str = "linear"
    # endpoints of the 1000-step linear schedule rescaled to ``timesteps``
    beta_start: float = 5e-4
    beta_end: float = 0.1
    prediction: str = "noise"

    def validate(self) -> None:
        if not 0.0 < self.beta_start < self.beta_end < 1.0:
            raise ValueError("need 0 < beta_start < beta_end < 1")
        if self.schedule != "linear":
            raise ValueError(f"unknown beta schedule {self.schedule!r}")
        if self.prediction != "noise":
            raise ValueError("only noise prediction is supported")


@dataclass
class DecoderConfig:
    channels: tuple[int, ...] = (32, 64, 64)
    blocks_per_res: int = 2
    heads: int = 4
    # "pool_then_mlp" or "mlp_then_pool"
    global_pooling: str = "pool_then_mlp"
    # noise estimate = sqrt(1 - abar) * z_t + sqrt(abar) * UNet(...); keeps the implied x0 well conditioned at high t
    noise_skip: bool = True
    freeze_unet_body: bool = False
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)


@dataclass
class TokenizerConfig:
    image_size: int = 64
    patch_size: int = 8
    d_input: int = 64
    encoder_layers: int = 2
    encoder_heads: int = 4
    train_encoder: bool = True
    ref_dim: int = 64
    vocab_size: int = 64
    max_text_len: int = 32
    slots: SlotConfig = field(default_factory=SlotConfig)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch_size
        return g, g

    @property
    def num_features(self) -> int:
        h, w = self.grid
        return h * w

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        self.slots.validate()
        self.quantizer.validate()
        self.decoder.diffusion.validate()


@dataclass
class LossWeights:
    w1: float = 0.5  # clip
    w2: float = 1.0  # diff
    w3: float = 0.5  # itc
    w4: float = 0.5  # i2t
    w5: float = 1.0  # recon
    w6: float = 1.0  # commit
    w7: float = 0.1  # diff (stage 2)
    w8: float = 0.1  # clip (stage 2)

    def validate(self) -> None:
        for name, value in dataclasses.asdict(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


@dataclass
class TrainConfig:
    stage: int = 1
    max_lr: float = 1e-4
    warmup_steps: int = 500
    total_steps: int = 10_000
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    log_every: int = 10
    no_slot_attention: bool = False
    no_diffusion_loss: bool = False
    no_alignment_loss: bool = False
    weights: LossWeights = field(default_factory=LossWeights)
    init_checkpoint: str | None = None

    def validate(self) -> None:
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("warmup_steps must be < total_steps")
        self.weights.validate()


@dataclass
class LMConfig:
    width: int = 256
    layers: int = 4
    heads: int = 4
    context: int = 512
    dropout: float = 0.0


@dataclass
class LMTrainConfig:
    max_lr: float = 3e-4
    warmup_steps: int = 60
    total_steps: int = 2000
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 0.05
    grad_clip: float = 1.0
    # "t2i", "i2t" or "random"
    direction: str = "random"
    # "slot_major" or "depth_major"
    flatten: str = "slot_major"
    lora_rank: int = 0
    log_every: int = 50
    lm: LMConfig = field(default_factory=LMConfig)


def desk_preset() -> TokenizerConfig:
    return TokenizerConfig()


def full_preset() -> TokenizerConfig:
    """Full-scale shapes (448px input, 32 slots of width 768, 8192x32 codebook)."""
    return TokenizerConfig(
        image_size=448,
        patch_size=14,
        d_input=1024,
        encoder_layers=24,
        encoder_heads=16,
        ref_dim=768,
        slots=SlotConfig(num_slots=32, dim=768, gru_iters=3, num_layers=4, heads=12),
        quantizer=QuantizerConfig(codebook_size=8192, code_dim=32, depth=4),
        decoder=DecoderConfig(channels=(320, 640, 1280)),
    )


def small_preset() -> TokenizerConfig:
    """32x32 canvas with a 4px patch grid; keeps M=64 at a quarter of the pixels."""
    return TokenizerConfig(
        image_size=32,
        patch_size=4,
        slots=SlotConfig(num_layers=2),
    )


PRESETS = {"desk": desk_preset, "full": full_preset, "small": small_preset}


def to_dict(cfg: Any) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(cfg: Any) -> str:
    payload = json.dumps(to_dict(cfg) if dataclasses.is_dataclass(cfg) else cfg, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _build(cls, data: dict | None):
    if data is None:
        return cls()
    kwargs = {}
    hints = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in hints:
            raise ValueError(f"unknown field {key!r} for {cls.__name__}")
        default = hints[key].default_factory if hints[key].default_factory is not dataclasses.MISSING else None
        nested = default() if default is not None else None
        if dataclasses.is_dataclass(nested) and isinstance(value, dict):
            kwargs[key] = _build(type(nested), value)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def from_dict(cls, data: dict | None):
    """Inverse of ``to_dict`` for any of the config dataclasses."""
    return _build(cls, data)


def load_yaml(path: str | Path) -> dict:
    with open(path) as fh:
        return yaml.safe_load(fh) or {}
