"""The full image tokenizer: encoder, Slot Q-Former, quantizer and visual decoder."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import TokenizerConfig, config_hash, from_dict, to_dict
from .encoder import FeatureEncoder, ReferenceEmbedder, load_reference, to_tensor
from .quantizer import QuantizeResult, ResidualQuantizer, SlotTokens
from .slot_qformer import SlotEmbeddings, SlotQFormer
from .visual_decoder import VisualDecoder


@dataclass
class EncodeResult:
    slots: SlotEmbeddings
    quant: QuantizeResult | None = None


class SlotTokenizer(nn.Module):
    def __init__(self, cfg: TokenizerConfig, pad_id: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoder = FeatureEncoder(cfg.image_size, cfg.patch_size, cfg.d_input, cfg.encoder_layers, cfg.encoder_heads)
        self.qformer = SlotQFormer(cfg.slots, cfg.d_input, cfg.vocab_size, cfg.max_text_len, pad_id)
        self.quantizer = ResidualQuantizer(cfg.quantizer, cfg.slots.dim, cfg.slots.heads)
        self.decoder = VisualDecoder(cfg.decoder, cfg.slots.dim, cfg.ref_dim, cfg.image_size, cfg.decoder.heads)
        if not cfg.train_encoder:
            self.encoder.requires_grad_(False)
        self.reference: ReferenceEmbedder | None = None

    @property
    def config_hash(self) -> str:
        return config_hash(self.cfg)

    def attach_reference(self, reference: ReferenceEmbedder) -> None:
        # kept outside the module tree so tokenizer checkpoints and optimizers never touch it
        object.__setattr__(self, "reference", reference.freeze())

    def encode_slots(self, images: torch.Tensor, mode: str | None = None) -> SlotEmbeddings:
        return self.qformer.encode_slots(self.encoder(images), mode)

    @torch.no_grad()
    def tokenize(self, images) -> SlotTokens:
        x = images if isinstance(images, torch.Tensor) else to_tensor(images)
        slots = self.encode_slots(x, mode="eval").slots
        return self.quantizer.quantize(slots, self.config_hash).tokens

    @torch.no_grad()
    def reconstruct(self, codes: torch.Tensor, steps: int | None = None, seed: int = 0, eta: float = 1.0) -> torch.Tensor:
        """Codes (B, N, K) -> images Bx3xHxW in [0, 1]. ``eta=1`` is ancestral sampling, ``eta=0`` deterministic DDIM."""
        slots = self.quantizer.dequantize(codes)
        return self.decoder.sample(self.decoder.condition(slots), steps=steps, seed=seed, eta=eta)

    @torch.no_grad()
    def reconstruct_continuous(self, images, steps: int | None = None, seed: int = 0, eta: float = 1.0) -> torch.Tensor:
        """Decode from unquantized slots; isolates the decoder from quantization error."""
        x = images if isinstance(images, torch.Tensor) else to_tensor(images)
        slots = self.encode_slots(x, mode="eval").slots
        return self.decoder.sample(self.decoder.condition(slots), steps=steps, seed=seed, eta=eta)


def save_tokenizer(model: SlotTokenizer, path: str | Path, extra: dict | None = None) -> None:
    blob = {
        "kind": "tokenizer",
        "config": to_dict(model.cfg),
        "config_hash": model.config_hash,
        "state_dict": model.state_dict(),
        "reference_hash": model.reference.content_hash() if model.reference is not None else None,
        "reference_state": None,
        **(extra or {}),
    }
    if model.reference is not None:
        ref = model.reference
        blob["reference_state"] = {
            "vocab_size": ref.text_tower.tok.num_embeddings,
            "dim": ref.dim,
            "max_len": ref.text_tower.pos.shape[1],
            "pad_id": ref.text_tower.pad_id,
            "version": ref.version,
            "state_dict": ref.state_dict(),
        }
    torch.save(blob, path)


def load_tokenizer(path: str | Path) -> SlotTokenizer:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("kind") != "tokenizer":
        raise ValueError(f"{path} is not a tokenizer checkpoint")
    cfg = from_dict(TokenizerConfig, blob["config"])
    if config_hash(cfg) != blob["config_hash"]:
        raise ValueError(f"config hash mismatch in {path}")
    model = SlotTokenizer(cfg)
    model.load_state_dict(blob["state_dict"])
    ref = blob.get("reference_state")
    if ref is not None:
        r = ReferenceEmbedder(ref["vocab_size"], ref["dim"], ref["max_len"], ref["pad_id"], ref["version"])
        r.load_state_dict(ref["state_dict"])
        model.attach_reference(r)
        if r.content_hash() != blob["reference_hash"]:
            raise ValueError("reference embedder hash mismatch")
    model.eval()
    return model


def images_to_tensor(images: list[np.ndarray] | np.ndarray) -> torch.Tensor:
    return to_tensor(np.stack(images) if isinstance(images, list) else images)
