"""Decoder-only LM over the extended vocabulary, masked next-token loss, LoRA adapters."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from ..config import LMConfig
from ..layers import TransformerBlock
from .sequences import MixedSequence


class ContextOverflowError(ValueError):
    pass


class TinyLM(nn.Module):
    def __init__(self, vocab_total: int, cfg: LMConfig | None = None):
        super().__init__()
        cfg = cfg or LMConfig()
        self.cfg = cfg
        self.vocab_total = vocab_total
        self.embed = nn.Embedding(vocab_total, cfg.width)
        self.pos = nn.Embedding(cfg.context, cfg.width)
        self.blocks = nn.ModuleList(TransformerBlock(cfg.width, cfg.heads, causal=True) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(cfg.width)
        self.head = nn.Linear(cfg.width, vocab_total, bias=False)
        nn.init.normal_(self.embed.weight, std=0.02)

    def forward(self, ids: torch.Tensor, key_padding: torch.Tensor | None = None) -> torch.Tensor:
        if ids.shape[1] > self.cfg.context:
            raise ContextOverflowError(f"sequence length {ids.shape[1]} exceeds context {self.cfg.context}")
        pos = torch.arange(ids.shape[1], device=ids.device)
        h = self.embed(ids) + self.pos(pos)[None]
        for block in self.blocks:
            h = block(h, key_padding=key_padding)
        return self.head(self.norm(h))


@dataclass
class LMBatch:
    ids: torch.Tensor  # (B, L)
    loss_mask: torch.Tensor  # (B, L) bool, target-aligned
    lengths: list[int] = field(default_factory=list)


def collate(seqs: list[MixedSequence], pad_id: int = 0) -> LMBatch:
    length = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), length), pad_id, dtype=torch.long)
    mask = torch.zeros((len(seqs), length), dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.as_tensor(s.ids)
        mask[i, : len(s)] = torch.as_tensor(s.loss_mask)
    return LMBatch(ids, mask, [len(s) for s in seqs])


def masked_lm_loss(logits: torch.Tensor, ids: torch.Tensor, loss_mask: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over loss-active targets; exactly 0 (with zero grads) when none are active."""
    targets = ids[:, 1:]
    active = loss_mask[:, 1:]
    per_tok = F.cross_entropy(logits[:, :-1].reshape(-1, logits.shape[-1]), targets.reshape(-1), reduction="none")
    weights = active.reshape(-1).to(per_tok.dtype)
    return (per_tok * weights).sum() / weights.sum().clamp_min(1.0)


def lm_step(model: TinyLM, batch: LMBatch) -> torch.Tensor:
    logits = model(batch.ids)
    return masked_lm_loss(logits, batch.ids, batch.loss_mask)


@torch.no_grad()
def teacher_forced_accuracy(model: TinyLM, batch: LMBatch) -> float:
    logits = model(batch.ids)
    pred = logits[:, :-1].argmax(-1)
    active = batch.loss_mask[:, 1:]
    correct = (pred == batch.ids[:, 1:]) & active
    return float(correct.sum()) / max(int(active.sum()), 1)


# -- LoRA ----------------------------------------------------------------------

@dataclass
class LoraSpec:
    rank: int = 64
    targets: tuple[str, ...] = ("q_proj", "k_proj", "v_proj", "o_proj")
    scaling: float = 1.0
    # base parameters (by name substring) left trainable, e.g. new vocabulary rows
    train_extra: tuple[str, ...] = ()

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("LoRA rank must be >= 1")


class LoRALinear(nn.Module):
    def __init__(self, base: nn.Linear, rank: int, scaling: float = 1.0):
        super().__init__()
        self.base = base
        self.rank = rank
        self.scaling = scaling
        self.lora_a = nn.Parameter(torch.randn(rank, base.in_features, dtype=base.weight.dtype) / rank)
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank, dtype=base.weight.dtype))
        self.merged = False

    def delta(self) -> torch.Tensor:
        return self.scaling * self.lora_b @ self.lora_a

    def forward(self, x):
        out = self.base(x)
        if not self.merged:
            out = out + self.scaling * F.linear(F.linear(x, self.lora_a), self.lora_b)
        return out

    @torch.no_grad()
    def merge(self) -> None:
        if not self.merged:
            self.base.weight += self.delta()
            self.merged = True

    @torch.no_grad()
    def unmerge(self) -> None:
        if self.merged:
            self.base.weight -= self.delta()
            self.merged = False


def lora_apply(model: nn.Module, spec: LoraSpec) -> nn.Module:
    """Freeze the base model and wrap every targeted ``nn.Linear`` with a low-rank adapter."""
    names = {name.rsplit(".", 1)[-1] for name, mod in model.named_modules() if isinstance(mod, nn.Linear)}
    unknown = [t for t in spec.targets if t not in names]
    if unknown:
        raise ValueError(f"unknown LoRA target(s): {', '.join(unknown)}")
    for p in model.parameters():
        p.requires_grad_(False)
    for parent in list(model.modules()):
        for child_name, child in list(parent.named_children()):
            if child_name in spec.targets and isinstance(child, nn.Linear):
                setattr(parent, child_name, LoRALinear(child, spec.rank, spec.scaling))
    for name, p in model.named_parameters():
        if "lora_" in name or any(extra in name for extra in spec.train_extra):
            p.requires_grad_(True)
    return model


def lora_modules(model: nn.Module) -> list[LoRALinear]:
    return [m for m in model.modules() if isinstance(m, LoRALinear)]


def base_state_hash(model: nn.Module) -> str:
    """Hash of the non-adapter weights; identical before and after wrapping with LoRA."""
    import hashlib

    h = hashlib.sha256()
    state = {name.replace(".base.", "."): t for name, t in model.state_dict().items() if "lora_" not in name}
    for name, t in sorted(state.items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
