"""Slot Q-Former: slot attention grouping inside a causal query transformer.

Each layer runs ``gru_iters`` slot-attention refinements against the image
feature grid, then causal self-attention over the ordered slot sequence,
then a feed-forward block. The self-attention and feed-forward parameters
(with their norms) are the exact same modules used by the text branch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .config import SlotConfig
from .layers import FeedForward, MultiHeadAttention, causal_mask


class NonFiniteAttentionError(FloatingPointError):
    pass


@dataclass
class SlotEmbeddings:
    slots: torch.Tensor  # (B, N, D)
    # one (B, N, M) map per (layer, iteration), in execution order
    attention_maps: list[torch.Tensor] = field(default_factory=list)
    map_index: list[tuple[int, int]] = field(default_factory=list)

    def attention(self, layer: int = -1, iteration: int = -1) -> torch.Tensor:
        layers = sorted({l for l, _ in self.map_index})
        layer = layers[layer]
        iters = [(i, it) for i, (l, it) in enumerate(self.map_index) if l == layer]
        return self.attention_maps[iters[iteration][0]]


@dataclass
class TextEmbedding:
    final: torch.Tensor  # (B, D)
    per_token: torch.Tensor  # (B, L, D)


class SlotAttention(nn.Module):
    """Competitive attention: softmax over slots, GRU update of the slot state."""

    def __init__(self, dim: int, in_dim: int, iters: int = 3, normalization: str = "weighted_mean", eps: float = 1e-8):
        super().__init__()
        self.dim = dim
        self.iters = iters
        self.normalization = normalization
        self.eps = eps
        self.norm_inputs = nn.LayerNorm(in_dim)
        self.norm_slots = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(in_dim, dim, bias=False)
        self.v = nn.Linear(in_dim, dim, bias=False)
        self.gru = nn.GRUCell(dim, dim)

    def attend(self, slots: torch.Tensor, k: torch.Tensor, v: torch.Tensor, where: tuple[int, int] = (0, 0)):
        """Returns (A, W, U) for projected keys/values of shape (B, M, D)."""
        q = self.q(self.norm_slots(slots))
        logits = q @ k.transpose(1, 2) / math.sqrt(self.dim)
        if not torch.isfinite(logits).all():
            raise NonFiniteAttentionError(f"non-finite attention logits at layer {where[0]}, iteration {where[1]}")
        attn = logits.softmax(dim=1)
        if self.normalization == "weighted_mean":
            weights = attn / attn.sum(dim=-1, keepdim=True).clamp_min(self.eps)
        else:
            weights = attn / attn.sum(dim=1, keepdim=True)
        return attn, weights, weights @ v

    def project(self, features: torch.Tensor):
        x = self.norm_inputs(features)
        return self.k(x), self.v(x)

    def step(self, slots: torch.Tensor, features: torch.Tensor, where: tuple[int, int] = (0, 0)):
        k, v = self.project(features)
        return self._step(slots, k, v, where)

    def _step(self, slots, k, v, where):
        attn, _, updates = self.attend(slots, k, v, where)
        b, n, d = slots.shape
        new = self.gru(updates.reshape(b * n, d), slots.reshape(b * n, d)).reshape(b, n, d)
        return new, attn

    def forward(self, slots: torch.Tensor, features: torch.Tensor, layer: int = 0):
        k, v = self.project(features)
        maps = []
        for it in range(self.iters):
            slots, attn = self._step(slots, k, v, (layer, it))
            maps.append(attn)
        return slots, maps


class CrossAttentionGrouping(nn.Module):
    """Standard Q-Former cross-attention (softmax over features), used for the ablation."""

    def __init__(self, dim: int, in_dim: int, heads: int):
        super().__init__()
        self.norm_slots = nn.LayerNorm(dim)
        self.norm_inputs = nn.LayerNorm(in_dim)
        self.attn = MultiHeadAttention(dim, heads, kv_dim=in_dim)

    def forward(self, slots, features, layer: int = 0):
        out, weights = self.attn(self.norm_slots(slots), context=self.norm_inputs(features), return_weights=True)
        return slots + out, [weights]


class SlotQFormerLayer(nn.Module):
    def __init__(self, cfg: SlotConfig, in_dim: int):
        super().__init__()
        if cfg.no_slot_attention:
            self.grouping = CrossAttentionGrouping(cfg.dim, in_dim, cfg.heads)
        else:
            self.grouping = SlotAttention(cfg.dim, in_dim, cfg.gru_iters, cfg.normalization)
        # shared with the text branch
        self.norm1 = nn.LayerNorm(cfg.dim)
        self.self_attn = MultiHeadAttention(cfg.dim, cfg.heads)
        self.norm2 = nn.LayerNorm(cfg.dim)
        self.ff = FeedForward(cfg.dim)

    def shared(self, x: torch.Tensor, key_padding: torch.Tensor | None = None) -> torch.Tensor:
        mask = causal_mask(x.shape[1], x.device)
        x = x + self.self_attn(self.norm1(x), mask=mask, key_padding=key_padding)
        return x + self.ff(self.norm2(x))


class SlotQFormer(nn.Module):
    def __init__(self, cfg: SlotConfig, in_dim: int, vocab_size: int, max_text_len: int = 32, pad_id: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.pad_id = pad_id
        self.vocab_size = vocab_size
        self.slot_mu = nn.Parameter(torch.randn(cfg.num_slots, cfg.dim) * cfg.dim**-0.5)
        self.slot_sigma = nn.Parameter(torch.full((cfg.dim,), float(cfg.noise_scale)))
        self.layers = nn.ModuleList(SlotQFormerLayer(cfg, in_dim) for _ in range(cfg.num_layers))
        self.final_norm = nn.LayerNorm(cfg.dim)
        self.text_embed = nn.Embedding(vocab_size, cfg.dim)
        self.text_pos = nn.Parameter(torch.randn(max_text_len, cfg.dim) * 0.02)
        self.lm_head = nn.Linear(cfg.dim, vocab_size)
        self.log_tau = nn.Parameter(torch.tensor(math.log(cfg.temperature_init)))

    @property
    def temperature(self) -> torch.Tensor:
        return self.log_tau.exp().clamp(1e-3, 1.0)

    def init_slots(self, batch_size: int, mode: str | None = None, generator: torch.Generator | None = None):
        mode = mode or ("train" if self.training else "eval")
        mu = self.slot_mu.unsqueeze(0).expand(batch_size, -1, -1)
        if mode == "eval" or self.cfg.noise_scale == 0:
            return mu
        noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
        return mu + self.slot_sigma * noise

    def encode_slots(self, features: torch.Tensor, mode: str | None = None) -> SlotEmbeddings:
        slots = self.init_slots(features.shape[0], mode)
        out = SlotEmbeddings(slots)
        for i, layer in enumerate(self.layers):
            slots, maps = layer.grouping(slots, features, layer=i)
            out.attention_maps += maps
            out.map_index += [(i, it) for it in range(len(maps))]
            slots = layer.shared(slots)
        out.slots = self.final_norm(slots)
        return out

    def _run_shared(self, x, key_padding=None):
        for layer in self.layers:
            x = layer.shared(x, key_padding)
        return self.final_norm(x)

    def encode_text(self, ids: torch.Tensor) -> TextEmbedding:
        if ids.ndim == 1:
            ids = ids[None]
        if ids.shape[1] == 0:
            raise ValueError("cannot encode an empty token sequence")
        self._check_ids(ids)
        pad = ids == self.pad_id
        x = self.text_embed(ids) + self.text_pos[: ids.shape[1]]
        per_token = self._run_shared(x, key_padding=pad)
        last = ((~pad).sum(1) - 1).clamp_min(0)
        final = per_token[torch.arange(ids.shape[0]), last]
        return TextEmbedding(final, per_token)

    def i2t_logits(self, slots: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
        """Next-token logits for ``ids[:, 1:]`` with all slots as a causal prefix."""
        self._check_ids(ids)
        inp = ids[:, :-1]
        pad = inp == self.pad_id
        n = slots.shape[1]
        x = torch.cat([slots, self.text_embed(inp) + self.text_pos[: inp.shape[1]]], dim=1)
        key_padding = torch.cat([torch.zeros(pad.shape[0], n, dtype=torch.bool, device=pad.device), pad], dim=1)
        h = self._run_shared(x, key_padding)
        return self.lm_head(h[:, n:])

    def _check_ids(self, ids):
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise ValueError(f"token id out of vocabulary range [0, {self.vocab_size})")

    def shared_modules(self):
        """(self-attention, feed-forward) module pairs used by both branches."""
        return [(layer.self_attn, layer.ff) for layer in self.layers]
