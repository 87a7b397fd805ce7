"""Small transformer building blocks shared by the encoder, Q-Former, decoder and LM."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def causal_mask(length: int, device=None) -> torch.Tensor:
    """Boolean mask, True where attention is blocked."""
    return torch.triu(torch.ones(length, length, dtype=torch.bool, device=device), diagonal=1)


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int, kv_dim: int | None = None):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim={dim} not divisible by heads={heads}")
        kv_dim = kv_dim or dim
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(kv_dim, dim)
        self.v_proj = nn.Linear(kv_dim, dim)
        self.o_proj = nn.Linear(dim, dim)

    def forward(
        self,
        x: torch.Tensor,
        context: torch.Tensor | None = None,
        mask: torch.Tensor | None = None,
        key_padding: torch.Tensor | None = None,
        return_weights: bool = False,
    ):
        context = x if context is None else context
        b, n, d = x.shape
        m = context.shape[1]
        hd = d // self.heads
        q = self.q_proj(x).view(b, n, self.heads, hd).transpose(1, 2)
        k = self.k_proj(context).view(b, m, self.heads, hd).transpose(1, 2)
        v = self.v_proj(context).view(b, m, self.heads, hd).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(hd)
        if mask is not None:
            logits = logits.masked_fill(mask, float("-inf"))
        if key_padding is not None:
            logits = logits.masked_fill(key_padding[:, None, None, :], float("-inf"))
        weights = logits.softmax(dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, n, d)
        out = self.o_proj(out)
        if return_weights:
            return out, weights.mean(dim=1)
        return out


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * mult)
        self.fc2 = nn.Linear(dim * mult, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm self-attention + feed-forward block."""

    def __init__(self, dim: int, heads: int, causal: bool = False):
        super().__init__()
        self.causal = causal
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)

    def forward(self, x, key_padding=None):
        mask = causal_mask(x.shape[1], x.device) if self.causal else None
        x = x + self.attn(self.norm1(x), mask=mask, key_padding=key_padding)
        return x + self.ff(self.norm2(x))


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64, device=t.device) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([args.sin(), args.cos()], dim=-1)
    return emb.to(torch.get_default_dtype())
