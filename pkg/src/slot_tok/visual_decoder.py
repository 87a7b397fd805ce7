"""Slot-conditioned pixel diffusion decoder.

The slot set is refined by a transformer block into local conditioning
(read by cross-attention at every UNet resolution) and pooled by an MLP
head into a global vector that is added to the timestep embedding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import DecoderConfig, DiffusionConfig
from .layers import MultiHeadAttention, TransformerBlock, sinusoidal_embedding


@dataclass
class DecoderConditioning:
    local: torch.Tensor  # (B, N, D)
    global_: torch.Tensor  # (B, D_t)


@dataclass
class DiffusionOutput:
    loss: torch.Tensor
    t: torch.Tensor
    noise: torch.Tensor
    z_t: torch.Tensor
    eps_pred: torch.Tensor


class NonFiniteLossError(FloatingPointError):
    pass


def make_betas(cfg: DiffusionConfig) -> np.ndarray:
    cfg.validate()
    return np.linspace(cfg.beta_start, cfg.beta_end, cfg.timesteps, dtype=np.float64)


def _groups(c: int) -> int:
    return 8 if c % 8 == 0 else 1


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention2d(nn.Module):
    """Pixels attend to the slot set."""

    def __init__(self, channels: int, context_dim: int, heads: int):
        super().__init__()
        heads = heads if channels % heads == 0 else 1
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.attn = MultiHeadAttention(channels, heads, kv_dim=context_dim)

    def forward(self, x, context):
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        out = self.attn(tokens, context=context)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class UNet(nn.Module):
    def __init__(self, channels=(32, 64, 64), blocks_per_res: int = 2, tdim: int = 64, context_dim: int = 64, heads: int = 4):
        super().__init__()
        self.tdim = tdim
        self.time_mlp = nn.Sequential(nn.Linear(tdim, tdim * 2), nn.SiLU(), nn.Linear(tdim * 2, tdim))
        self.inp = nn.Conv2d(3, channels[0], 3, padding=1)
        self.down = nn.ModuleList()
        prev = channels[0]
        for i, c in enumerate(channels):
            level = nn.Module()
            level.blocks = nn.ModuleList(ResBlock(prev if j == 0 else c, c, tdim) for j in range(blocks_per_res))
            level.attn = CrossAttention2d(c, context_dim, heads)
            level.resample = nn.Conv2d(c, c, 3, stride=2, padding=1) if i < len(channels) - 1 else nn.Identity()
            self.down.append(level)
            prev = c
        self.mid1 = ResBlock(prev, prev, tdim)
        self.mid_attn = CrossAttention2d(prev, context_dim, heads)
        self.mid2 = ResBlock(prev, prev, tdim)
        self.up = nn.ModuleList()
        for i, c in enumerate(reversed(channels)):
            level = nn.Module()
            level.blocks = nn.ModuleList(ResBlock(prev + c if j == 0 else c, c, tdim) for j in range(blocks_per_res))
            level.attn = CrossAttention2d(c, context_dim, heads)
            level.resample = (
                nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(c, c, 3, padding=1))
                if i < len(channels) - 1
                else nn.Identity()
            )
            self.up.append(level)
            prev = c
        self.out_norm = nn.GroupNorm(_groups(prev), prev)
        self.out = nn.Conv2d(prev, 3, 3, padding=1)

    def time_embedding(self, t: torch.Tensor) -> torch.Tensor:
        return self.time_mlp(sinusoidal_embedding(t, self.tdim).to(self.inp.weight.dtype))

    def forward(self, x, t, global_cond, local_cond):
        # global conditioning joins after the timestep MLP
        temb = self.time_embedding(t) + global_cond
        h = self.inp(x)
        skips = []
        for level in self.down:
            for block in level.blocks:
                h = block(h, temb)
            h = level.attn(h, local_cond)
            skips.append(h)
            h = level.resample(h)
        h = self.mid2(self.mid_attn(self.mid1(h, temb), local_cond), temb)
        for level in self.up:
            if h.shape[-1] != skips[-1].shape[-1]:
                h = F.interpolate(h, size=skips[-1].shape[-2:], mode="nearest")
            h = torch.cat([h, skips.pop()], dim=1)
            for block in level.blocks:
                h = block(h, temb)
            h = level.attn(h, local_cond)
            h = level.resample(h)
        return self.out(F.silu(self.out_norm(h)))

    def cross_attention_parameters(self):
        mods = [lvl.attn for lvl in self.down] + [self.mid_attn] + [lvl.attn for lvl in self.up]
        return [p for m in mods for p in m.parameters()]


class VisualDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig, slot_dim: int, global_dim: int, image_size: int = 64, heads: int = 4):
        super().__init__()
        self.cfg = cfg
        self.image_size = image_size
        self.refiner = TransformerBlock(slot_dim, heads)
        self.refine_norm = nn.LayerNorm(slot_dim)
        self.global_mlp = nn.Sequential(nn.Linear(slot_dim, slot_dim * 2), nn.GELU(), nn.Linear(slot_dim * 2, global_dim))
        self.unet = UNet(cfg.channels, cfg.blocks_per_res, global_dim, slot_dim, cfg.heads)
        betas = make_betas(cfg.diffusion)
        alphas_cumprod = np.cumprod(1.0 - betas)
        self.register_buffer("betas", torch.as_tensor(betas), persistent=False)
        self.register_buffer("alphas_cumprod", torch.as_tensor(alphas_cumprod), persistent=False)
        if cfg.freeze_unet_body:
            keep = {id(p) for p in self.unet.cross_attention_parameters()}
            for p in self.unet.parameters():
                if id(p) not in keep:
                    p.requires_grad_(False)

    @property
    def timesteps(self) -> int:
        return self.cfg.diffusion.timesteps

    def refine(self, slots: torch.Tensor) -> torch.Tensor:
        return self.refine_norm(self.refiner(slots))

    def global_head(self, refined: torch.Tensor) -> torch.Tensor:
        if self.cfg.global_pooling == "mlp_then_pool":
            return self.global_mlp(refined).mean(dim=1)
        return self.global_mlp(refined.mean(dim=1))

    def condition(self, slots: torch.Tensor) -> DecoderConditioning:
        refined = self.refine(slots)
        return DecoderConditioning(refined, self.global_head(refined))

    def q_sample(self, x0: torch.Tensor, t: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        a = self.alphas_cumprod[t].to(x0.dtype)[:, None, None, None]
        return a.sqrt() * x0 + (1 - a).sqrt() * noise

    def predict_noise(self, z_t, t, cond: DecoderConditioning):
        out = self.unet(z_t, t, cond.global_, cond.local)
        if not self.cfg.noise_skip:
            return out
        # at high noise the target is almost z_t itself; the skip carries that part and the
        # network supplies a bounded residual, so the implied x0 no longer divides its error by sqrt(abar)
        a = self.alphas_cumprod[t].to(z_t.dtype)[:, None, None, None]
        return (1 - a).sqrt() * z_t + a.sqrt() * out

    def diffusion_loss(
        self,
        images: torch.Tensor,
        cond: DecoderConditioning,
        generator: torch.Generator | None = None,
        t: torch.Tensor | None = None,
        noise: torch.Tensor | None = None,
    ) -> DiffusionOutput:
        """Noise-prediction MSE on pixels scaled to [-1, 1]; ``images`` are Bx3xHxW in [0, 1]."""
        x0 = images * 2 - 1
        b = x0.shape[0]
        if t is None:
            t = torch.randint(0, self.timesteps, (b,), generator=generator)
        if noise is None:
            noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
        z_t = self.q_sample(x0, t, noise)
        eps = self.predict_noise(z_t, t, cond)
        loss = F.mse_loss(eps, noise)
        if not torch.isfinite(loss):
            raise NonFiniteLossError(f"non-finite diffusion loss (t={t.tolist()})")
        return DiffusionOutput(loss, t, noise, z_t, eps)

    @torch.no_grad()
    def sample(self, cond: DecoderConditioning, steps: int | None = None, seed: int = 0, eta: float = 0.0, size: int | None = None):
        """Strided DDIM sampling (eta=1 gives ancestral DDPM-style noise). Returns Bx3xHxW in [0, 1]."""
        steps = min(steps or self.timesteps, self.timesteps)
        size = size or self.image_size
        b = cond.local.shape[0]
        g = torch.Generator().manual_seed(seed)
        dtype = cond.local.dtype
        x = torch.randn((b, 3, size, size), generator=g, dtype=dtype)
        ts = np.linspace(self.timesteps - 1, 0, steps).round().astype(int)
        ac = self.alphas_cumprod.to(dtype)
        for i, t in enumerate(ts):
            tt = torch.full((b,), int(t), dtype=torch.long)
            eps = self.predict_noise(x, tt, cond)
            a_t = ac[t]
            x0 = ((x - (1 - a_t).sqrt() * eps) / a_t.sqrt()).clamp(-1, 1)
            if i == len(ts) - 1:
                x = x0
                break
            a_prev = ac[ts[i + 1]]
            sigma = eta * ((1 - a_prev) / (1 - a_t) * (1 - a_t / a_prev)).clamp_min(0).sqrt()
            eps = (x - a_t.sqrt() * x0) / (1 - a_t).sqrt()
            x = a_prev.sqrt() * x0 + (1 - a_prev - sigma**2).clamp_min(0).sqrt() * eps
            if eta > 0:
                x = x + sigma * torch.randn(x.shape, generator=g, dtype=dtype)
        return ((x + 1) / 2).clamp(0, 1)
