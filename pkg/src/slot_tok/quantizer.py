"""Residual vector quantization with a single shared EMA codebook.

Slots are projected down to ``code_dim``, quantized for ``depth`` residual
steps against one codebook, and mapped back up through a linear layer and
a transformer block. The codebook is learned by EMA with dead-code
revival rather than by gradients.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import QuantizerConfig
from .layers import TransformerBlock


@dataclass
class SlotTokens:
    codes: torch.Tensor  # (B, N, K) int64
    config_hash: str = ""


@dataclass
class QuantizeResult:
    tokens: SlotTokens
    z: torch.Tensor  # (B, N, d_code)
    z_hat_per_depth: list[torch.Tensor]
    quantized: torch.Tensor  # straight-through sum, same shape as z
    commit_loss: torch.Tensor
    residuals: list[torch.Tensor] = field(default_factory=list)  # r_{k-1} fed to depth k


class Codebook(nn.Module):
    def __init__(self, size: int, dim: int, decay: float = 0.99, dead_after: int = 50):
        super().__init__()
        self.size = size
        self.dim = dim
        self.decay = decay
        self.dead_after = dead_after
        self.register_buffer("entries", torch.randn(size, dim) * 0.1)
        self.register_buffer("cluster_size", torch.ones(size))
        self.register_buffer("embed_sum", self.entries.clone())
        self.register_buffer("usage_counts", torch.zeros(size, dtype=torch.long))
        self.register_buffer("last_counts", torch.zeros(size, dtype=torch.long))
        self.register_buffer("idle_steps", torch.zeros(size, dtype=torch.long))
        self.register_buffer("initialized", torch.tensor(False))

    def nearest(self, x: torch.Tensor) -> torch.Tensor:
        """Index of the nearest entry (squared L2) for each row of ``x``."""
        if not bool(self.initialized):
            raise RuntimeError("codebook is not initialized")
        flat = x.reshape(-1, self.dim)
        d = (
            flat.pow(2).sum(1, keepdim=True)
            - 2 * flat @ self.entries.T
            + self.entries.pow(2).sum(1)[None]
        )
        return d.argmin(dim=1).reshape(x.shape[:-1])

    def lookup(self, codes: torch.Tensor) -> torch.Tensor:
        if codes.numel() and (codes.min() < 0 or codes.max() >= self.size):
            bad = codes[(codes < 0) | (codes >= self.size)][0].item()
            raise IndexError(f"code {bad} out of range [0, {self.size})")
        return F.embedding(codes, self.entries)

    def set_entries(self, entries: torch.Tensor) -> None:
        self.entries.copy_(entries)
        self.embed_sum.copy_(entries)
        self.cluster_size.fill_(1.0)
        self.initialized.fill_(True)

    @torch.no_grad()
    def update(self, residuals: list[torch.Tensor], codes: list[torch.Tensor]) -> None:
        """EMA step over every (residual, code) pair of all depths, plus dead-code revival."""
        x = torch.cat([r.reshape(-1, self.dim) for r in residuals]).to(self.entries.dtype)
        idx = torch.cat([c.reshape(-1) for c in codes])
        counts = torch.bincount(idx, minlength=self.size)
        sums = torch.zeros_like(self.entries).index_add_(0, idx, x)
        used = counts > 0
        d = self.decay
        cs = d * self.cluster_size + (1 - d) * counts.to(self.cluster_size.dtype)
        es = d * self.embed_sum + (1 - d) * sums
        self.cluster_size[used] = cs[used]
        self.embed_sum[used] = es[used]
        self.entries[used] = self.embed_sum[used] / self.cluster_size[used, None]

        self.last_counts.copy_(counts)
        self.usage_counts += counts
        self.idle_steps[used] = 0
        self.idle_steps[~used] += 1
        dead = (self.idle_steps >= self.dead_after).nonzero().flatten()
        if len(dead):
            pick = torch.randint(0, x.shape[0], (len(dead),), device=x.device)
            self.entries[dead] = x[pick]
            self.embed_sum[dead] = x[pick]
            self.cluster_size[dead] = 1.0
            self.idle_steps[dead] = 0


class ResidualQuantizer(nn.Module):
    def __init__(self, cfg: QuantizerConfig, slot_dim: int, heads: int = 4):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.down = nn.Linear(slot_dim, cfg.code_dim)
        self.up = nn.Linear(cfg.code_dim, slot_dim)
        self.block = TransformerBlock(slot_dim, heads)
        self.codebook = Codebook(cfg.codebook_size, cfg.code_dim, cfg.decay, cfg.dead_after)

    def quantize_z(self, z: torch.Tensor, config_hash: str = "") -> QuantizeResult:
        residual = z.detach()
        codes, per_depth, residuals = [], [], []
        for _ in range(self.cfg.depth):
            residuals.append(residual)
            idx = self.codebook.nearest(residual)
            q = self.codebook.lookup(idx)
            codes.append(idx)
            per_depth.append(q)
            residual = residual - q
        commit = z.new_zeros(())
        cumulative = torch.zeros_like(z)
        for q in per_depth:
            cumulative = cumulative + q
            target = cumulative if self.cfg.commit == "cumulative" else q
            commit = commit + F.mse_loss(z, target.detach())
        quantized = z + (cumulative - z).detach()
        return QuantizeResult(
            tokens=SlotTokens(torch.stack(codes, dim=-1), config_hash),
            z=z,
            z_hat_per_depth=per_depth,
            quantized=quantized,
            commit_loss=commit,
            residuals=residuals,
        )

    def quantize(self, slots: torch.Tensor, config_hash: str = "") -> QuantizeResult:
        return self.quantize_z(self.down(slots), config_hash)

    def decode_quantized(self, quantized: torch.Tensor) -> torch.Tensor:
        return self.block(self.up(quantized))

    def dequantize(self, tokens: SlotTokens | torch.Tensor) -> torch.Tensor:
        codes = tokens.codes if isinstance(tokens, SlotTokens) else tokens
        if codes.shape[-1] != self.cfg.depth:
            raise ValueError(f"expected depth {self.cfg.depth}, got codes of shape {tuple(codes.shape)}")
        return self.decode_quantized(self.codebook.lookup(codes).sum(dim=-2))

    def codebook_update(self, result: QuantizeResult) -> None:
        codes = [result.tokens.codes[..., k] for k in range(self.cfg.depth)]
        self.codebook.update(result.residuals, codes)

    @torch.no_grad()
    def init_codebook(self, slots: torch.Tensor, generator: torch.Generator | None = None) -> None:
        """Seed entries from projected slot vectors so early assignments are not all collapsed."""
        z = self.down(slots).reshape(-1, self.cfg.code_dim)
        size = self.cfg.codebook_size
        pick = torch.randint(0, z.shape[0], (size,), generator=generator)
        jitter = torch.randn(size, self.cfg.code_dim, generator=generator) * z.std() * 0.1
        entries = z[pick] + jitter
        # depth > 1 residuals are small; a few near-zero entries serve them from step one
        entries[: size // 4] = jitter[: size // 4]
        self.codebook.set_entries(entries.to(self.codebook.entries.dtype))


# -- token stream files --------------------------------------------------------

MAGIC = b"SLTK"
VERSION = 1
# magic, version, N, K, reserved, V, config hash
_HEADER = struct.Struct("<4sHHHHI32s")


def write_tokens(path: str | Path, codes: np.ndarray, codebook_size: int, config_hash: str) -> None:
    """Write (B, N, K) codes: header then per-image N*K little-endian uint16, slot-major."""
    codes = np.asarray(codes)
    if codes.ndim == 2:
        codes = codes[None]
    _, n, k = codes.shape
    if codes.min() < 0 or codes.max() >= codebook_size:
        raise ValueError("codes out of codebook range")
    header = _HEADER.pack(MAGIC, VERSION, n, k, 0, codebook_size, config_hash.encode().ljust(32, b"\0")[:32])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(codes.astype("<u2").tobytes())


def read_tokens(path: str | Path) -> tuple[np.ndarray, dict]:
    raw = Path(path).read_bytes()
    magic, version, n, k, _, v, h = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path} is not a slot token file")
    if version != VERSION:
        raise ValueError(f"unsupported token file version {version}")
    body = np.frombuffer(raw, dtype="<u2", offset=_HEADER.size)
    if body.size % (n * k):
        raise ValueError("token file body is not a whole number of images")
    codes = body.reshape(-1, n, k).astype(np.int64)
    return codes, {"N": n, "K": k, "V": v, "config_hash": h.rstrip(b"\0").decode(), "version": version}
