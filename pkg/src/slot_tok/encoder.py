"""Feature encoder and the frozen reference image-text embedder.

``FeatureEncoder`` turns an image into a patch feature grid. The
``ReferenceEmbedder`` is a tiny two-tower contrastive model trained once
("stage 0"), frozen, and used only to supply the global image target for
the alignment loss of the visual decoder.
"""
from __future__ import annotations

import hashlib
import io
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .layers import TransformerBlock

log = logging.getLogger(__name__)


class FrozenModelError(RuntimeError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class FeatureGrid:
    features: torch.Tensor  # (B, M, D_input)
    grid_shape: tuple[int, int]


def to_tensor(images) -> torch.Tensor:
    """HxWx3 / BxHxWx3 arrays in [0,1] -> Bx3xHxW tensor in the default dtype."""
    x = torch.as_tensor(np.asarray(images), dtype=torch.get_default_dtype())
    if x.ndim == 3:
        x = x[None]
    return x.permute(0, 3, 1, 2).contiguous()


class FeatureEncoder(nn.Module):
    def __init__(self, image_size: int = 64, patch_size: int = 8, dim: int = 64, layers: int = 2, heads: int = 4):
        super().__init__()
        if image_size % patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        self.image_size = image_size
        self.patch_size = patch_size
        self.grid = (image_size // patch_size, image_size // patch_size)
        m = self.grid[0] * self.grid[1]
        self.patch = nn.Conv2d(3, dim, patch_size, stride=patch_size)
        self.pos = nn.Parameter(torch.randn(1, m, dim) * 0.02)
        self.blocks = nn.ModuleList(TransformerBlock(dim, heads) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1:] != (3, self.image_size, self.image_size):
            raise ValueError(
                f"expected images of shape (B, 3, {self.image_size}, {self.image_size}), got {tuple(x.shape)}"
            )
        h = self.patch(x * 2 - 1).flatten(2).transpose(1, 2) + self.pos
        for block in self.blocks:
            h = block(h)
        return self.norm(h)

    def encode_features(self, x: torch.Tensor) -> FeatureGrid:
        return FeatureGrid(self(x), self.grid)


# -- reference embedder --------------------------------------------------------

class _ImageTower(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(64, 64, 3, stride=2, padding=1),
            nn.GELU(),
        )
        self.head = nn.Linear(64 * 2, dim)

    def forward(self, x):
        h = self.net(x * 2 - 1)
        pooled = torch.cat([h.mean(dim=(2, 3)), h.amax(dim=(2, 3))], dim=-1)
        return self.head(pooled)


class _TextTower(nn.Module):
    def __init__(self, vocab_size: int, dim: int, max_len: int = 32, pad_id: int = 0):
        super().__init__()
        self.pad_id = pad_id
        self.tok = nn.Embedding(vocab_size, dim)
        self.pos = nn.Parameter(torch.randn(1, max_len, dim) * 0.02)
        self.block = TransformerBlock(dim, 4)
        self.head = nn.Linear(dim, dim)

    def forward(self, ids):
        pad = ids == self.pad_id
        h = self.tok(ids) + self.pos[:, : ids.shape[1]]
        h = self.block(h, key_padding=pad)
        keep = (~pad).unsqueeze(-1).to(h.dtype)
        return self.head((h * keep).sum(1) / keep.sum(1).clamp_min(1.0))


class ReferenceEmbedder(nn.Module):
    """Two-tower image/caption embedder; frozen after :func:`pretrain_reference`."""

    def __init__(self, vocab_size: int, dim: int = 64, max_len: int = 32, pad_id: int = 0, version: str = "ref-v1"):
        super().__init__()
        self.image_tower = _ImageTower(dim)
        self.text_tower = _TextTower(vocab_size, dim, max_len, pad_id)
        self.dim = dim
        self.version = version
        self.frozen = False
        self.initialized = False

    def embed_images(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.image_tower(x), dim=-1)

    def embed_texts(self, ids: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.text_tower(ids), dim=-1)

    def freeze(self) -> "ReferenceEmbedder":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self.frozen = True
        self.initialized = True
        return self

    def check_trainable(self) -> None:
        if self.frozen:
            raise FrozenModelError("reference embedder is frozen; weight updates are not allowed")

    def content_hash(self) -> str:
        return state_hash(self)

    def train_step(self, x: torch.Tensor, ids: torch.Tensor, opt: torch.optim.Optimizer, temperature: float) -> float:
        self.check_trainable()
        loss = symmetric_infonce(self.embed_images(x), self.embed_texts(ids), temperature)
        if not math.isfinite(loss.item()):
            raise TrainingDivergedError(f"reference pretraining diverged: loss={loss.item()}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        return loss.item()

    @torch.no_grad()
    def reference_embed(self, x: torch.Tensor) -> torch.Tensor:
        if not self.initialized:
            raise RuntimeError("reference embedder not initialized; run pretrain_reference first")
        return self.embed_images(x)


def state_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        buf = io.BytesIO()
        np.save(buf, tensor.detach().cpu().numpy(), allow_pickle=False)
        h.update(buf.getvalue())
    return h.hexdigest()


def symmetric_infonce(a: torch.Tensor, b: torch.Tensor, temperature: float) -> torch.Tensor:
    logits = a @ b.T / temperature
    target = torch.arange(a.shape[0], device=a.device)
    return F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target)


def pad_captions(captions: list[list[int]], pad_id: int, length: int | None = None) -> torch.Tensor:
    length = length or max(len(c) for c in captions)
    out = torch.full((len(captions), length), pad_id, dtype=torch.long)
    for i, c in enumerate(captions):
        out[i, : len(c)] = torch.as_tensor(c[:length])
    return out


def pretrain_reference(
    images: np.ndarray,
    captions: list[list[int]],
    vocab_size: int,
    pad_id: int = 0,
    dim: int = 64,
    steps: int = 400,
    batch_size: int = 32,
    lr: float = 2e-3,
    temperature: float = 0.1,
    seed: int = 0,
) -> ReferenceEmbedder:
    """Train the two-tower embedder on paired data with symmetric InfoNCE, then freeze it."""
    if len(images) != len(captions) or len(images) < 2:
        raise ValueError("need at least two paired images and captions")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = ReferenceEmbedder(vocab_size, dim, pad_id=pad_id)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.01)
    x_all = to_tensor(images)
    ids_all = pad_captions(captions, pad_id)
    n = len(images)
    bs = min(batch_size, n)
    model.train()
    for step in range(steps):
        idx = torch.as_tensor(rng.choice(n, size=bs, replace=False))
        try:
            loss = model.train_step(x_all[idx], ids_all[idx], opt, temperature)
        except TrainingDivergedError as err:
            raise TrainingDivergedError(f"step {step}: {err}") from None
        if step % 100 == 0:
            log.info("pretrain-ref step %d loss %.4f", step, loss)
    return model.freeze()


def save_reference(model: ReferenceEmbedder, path) -> None:
    torch.save(
        {
            "kind": "reference",
            "vocab_size": model.text_tower.tok.num_embeddings,
            "dim": model.dim,
            "max_len": model.text_tower.pos.shape[1],
            "pad_id": model.text_tower.pad_id,
            "version": model.version,
            "hash": model.content_hash(),
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_reference(path) -> ReferenceEmbedder:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    model = ReferenceEmbedder(blob["vocab_size"], blob["dim"], blob["max_len"], blob["pad_id"], blob["version"])
    model.load_state_dict(blob["state_dict"])
    model.freeze()
    if model.content_hash() != blob["hash"]:
        raise ValueError(f"reference checkpoint {path} failed its content hash check")
    return model
