"""Two-stage tokenizer training: continuous slot embeddings, then discrete tokens."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .config import TrainConfig
from .encoder import pad_captions, state_hash, to_tensor
from .synthdata import SceneSample
from .tokenizer import SlotTokenizer

log = logging.getLogger(__name__)


class NonFiniteComponentError(FloatingPointError):
    pass


class FrozenWeightsMutated(RuntimeError):
    pass


# -- losses --------------------------------------------------------------------

def itc_loss(slot_final: torch.Tensor, text_final: torch.Tensor, tau, normalize: bool = True) -> torch.Tensor:
    """Symmetric InfoNCE between final slot and final text embeddings (both directions summed, batch mean)."""
    if slot_final.shape[0] < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    if normalize:
        slot_final = F.normalize(slot_final, dim=-1)
        text_final = F.normalize(text_final, dim=-1)
    logits = slot_final @ text_final.T / tau
    target = torch.arange(logits.shape[0], device=logits.device)
    return F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target)


def i2t_loss(logits: torch.Tensor, ids: torch.Tensor, pad_id: int = 0) -> torch.Tensor:
    """Mean next-token cross-entropy of ``ids[:, 1:]`` given logits from :meth:`SlotQFormer.i2t_logits`."""
    if ids.shape[1] < 2:
        raise ValueError("caption must contain at least one token after <bos>")
    vocab = logits.shape[-1]
    if ids.max() >= vocab or ids.min() < 0:
        raise ValueError("caption id out of vocabulary")
    return F.cross_entropy(logits.reshape(-1, vocab), ids[:, 1:].reshape(-1), ignore_index=pad_id)


def clip_loss(global_emb: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    return (global_emb - reference).pow(2).sum(dim=-1).mean()


def recon_loss(rebuilt: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return F.mse_loss(rebuilt, target)


def lr_at(step: int, total: int, warmup: int, max_lr: float) -> float:
    """Linear warmup from 0 to ``max_lr`` then cosine annealing to 0 at ``total``."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if warmup and step < warmup:
        return max_lr * step / warmup
    progress = (step - warmup) / max(total - warmup, 1)
    return 0.5 * max_lr * (1 + math.cos(math.pi * progress))


def effective_weights(cfg: TrainConfig) -> dict[str, float]:
    w = cfg.weights
    out = {"clip": w.w1, "diff": w.w2, "itc": w.w3, "i2t": w.w4,
           "recon": w.w5, "commit": w.w6, "diff2": w.w7, "clip2": w.w8}
    if cfg.no_diffusion_loss:
        out["diff"] = out["diff2"] = 0.0
    if cfg.no_alignment_loss:
        out["itc"] = out["i2t"] = 0.0
    return out


def weighted_total(components: dict[str, torch.Tensor], weights: dict[str, float]) -> torch.Tensor:
    total = None
    for name, value in components.items():
        if not torch.isfinite(value).all():
            raise NonFiniteComponentError(f"loss component {name!r} is not finite")
        w = weights.get(name, 0.0)
        if w:
            total = w * value if total is None else total + w * value
    if total is None:
        return torch.zeros(())
    return total


# -- batches -------------------------------------------------------------------

@dataclass
class Batch:
    images: torch.Tensor  # Bx3xHxW in [0, 1]
    ids: torch.Tensor  # B x L caption ids, padded


def make_batch(samples: list[SceneSample], pad_id: int = 0) -> Batch:
    return Batch(to_tensor(np.stack([s.image for s in samples])), pad_captions([s.caption_ids for s in samples], pad_id))


class BatchSampler:
    """Seeded epoch-permutation sampler; batch composition depends only on the seed."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = np.random.default_rng(seed)
        self._order: list[int] = []

    def next(self) -> list[int]:
        out = []
        while len(out) < self.batch_size:
            if not self._order:
                self._order = self.rng.permutation(self.n).tolist()
            out.append(self._order.pop())
        return out


# -- stage steps ---------------------------------------------------------------

def stage1_components(model: SlotTokenizer, batch: Batch, weights: dict[str, float], generator=None) -> dict[str, torch.Tensor]:
    if model.reference is None:
        raise RuntimeError("stage 1 needs a frozen reference embedder attached to the tokenizer")
    se = model.encode_slots(batch.images)
    cond = model.decoder.condition(se.slots)
    comps: dict[str, torch.Tensor] = {}
    comps["clip"] = clip_loss(cond.global_, model.reference.reference_embed(batch.images))
    if weights["diff"]:
        comps["diff"] = model.decoder.diffusion_loss(batch.images, cond, generator).loss
    if weights["itc"] or weights["i2t"]:
        qf = model.qformer
        text = qf.encode_text(batch.ids)
        comps["itc"] = itc_loss(se.slots[:, -1], text.final, qf.temperature)
        comps["i2t"] = i2t_loss(qf.i2t_logits(se.slots, batch.ids), batch.ids, qf.pad_id)
    return comps


def stage2_components(model: SlotTokenizer, batch: Batch, weights: dict[str, float], generator=None):
    with torch.no_grad():
        target = model.encode_slots(batch.images, mode="eval").slots
    quant = model.quantizer.quantize(target, model.config_hash)
    rebuilt = model.quantizer.decode_quantized(quant.quantized)
    comps = {"recon": recon_loss(rebuilt, target), "commit": quant.commit_loss}
    if weights["diff2"] or weights["clip2"]:
        cond = model.decoder.condition(rebuilt)
        comps["clip2"] = clip_loss(cond.global_, model.reference.reference_embed(batch.images))
        if weights["diff2"]:
            comps["diff2"] = model.decoder.diffusion_loss(batch.images, cond, generator).loss
    return comps, quant


def set_stage(model: SlotTokenizer, stage: int) -> list[torch.nn.Parameter]:
    """Freeze per stage; returns the trainable parameters."""
    model.zero_grad(set_to_none=True)
    if stage == 1:
        model.requires_grad_(True)
        model.quantizer.requires_grad_(False)
        if not model.cfg.train_encoder:
            model.encoder.requires_grad_(False)
        if model.cfg.decoder.freeze_unet_body:
            keep = {id(p) for p in model.decoder.unet.cross_attention_parameters()}
            for p in model.decoder.unet.parameters():
                p.requires_grad_(id(p) in keep)
    else:
        model.requires_grad_(False)
        for mod in (model.quantizer.down, model.quantizer.up, model.quantizer.block):
            mod.requires_grad_(True)
    return [p for p in model.parameters() if p.requires_grad]


def frozen_hash(model: SlotTokenizer) -> str:
    """Hash of everything stage 2 must not touch."""
    import hashlib

    h = hashlib.sha256()
    for part in (model.encoder, model.qformer, model.decoder):
        h.update(state_hash(part).encode())
    return h.hexdigest()


@dataclass
class TrainResult:
    trace: list[dict] = field(default_factory=list)


class StageTrainer:
    def __init__(self, model: SlotTokenizer, cfg: TrainConfig, samples: list[SceneSample], pad_id: int = 0):
        cfg.validate()
        self.model = model
        self.cfg = cfg
        self.samples = samples
        self.pad_id = pad_id
        self.weights = effective_weights(cfg)
        torch.manual_seed(cfg.seed)
        self.generator = torch.Generator().manual_seed(cfg.seed + 1)
        self.sampler = BatchSampler(len(samples), cfg.batch_size, cfg.seed)
        self.params = set_stage(model, cfg.stage)
        self.opt = torch.optim.AdamW(
            self.params, lr=0.0, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps, weight_decay=cfg.weight_decay
        )
        self.step_no = 0
        self.frozen_ref = None
        if cfg.stage == 2:
            self.frozen_ref = frozen_hash(model)
            if not bool(model.quantizer.codebook.initialized):
                self._init_codebook()

    def _init_codebook(self):
        # one deterministic pass over (up to) 256 samples
        idx = list(range(min(len(self.samples), 256)))
        batch = make_batch([self.samples[i] for i in idx], self.pad_id)
        with torch.no_grad():
            slots = self.model.encode_slots(batch.images, mode="eval").slots
        self.model.quantizer.init_codebook(slots, torch.Generator().manual_seed(self.cfg.seed + 2))

    def step(self) -> dict:
        cfg = self.cfg
        batch = make_batch([self.samples[i] for i in self.sampler.next()], self.pad_id)
        lr = lr_at(self.step_no, cfg.total_steps, cfg.warmup_steps, cfg.max_lr)
        for group in self.opt.param_groups:
            group["lr"] = lr
        self.model.train()
        if cfg.stage == 1:
            comps = stage1_components(self.model, batch, self.weights, self.generator)
            quant = None
        else:
            self.model.eval()
            comps, quant = stage2_components(self.model, batch, self.weights, self.generator)
        total = weighted_total(comps, self.weights)
        self.opt.zero_grad(set_to_none=True)
        if total.requires_grad:
            total.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(self.params, cfg.grad_clip)
            self.opt.step()
        if quant is not None:
            self.model.quantizer.codebook_update(quant)
        self.step_no += 1
        record = {"step": self.step_no, "lr": lr, "total": total.item()}
        record.update({k: v.item() for k, v in comps.items()})
        return record

    def check_frozen(self) -> None:
        if self.frozen_ref is not None and frozen_hash(self.model) != self.frozen_ref:
            raise FrozenWeightsMutated("frozen Slot Q-Former / decoder weights changed during stage 2")

    def fit(self, steps: int | None = None, log_path: str | Path | None = None,
            callback: Callable[[dict], None] | None = None) -> TrainResult:
        steps = steps if steps is not None else self.cfg.total_steps
        result = TrainResult()
        fh = open(log_path, "a") if log_path else None
        try:
            for _ in range(steps):
                rec = self.step()
                result.trace.append(rec)
                if fh and (rec["step"] % self.cfg.log_every == 0 or rec["step"] == steps):
                    fh.write(json.dumps(rec) + "\n")
                    fh.flush()
                if rec["step"] % max(self.cfg.log_every, 1) == 0:
                    log.info("stage%d %s", self.cfg.stage, " ".join(f"{k}={v:.4g}" for k, v in rec.items()))
                    self.check_frozen()
                if callback:
                    callback(rec)
        finally:
            if fh:
                fh.close()
        self.check_frozen()
        self.model.eval()
        return result
