"""Training loop for the multimodal LM (pretraining pairs or SFT sequences)."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..config import LMTrainConfig
from ..training import BatchSampler, lr_at
from .model import ContextOverflowError, LoraSpec, TinyLM, collate, lm_step, lora_apply, teacher_forced_accuracy
from .sequences import MixedSequence, VocabLayout, assemble_pretrain, image_to_lm_tokens

log = logging.getLogger(__name__)


@dataclass
class LMTrainResult:
    model: TinyLM
    trace: list[dict] = field(default_factory=list)


def pretrain_sequences(codes: np.ndarray, captions: list[list[int]], layout: VocabLayout,
                       direction: str = "random", order: str = "slot_major", seed: int = 0) -> list[MixedSequence]:
    """One sequence per pair. ``direction="random"`` draws t2i/i2t per pair from ``seed``."""
    rng = np.random.default_rng(seed)
    out = []
    for c, cap in zip(codes, captions):
        d = None if direction == "random" else direction
        out.append(assemble_pretrain(image_to_lm_tokens(c, layout, order), cap, layout, d, rng))
    return out


def train_lm(seqs: list[MixedSequence], layout: VocabLayout, cfg: LMTrainConfig | None = None,
             model: TinyLM | None = None, steps: int | None = None,
             log_path: str | Path | None = None) -> LMTrainResult:
    cfg = cfg or LMTrainConfig()
    if not seqs:
        raise ValueError("no training sequences")
    longest = max(len(s) for s in seqs)
    torch.manual_seed(cfg.seed)
    if model is None:
        model = TinyLM(layout.total, cfg.lm)
    if longest > model.cfg.context:
        raise ContextOverflowError(f"sequence of length {longest} exceeds context {model.cfg.context}")
    if cfg.lora_rank:
        lora_apply(model, LoraSpec(rank=cfg.lora_rank))
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=0.0, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps,
                            weight_decay=cfg.weight_decay)
    sampler = BatchSampler(len(seqs), cfg.batch_size, cfg.seed)
    steps = steps if steps is not None else cfg.total_steps
    result = LMTrainResult(model)
    fh = open(log_path, "a") if log_path else None
    try:
        model.train()
        for step in range(steps):
            batch = collate([seqs[i] for i in sampler.next()], layout.pad_id)
            lr = lr_at(min(step, cfg.total_steps), cfg.total_steps, cfg.warmup_steps, cfg.max_lr)
            for g in opt.param_groups:
                g["lr"] = lr
            loss = lm_step(model, batch)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            rec = {"step": step + 1, "lr": lr, "loss": loss.item()}
            result.trace.append(rec)
            if (step + 1) % max(cfg.log_every, 1) == 0:
                log.info("lm step=%d loss=%.4f lr=%.2e", step + 1, rec["loss"], lr)
                if fh:
                    fh.write(json.dumps(rec) + "\n")
    finally:
        if fh:
            fh.close()
    model.eval()
    return result


def evaluate_accuracy(model: TinyLM, seqs: list[MixedSequence], pad_id: int = 0, batch_size: int = 64) -> float:
    """Teacher-forced accuracy pooled over all loss-active positions."""
    correct = total = 0
    for start in range(0, len(seqs), batch_size):
        batch = collate(seqs[start : start + batch_size], pad_id)
        n = int(batch.loss_mask[:, 1:].sum())
        correct += teacher_forced_accuracy(model, batch) * n
        total += n
    return correct / max(total, 1)
