"""Constrained autoregressive decoding over mixed text/visual sequences."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import torch

from .model import ContextOverflowError, TinyLM
from .sequences import SPECIAL, VISUAL, MixedSequence, VocabLayout


@dataclass
class SamplerConfig:
    greedy: bool = True
    temperature: float = 1.0
    top_k: int = 0
    max_new_tokens: int = 64
    seed: int = 0


def _state(ids: list[int], layout: VocabLayout) -> tuple[bool, int]:
    inside, count = False, 0
    for tok in ids:
        if tok == layout.boi_id:
            inside, count = True, 0
        elif tok == layout.eoi_id:
            inside = False
        elif inside:
            count += 1
    return inside, count


def _allowed(layout: VocabLayout, inside: bool, count: int, span_len: int, budget: int) -> torch.Tensor:
    allow = torch.zeros(layout.total, dtype=torch.bool)
    if inside:
        if count < span_len:
            allow[layout.visual_offset : layout.visual_offset + layout.visual_size] = True
        else:
            allow[layout.eoi_id] = True
        return allow
    allow[: layout.text_size] = True
    allow[layout.pad_id] = False
    allow[layout.bos_id] = False
    if budget >= span_len + 2:
        allow[layout.boi_id] = True
    return allow


@torch.no_grad()
def _generate_group(model: TinyLM, prompts: list[list[int]], layout: VocabLayout, span_len: int,
                    cfg: SamplerConfig, generator: torch.Generator) -> list[list[int]]:
    ids = torch.as_tensor(prompts, dtype=torch.long)
    b = ids.shape[0]
    states = [_state(p, layout) for p in prompts]
    done = [False] * b
    produced = [0] * b
    context = model.cfg.context
    if ids.shape[1] >= context:
        raise ContextOverflowError(f"prompt of length {ids.shape[1]} leaves no room in context {context}")
    outputs = [list(p) for p in prompts]
    while not all(done):
        if ids.shape[1] >= context:
            if any(states[i][0] for i in range(b) if not done[i]):
                raise ContextOverflowError("context exhausted inside an open image span")
            break
        logits = model(ids)[:, -1].float()
        masks = []
        for i in range(b):
            inside, count = states[i]
            budget = min(cfg.max_new_tokens - produced[i], context - ids.shape[1])
            masks.append(_allowed(layout, inside, count, span_len, budget))
        mask = torch.stack(masks)
        logits = logits.masked_fill(~mask, float("-inf"))
        if cfg.greedy:
            nxt = logits.argmax(-1)
        else:
            scaled = logits / max(cfg.temperature, 1e-6)
            if cfg.top_k:
                kth = scaled.topk(min(cfg.top_k, scaled.shape[-1]), dim=-1).values[:, -1:]
                scaled = scaled.masked_fill(scaled < kth, float("-inf"))
            nxt = torch.multinomial(scaled.softmax(-1), 1, generator=generator).squeeze(-1)
        for i in range(b):
            if done[i]:
                nxt[i] = layout.pad_id
                continue
            tok = int(nxt[i])
            outputs[i].append(tok)
            produced[i] += 1
            inside, count = states[i]
            if tok == layout.boi_id:
                states[i] = (True, 0)
            elif tok == layout.eoi_id:
                states[i] = (False, 0)
            elif inside:
                states[i] = (True, count + 1)
            if not states[i][0] and (tok == layout.eos_id or produced[i] >= cfg.max_new_tokens):
                done[i] = True
        ids = torch.cat([ids, nxt[:, None]], dim=1)
    return outputs


def _tags(ids: list[int], layout: VocabLayout) -> list[str]:
    return [layout.classify(tok)[0] for tok in ids]


def generate(model: TinyLM, prompts: list[MixedSequence] | MixedSequence, layout: VocabLayout, span_len: int,
             cfg: SamplerConfig | None = None) -> list[MixedSequence] | MixedSequence:
    """Decode continuations; image spans are always ``<boi>`` + ``span_len`` visual ids + ``<eoi>``."""
    cfg = cfg or SamplerConfig()
    single = isinstance(prompts, MixedSequence)
    prompts = [prompts] if single else list(prompts)
    model.eval()
    generator = torch.Generator().manual_seed(cfg.seed)
    groups: dict[int, list[int]] = defaultdict(list)
    for i, p in enumerate(prompts):
        groups[len(p)].append(i)
    results: list[MixedSequence | None] = [None] * len(prompts)
    for _, idx in sorted(groups.items()):
        outs = _generate_group(model, [prompts[i].ids for i in idx], layout, span_len, cfg, generator)
        for i, out in zip(idx, outs):
            n0 = len(prompts[i])
            results[i] = MixedSequence(out, list(prompts[i].loss_mask) + [False] * (len(out) - n0),
                                       list(prompts[i].segment_tags) + _tags(out[n0:], layout))
    return results[0] if single else results


def extract_spans(ids: list[int], layout: VocabLayout) -> list[list[int]]:
    spans, cur = [], None
    for tok in ids:
        if tok == layout.boi_id:
            cur = [tok]
        elif cur is not None:
            cur.append(tok)
            if tok == layout.eoi_id:
                spans.append(cur)
                cur = None
    return spans


__all__ = ["SamplerConfig", "generate", "extract_spans", "SPECIAL", "VISUAL"]
