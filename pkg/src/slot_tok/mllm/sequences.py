"""Vocabulary layout and mixed text/visual sequence assembly.

Loss masks are target-aligned: ``loss_mask[p]`` is True when token ``p``
is a training target, i.e. the prediction made at position ``p - 1`` is
scored. Position 0 is never a target.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..synthdata import Vocabulary

TEXT, VISUAL, SPECIAL = "text", "visual", "special"


@dataclass(frozen=True)
class VocabLayout:
    text_size: int
    visual_offset: int
    visual_size: int
    boi_id: int
    eoi_id: int
    pad_id: int = 0
    bos_id: int = 1
    eos_id: int = 2

    @property
    def total(self) -> int:
        return self.text_size + self.visual_size + 2

    def classify(self, token: int) -> tuple[str, int | str]:
        token = int(token)
        if 0 <= token < self.text_size:
            return TEXT, token
        if self.visual_offset <= token < self.visual_offset + self.visual_size:
            return VISUAL, token - self.visual_offset
        if token == self.boi_id:
            return SPECIAL, "boi"
        if token == self.eoi_id:
            return SPECIAL, "eoi"
        raise ValueError(f"id {token} outside vocabulary of size {self.total}")

    def compose(self, kind: str, payload) -> int:
        if kind == TEXT:
            return int(payload)
        if kind == VISUAL:
            return self.visual_offset + int(payload)
        return self.boi_id if payload == "boi" else self.eoi_id

    def is_visual(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids)
        return (ids >= self.visual_offset) & (ids < self.visual_offset + self.visual_size)


def build_vocab(text_vocab: Vocabulary | int, visual_size: int) -> VocabLayout:
    """Text ids first, then the visual block, then ``<boi>``, ``<eoi>``."""
    if isinstance(text_vocab, Vocabulary):
        t, pad, bos, eos = text_vocab.size, text_vocab.pad_id, text_vocab.bos_id, text_vocab.eos_id
    else:
        t, pad, bos, eos = int(text_vocab), 0, 1, 2
    if visual_size < 1:
        raise ValueError("visual_size must be positive")
    layout = VocabLayout(t, t, visual_size, t + visual_size, t + visual_size + 1, pad, bos, eos)
    specials = {layout.boi_id, layout.eoi_id}
    if len(specials) != 2 or any(layout.visual_offset <= s < layout.visual_offset + visual_size for s in specials):
        raise ValueError("special ids overlap the visual block")
    if layout.visual_offset < t:
        raise ValueError("visual block overlaps text ids")
    return layout


def image_to_lm_tokens(codes, layout: VocabLayout, order: str = "slot_major") -> list[int]:
    """(N, K) codes -> ``<boi>`` + N*K visual ids + ``<eoi>``."""
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise ValueError("expected a single (N, K) code array")
    if codes.min() < 0 or codes.max() >= layout.visual_size:
        raise ValueError("code outside the visual block")
    flat = codes.reshape(-1) if order == "slot_major" else codes.T.reshape(-1)
    return [layout.boi_id, *(layout.visual_offset + flat).tolist(), layout.eoi_id]


def lm_tokens_to_image(ids, layout: VocabLayout, n: int, k: int, order: str = "slot_major") -> np.ndarray:
    ids = list(ids)
    if len(ids) != n * k + 2 or ids[0] != layout.boi_id or ids[-1] != layout.eoi_id:
        raise ValueError(f"expected <boi> + {n * k} visual ids + <eoi>, got length {len(ids)}")
    body = np.asarray(ids[1:-1]) - layout.visual_offset
    if body.min() < 0 or body.max() >= layout.visual_size:
        raise ValueError("non-visual id inside an image span")
    return body.reshape(n, k) if order == "slot_major" else body.reshape(k, n).T


@dataclass
class MixedSequence:
    ids: list[int] = field(default_factory=list)
    loss_mask: list[bool] = field(default_factory=list)
    segment_tags: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    def extend(self, ids, tag: str, active: bool) -> "MixedSequence":
        self.ids += list(ids)
        self.loss_mask += [active] * len(ids)
        self.segment_tags += [tag] * len(ids)
        return self

    def __add__(self, other: "MixedSequence") -> "MixedSequence":
        return MixedSequence(self.ids + other.ids, self.loss_mask + other.loss_mask, self.segment_tags + other.segment_tags)


def text_fragment(words_or_ids, vocab: Vocabulary | None = None) -> MixedSequence:
    ids = vocab.encode(words_or_ids) if vocab is not None else list(words_or_ids)
    return MixedSequence().extend(ids, TEXT, False)


def image_fragment(codes, layout: VocabLayout, order: str = "slot_major") -> MixedSequence:
    ids = image_to_lm_tokens(codes, layout, order)
    tags = [SPECIAL] + [VISUAL] * (len(ids) - 2) + [SPECIAL]
    return MixedSequence(ids, [False] * len(ids), tags)


def _activate(seq: MixedSequence) -> MixedSequence:
    return MixedSequence(list(seq.ids), [True] * len(seq), list(seq.segment_tags))


def strip_caption(caption_ids: list[int], layout: VocabLayout) -> list[int]:
    return [i for i in caption_ids if i not in (layout.bos_id, layout.eos_id, layout.pad_id)]


def assemble_pretrain(image_ids: list[int], caption_ids: list[int], layout: VocabLayout,
                      direction: str | None = None, rng: np.random.Generator | None = None) -> MixedSequence:
    """One image-text pair; the loss covers only the output modality.

    ``image_ids`` is an already flattened ``<boi> ... <eoi>`` span.
    """
    if not image_ids or not caption_ids:
        raise ValueError("both parts of the pair must be non-empty")
    if direction is None:
        direction = "t2i" if (rng or np.random.default_rng()).random() < 0.5 else "i2t"
    words = strip_caption(caption_ids, layout)
    img = MixedSequence(list(image_ids), [False] * len(image_ids), [SPECIAL] + [VISUAL] * (len(image_ids) - 2) + [SPECIAL])
    bos = MixedSequence().extend([layout.bos_id], SPECIAL, False)
    if direction == "t2i":
        return bos + text_fragment(words) + _activate(img)
    if direction == "i2t":
        text = MixedSequence().extend(words + [layout.eos_id], TEXT, True)
        return bos + img + text
    raise ValueError(f"unknown direction {direction!r}")


def assemble_interleaved(pairs: list[tuple[list[int], list[int]]], layout: VocabLayout) -> MixedSequence:
    """Image/caption pairs concatenated as one document; only text is loss-active."""
    seq = MixedSequence().extend([layout.bos_id], SPECIAL, False)
    for image_ids, caption_ids in pairs:
        seq = seq + MixedSequence(list(image_ids), [False] * len(image_ids),
                                  [SPECIAL] + [VISUAL] * (len(image_ids) - 2) + [SPECIAL])
        seq.extend(strip_caption(caption_ids, layout), TEXT, True)
    return seq.extend([layout.eos_id], TEXT, True)


def assemble_sft(instruction: MixedSequence, answer: MixedSequence, vocab: Vocabulary,
                 layout: VocabLayout) -> MixedSequence:
    """``USER: <instruction> \\n ASSISTANT: <answer>`` with loss on the answer only."""
    seq = MixedSequence().extend([layout.bos_id], SPECIAL, False)
    seq.extend(vocab.encode(["USER:"]), TEXT, False)
    seq = seq + MixedSequence(list(instruction.ids), [False] * len(instruction), list(instruction.segment_tags))
    seq.extend(vocab.encode(["\n", "ASSISTANT:"]), TEXT, False)
    seq = seq + _activate(answer)
    return seq.extend([layout.eos_id], TEXT, True)


def check_spans(ids, layout: VocabLayout, span_len: int) -> list[str]:
    """Structural violations: unmatched markers, wrong span lengths, stray visual ids."""
    problems = []
    inside = False
    count = 0
    for pos, tok in enumerate(ids):
        kind, payload = layout.classify(tok)
        if payload == "boi":
            if inside:
                problems.append(f"nested <boi> at {pos}")
            inside, count = True, 0
        elif payload == "eoi":
            if not inside:
                problems.append(f"<eoi> without <boi> at {pos}")
            elif count != span_len:
                problems.append(f"span closed at {pos} with {count} visual ids, expected {span_len}")
            inside = False
        elif kind == VISUAL:
            if not inside:
                problems.append(f"visual id outside span at {pos}")
            count += 1
        elif inside:
            problems.append(f"text id inside span at {pos}")
    if inside:
        problems.append("unterminated image span")
    return problems
