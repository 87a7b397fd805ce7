"""End-to-end desk recipe: scenes -> reference embedder -> stage 1 -> stage 2 -> LM.

Used by the CLI ``desk-run`` command and by the acceptance tests. Trained
tokenizers are cached on disk keyed by the recipe hash, so re-running with an
identical recipe loads the checkpoint instead of retraining.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import (
    DecoderConfig,
    DiffusionConfig,
    LMConfig,
    LMTrainConfig,
    TokenizerConfig,
    TrainConfig,
    config_hash,
    small_preset,
)
from .encoder import pretrain_reference
from .synthdata import SceneSample, Vocabulary, generate_scene, make_splits
from .tokenizer import SlotTokenizer, load_tokenizer, save_tokenizer
from .training import StageTrainer

log = logging.getLogger(__name__)


@dataclass
class DeskRecipe:
    n_train: int = 64
    n_heldout: int = 32
    canvas: int = 32
    train_objects: tuple[int, int] = (1, 3)
    heldout_objects: tuple[int, int] = (2, 3)
    data_seed: int = 1
    heldout_seed: int = 99
    seed: int = 0
    patch_size: int = 2
    num_slots: int = 4
    slot_layers: int = 1
    slot_iters: int = 3
    # a frozen random encoder groups flat-colour scenes better than one co-trained with the decoder
    train_encoder: bool = False
    decoder_channels: tuple[int, ...] = (16, 32, 64)
    beta_start: float = 1e-4
    beta_end: float = 0.05
    ref_steps: int = 300
    batch_size: int = 16
    stage1_steps: int = 3000
    stage1_lr: float = 1e-3
    stage2_steps: int = 1000
    stage2_lr: float = 1e-3
    warmup_steps: int = 100
    no_slot_attention: bool = False
    no_diffusion_loss: bool = False
    no_alignment_loss: bool = False

    def ablation(self, **flags) -> "DeskRecipe":
        return dataclasses.replace(self, **flags)

    @property
    def key(self) -> str:
        return config_hash(self)


@dataclass
class DeskRun:
    recipe: DeskRecipe
    tokenizer: SlotTokenizer
    train: list[SceneSample]
    heldout: list[SceneSample]
    vocab: Vocabulary
    traces: dict[str, list[dict]] = field(default_factory=dict)


def build_scenes(recipe: DeskRecipe) -> tuple[list[SceneSample], list[SceneSample], Vocabulary]:
    vocab = Vocabulary.default()
    canvas = (recipe.canvas, recipe.canvas)
    train_specs, _ = make_splits(recipe.n_train, 1, recipe.data_seed, canvas, recipe.train_objects)
    _, held_specs = make_splits(1, recipe.n_heldout, recipe.heldout_seed, canvas, recipe.heldout_objects)
    return [generate_scene(s, vocab) for s in train_specs], [generate_scene(s, vocab) for s in held_specs], vocab


def tokenizer_config(recipe: DeskRecipe, vocab_size: int) -> TokenizerConfig:
    cfg = small_preset()
    cfg.image_size = recipe.canvas
    cfg.patch_size = recipe.patch_size
    cfg.vocab_size = vocab_size
    cfg.slots.num_slots = recipe.num_slots
    cfg.slots.num_layers = recipe.slot_layers
    cfg.slots.gru_iters = recipe.slot_iters
    cfg.train_encoder = recipe.train_encoder
    cfg.slots.no_slot_attention = recipe.no_slot_attention
    cfg.decoder = DecoderConfig(
        channels=tuple(recipe.decoder_channels),
        diffusion=DiffusionConfig(beta_start=recipe.beta_start, beta_end=recipe.beta_end),
    )
    return cfg


def stage_config(recipe: DeskRecipe, stage: int) -> TrainConfig:
    steps = recipe.stage1_steps if stage == 1 else recipe.stage2_steps
    return TrainConfig(
        stage=stage,
        max_lr=recipe.stage1_lr if stage == 1 else recipe.stage2_lr,
        warmup_steps=min(recipe.warmup_steps, steps - 1),
        total_steps=steps,
        batch_size=recipe.batch_size,
        seed=recipe.seed,
        log_every=100,
        no_slot_attention=recipe.no_slot_attention,
        no_diffusion_loss=recipe.no_diffusion_loss,
        no_alignment_loss=recipe.no_alignment_loss,
    )


def train_tokenizer(recipe: DeskRecipe, train: list[SceneSample], vocab: Vocabulary,
                    log_dir: str | Path | None = None) -> tuple[SlotTokenizer, dict[str, list[dict]]]:
    torch.manual_seed(recipe.seed)
    reference = pretrain_reference(
        np.stack([s.image for s in train]), [s.caption_ids for s in train], vocab.size,
        pad_id=vocab.pad_id, steps=recipe.ref_steps, seed=recipe.seed,
    )
    torch.manual_seed(recipe.seed)
    model = SlotTokenizer(tokenizer_config(recipe, vocab.size), pad_id=vocab.pad_id)
    model.attach_reference(reference)
    traces = {}
    if log_dir:
        Path(log_dir).mkdir(parents=True, exist_ok=True)
    for stage in (1, 2):
        path = Path(log_dir) / f"stage{stage}.jsonl" if log_dir else None
        if path is not None:
            path.unlink(missing_ok=True)
        trainer = StageTrainer(model, stage_config(recipe, stage), train, vocab.pad_id)
        traces[f"stage{stage}"] = trainer.fit(log_path=path).trace
    return model, traces


def desk_run(recipe: DeskRecipe | None = None, cache_dir: str | Path | None = None,
             log_dir: str | Path | None = None) -> DeskRun:
    """Train (or load from ``cache_dir``) the tokenizer described by ``recipe``."""
    recipe = recipe or DeskRecipe()
    train, heldout, vocab = build_scenes(recipe)
    ckpt = Path(cache_dir) / f"tokenizer_{recipe.key}.pt" if cache_dir else None
    if ckpt is not None and ckpt.exists():
        blob = torch.load(ckpt, map_location="cpu", weights_only=False)
        return DeskRun(recipe, load_tokenizer(ckpt), train, heldout, vocab, blob.get("traces", {}))
    model, traces = train_tokenizer(recipe, train, vocab, log_dir)
    if ckpt is not None:
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        tmp = ckpt.with_suffix(".tmp")
        save_tokenizer(model, tmp, {"traces": traces, "recipe": dataclasses.asdict(recipe)})
        tmp.replace(ckpt)
    return DeskRun(recipe, model, train, heldout, vocab, traces)


def unique_caption_pairs(samples: list[SceneSample], count: int) -> list[SceneSample]:
    """First ``count`` samples whose captions are pairwise distinct."""
    seen, out = set(), []
    for s in samples:
        key = tuple(s.caption_ids)
        if key not in seen:
            seen.add(key)
            out.append(s)
        if len(out) == count:
            return out
    raise ValueError(f"only {len(out)} distinct captions among {len(samples)} samples")


def lm_recipe(steps: int = 600, seed: int = 0) -> LMTrainConfig:
    return LMTrainConfig(
        max_lr=1e-3, warmup_steps=30, total_steps=steps, batch_size=32, seed=seed, direction="t2i",
        weight_decay=0.0, lm=LMConfig(width=128, layers=3, heads=4, context=128),
    )
