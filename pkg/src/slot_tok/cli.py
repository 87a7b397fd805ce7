"""``slot-tok`` command line interface."""
from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path

import click
import numpy as np
import torch
from PIL import Image

from .config import PRESETS, LMConfig, LMTrainConfig, TokenizerConfig, TrainConfig, from_dict, load_yaml
from .encoder import load_reference, pretrain_reference, save_reference, to_tensor
from .synthdata import load_dataset, make_splits, write_dataset

log = logging.getLogger("slot_tok")


def _images(samples) -> np.ndarray:
    return np.stack([s.image for s in samples])


def _save_png(array_hwc: np.ndarray, path: Path) -> None:
    Image.fromarray(np.round(np.clip(array_hwc, 0, 1) * 255).astype(np.uint8)).save(path)


def _read_png(path: str | Path, size: int) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    if img.size != (size, size):
        img = img.resize((size, size), Image.NEAREST)
    return np.asarray(img, dtype=np.float32) / 255.0


def _inputs(model, data: str | None, split: str, image: str | None) -> tuple[np.ndarray, list]:
    """Images from either a single PNG or a dataset split."""
    if bool(data) == bool(image):
        raise click.UsageError("pass exactly one of --data or --image")
    if image:
        return _read_png(image, model.cfg.image_size)[None], []
    samples, _ = load_dataset(data, split)
    return _images(samples), samples


def _yaml_section(path: str | None, key: str) -> dict:
    if not path:
        return {}
    return load_yaml(path).get(key) or {}


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log training progress.")
def main(verbose: bool) -> None:
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@main.command("gen-data")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--n-train", default=64, show_default=True)
@click.option("--n-val", default=32, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--canvas", default=64, show_default=True)
@click.option("--min-objects", default=1, show_default=True)
@click.option("--max-objects", default=3, show_default=True)
def gen_data(out, n_train, n_val, seed, canvas, min_objects, max_objects):
    """Render a synthetic scene dataset with captions and instance masks."""
    train, val = make_splits(n_train, n_val, seed, (canvas, canvas), (min_objects, max_objects))
    root = write_dataset(out, {"train": train, "val": val})
    click.echo(f"wrote {n_train + n_val} scenes to {root}")


@main.command("pretrain-ref")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--steps", default=300, show_default=True)
@click.option("--seed", default=0, show_default=True)
def pretrain_ref(data, out, steps, seed):
    """Train and freeze the reference image embedder used by the alignment loss."""
    samples, vocab = load_dataset(data, "train")
    ref = pretrain_reference(_images(samples), [s.caption_ids for s in samples], vocab.size,
                             pad_id=vocab.pad_id, steps=steps, seed=seed)
    save_reference(ref, out)
    click.echo(f"reference embedder {ref.content_hash()[:12]} -> {out}")


def _train_config(path: str | None, stage: int, steps: int | None, lr: float | None, seed: int | None) -> TrainConfig:
    raw = dict(_yaml_section(path, "train"))
    raw["stage"] = stage
    if steps is not None:
        raw["total_steps"] = steps
        raw["warmup_steps"] = min(raw.get("warmup_steps", 100), steps - 1)
    if lr is not None:
        raw["max_lr"] = lr
    if seed is not None:
        raw["seed"] = seed
    return from_dict(TrainConfig, raw)


@main.command("train-stage1")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--ref", "ref_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="YAML with optional 'tokenizer' and 'train' sections.")
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default="desk", show_default=True)
@click.option("--steps", type=int)
@click.option("--lr", type=float)
@click.option("--seed", type=int)
@click.option("--log", "log_path", type=click.Path(dir_okay=False), help="JSON-lines loss trace.")
def train_stage1(data, ref_path, out, config_path, preset, steps, lr, seed, log_path):
    """Stage 1: learn continuous slot embeddings with the diffusion decoder."""
    from .tokenizer import SlotTokenizer, save_tokenizer
    from .training import StageTrainer

    samples, vocab = load_dataset(data, "train")
    tok_raw = _yaml_section(config_path, "tokenizer")
    cfg = from_dict(TokenizerConfig, tok_raw) if tok_raw else PRESETS[preset]()
    cfg.image_size = samples[0].image.shape[0]
    cfg.vocab_size = vocab.size
    tcfg = _train_config(config_path, 1, steps, lr, seed)
    cfg.slots.no_slot_attention = cfg.slots.no_slot_attention or tcfg.no_slot_attention
    torch.manual_seed(tcfg.seed)
    model = SlotTokenizer(cfg, pad_id=vocab.pad_id)
    model.attach_reference(load_reference(ref_path))
    StageTrainer(model, tcfg, samples, vocab.pad_id).fit(log_path=log_path)
    save_tokenizer(model, out, {"stage": 1})
    click.echo(f"stage-1 checkpoint -> {out}")


@main.command("train-stage2")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--steps", type=int)
@click.option("--lr", type=float)
@click.option("--seed", type=int)
@click.option("--log", "log_path", type=click.Path(dir_okay=False))
def train_stage2(data, ckpt, out, config_path, steps, lr, seed, log_path):
    """Stage 2: learn the residual quantizer with everything else frozen."""
    from .tokenizer import load_tokenizer, save_tokenizer
    from .training import StageTrainer

    samples, vocab = load_dataset(data, "train")
    model = load_tokenizer(ckpt)
    tcfg = _train_config(config_path, 2, steps, lr, seed)
    StageTrainer(model, tcfg, samples, vocab.pad_id).fit(log_path=log_path)
    save_tokenizer(model, out, {"stage": 2})
    click.echo(f"stage-2 checkpoint -> {out}")


@main.command("tokenize")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--image", type=click.Path(exists=True, dir_okay=False), help="A single PNG.")
@click.option("--data", type=click.Path(exists=True, file_okay=False), help="A dataset directory.")
@click.option("--split", default="val", show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def tokenize_cmd(ckpt, image, data, split, out):
    """Write (B, N, K) token codes to a binary token file."""
    from .quantizer import write_tokens
    from .tokenizer import load_tokenizer

    model = load_tokenizer(ckpt)
    images, _ = _inputs(model, data, split, image)
    codes = model.tokenize(images).codes.numpy()
    write_tokens(out, codes, model.cfg.quantizer.codebook_size, model.config_hash)
    click.echo(f"{codes.shape[0]} images x {codes.shape[1]} slots x {codes.shape[2]} depths -> {out}")


@main.command("reconstruct")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--tokens", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "--out-dir", "out_path", required=True, type=click.Path(),
              help="A .png file for single-image token files, otherwise a directory.")
@click.option("--steps", default=50, show_default=True, help="Sampler steps.")
@click.option("--seed", default=0, show_default=True)
@click.option("--eta", default=1.0, show_default=True, help="0 = deterministic DDIM, 1 = ancestral.")
def reconstruct_cmd(ckpt, tokens, out_path, steps, seed, eta):
    """Decode a token file back to PNG images."""
    from .quantizer import read_tokens
    from .tokenizer import load_tokenizer

    model = load_tokenizer(ckpt)
    codes, header = read_tokens(tokens)
    if header["config_hash"] != model.config_hash:
        raise click.ClickException(
            f"token file was written by config {header['config_hash']}, checkpoint is {model.config_hash}")
    images = model.reconstruct(torch.as_tensor(codes.astype(np.int64)), steps=steps, seed=seed, eta=eta)
    arrays = images.permute(0, 2, 3, 1).numpy()
    out = Path(out_path)
    if out.suffix.lower() == ".png":
        if len(arrays) != 1:
            raise click.ClickException(f"token file holds {len(arrays)} images; pass a directory as --out")
        out.parent.mkdir(parents=True, exist_ok=True)
        _save_png(arrays[0], out)
    else:
        out.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(arrays):
            _save_png(img, out / f"recon_{i:05d}.png")
    click.echo(f"{len(arrays)} image(s) -> {out}")


@main.command("attn-maps")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--image", type=click.Path(exists=True, dir_okay=False), help="A single PNG.")
@click.option("--data", type=click.Path(exists=True, file_okay=False), help="A dataset directory.")
@click.option("--split", default="val", show_default=True)
@click.option("--out", "--out-dir", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--limit", default=8, show_default=True)
@click.option("--layer", default=-1, show_default=True)
@click.option("--iteration", default=-1, show_default=True)
def attn_maps(ckpt, image, data, split, out_dir, limit, layer, iteration):
    """Save per-slot attention heatmaps and argmax masks with a JSON index."""
    import torch.nn.functional as F

    from .tokenizer import load_tokenizer

    model = load_tokenizer(ckpt)
    images, _ = _inputs(model, data, split, image)
    with torch.no_grad():
        se = model.encode_slots(to_tensor(images[:limit]), mode="eval")
    attn = se.attention(layer, iteration)
    h, w = model.encoder.grid
    size = model.cfg.image_size
    maps = F.interpolate(attn.reshape(attn.shape[0], attn.shape[1], h, w).float(), size=(size, size), mode="nearest")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for i in range(maps.shape[0]):
        entry = {"sample": i, "slots": [], "mask": f"mask_{i:04d}.png"}
        for s in range(maps.shape[1]):
            name = f"attn_{i:04d}_slot{s:02d}.png"
            m = maps[i, s].numpy()
            Image.fromarray(np.round(m / max(m.max(), 1e-8) * 255).astype(np.uint8)).save(out / name)
            entry["slots"].append(name)
        labels = maps[i].argmax(0).numpy()
        Image.fromarray((labels * (255 // max(maps.shape[1] - 1, 1))).astype(np.uint8)).save(out / entry["mask"])
        index.append(entry)
    (out / "index.json").write_text(json.dumps({"layer": layer, "iteration": iteration, "images": index}, indent=1))
    click.echo(f"attention maps for {len(index)} images -> {out}")


@main.command("train-mllm")
@click.option("--tokenizer-ckpt", "--ckpt", "ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="YAML with an 'lm' section (LMTrainConfig fields).")
@click.option("--steps", type=int)
@click.option("--direction", type=click.Choice(["t2i", "i2t", "random"]))
def train_mllm(ckpt, data, out, config_path, steps, direction):
    """Train the tiny multimodal LM on caption/image-token pairs."""
    from .mllm.sequences import build_vocab
    from .mllm.train import evaluate_accuracy, pretrain_sequences, train_lm
    from .tokenizer import load_tokenizer

    model = load_tokenizer(ckpt)
    samples, vocab = load_dataset(data, "train")
    raw = dict(_yaml_section(config_path, "lm"))
    cfg = from_dict(LMTrainConfig, raw) if raw else LMTrainConfig()
    if steps is not None:
        cfg.total_steps = steps
        cfg.warmup_steps = min(cfg.warmup_steps, steps - 1)
    if direction:
        cfg.direction = direction
    layout = build_vocab(vocab, model.cfg.quantizer.codebook_size)
    codes = model.tokenize(_images(samples)).codes.numpy()
    seqs = pretrain_sequences(codes, [s.caption_ids for s in samples], layout, cfg.direction, cfg.flatten, cfg.seed)
    result = train_lm(seqs, layout, cfg)
    acc = evaluate_accuracy(result.model, seqs, layout.pad_id)
    torch.save({
        "kind": "lm",
        "layout": dataclasses.asdict(layout),
        "lm": dataclasses.asdict(cfg.lm),
        "flatten": cfg.flatten,
        "tokenizer_hash": model.config_hash,
        "vocab": vocab.to_json(),
        "state_dict": result.model.state_dict(),
    }, out)
    click.echo(f"LM trained, teacher-forced accuracy {acc:.3f} -> {out}")


@main.command("chat")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--lm", "lm_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--prompt", required=True, help="Caption words, e.g. 'a red circle'.")
@click.option("--image", type=click.Path(exists=True, dir_okay=False),
              help="Input PNG placed before the prompt as an image span.")
@click.option("--image-out", type=click.Path(dir_okay=False), help="Where to write the first generated image.")
@click.option("--max-new-tokens", default=64, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--greedy/--sample", default=True, show_default=True)
def chat(ckpt, lm_path, prompt, image, image_out, max_new_tokens, seed, greedy):
    """Generate from a caption prompt; image spans are decoded with the tokenizer."""
    from .mllm.generate import SamplerConfig, extract_spans, generate
    from .mllm.model import TinyLM
    from .mllm.sequences import VocabLayout, image_to_lm_tokens, lm_tokens_to_image, text_fragment
    from .synthdata import Vocabulary
    from .tokenizer import load_tokenizer

    tok = load_tokenizer(ckpt)
    blob = torch.load(lm_path, map_location="cpu", weights_only=False)
    layout = VocabLayout(**blob["layout"])
    vocab = Vocabulary(blob["vocab"])
    lm = TinyLM(layout.total, from_dict(LMConfig, blob["lm"]))
    lm.load_state_dict(blob["state_dict"])
    try:
        words = vocab.encode(prompt.split())
    except KeyError as err:
        raise click.ClickException(f"word not in vocabulary: {err}") from None
    n, k = tok.cfg.slots.num_slots, tok.cfg.quantizer.depth
    head = [layout.bos_id]
    if image:
        codes = tok.tokenize(_read_png(image, tok.cfg.image_size)[None]).codes[0].numpy()
        head += image_to_lm_tokens(codes, layout, blob["flatten"])
    seq = text_fragment(head + words)
    out = generate(lm, seq, layout, n * k, SamplerConfig(greedy=greedy, max_new_tokens=max_new_tokens, seed=seed))
    new = out.ids[len(seq):]
    text = [vocab.decode([t])[0] if t < layout.text_size else ("<img>" if t == layout.boi_id else "") for t in new]
    click.echo(" ".join(w for w in text if w))
    spans = extract_spans(new, layout)
    if spans and image_out:
        codes = lm_tokens_to_image(spans[0], layout, n, k, blob["flatten"])
        img = tok.reconstruct(torch.as_tensor(codes[None].astype(np.int64)), steps=50, seed=seed, eta=1.0)
        _save_png(img[0].permute(1, 2, 0).numpy(), Path(image_out))
        click.echo(f"image -> {image_out}")


@main.command("eval")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--split", default="val", show_default=True)
@click.option("--report", "report_path", required=True, type=click.Path(dir_okay=False))
@click.option("--steps", default=50, show_default=True)
@click.option("--seed", default=0, show_default=True)
def eval_cmd(ckpt, data, split, report_path, steps, seed):
    """Token round-trip reconstruction metrics and foreground ARI."""
    from .evalsuite import mean_foreground_ari, reconstruction_report, render_table
    from .tokenizer import load_tokenizer

    model = load_tokenizer(ckpt)
    samples, _ = load_dataset(data, split)
    rep = reconstruction_report(model, samples, steps=steps, seed=seed)
    fg = [s for s in samples if (s.masks > 0).any()]
    ari = mean_foreground_ari(model, fg) if fg else None
    data_out = dataclasses.asdict(rep)
    data_out["foreground_ari"] = ari
    Path(report_path).write_text(json.dumps(data_out, indent=2))
    click.echo(render_table([{"psnr": rep.psnr, "ssim": rep.ssim, "pixel_l1": rep.pixel_l1, "ari": ari}]))


@main.command("token-drop")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--split", default="val", show_default=True)
@click.option("--fraction", default=0.5, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--granularity", type=click.Choice(["slot", "token"]), default="slot", show_default=True)
@click.option("--steps", default=50, show_default=True)
@click.option("--report", "report_path", type=click.Path(dir_okay=False))
def token_drop(ckpt, data, split, fraction, seed, granularity, steps, report_path):
    """Replace a fraction of tokens with random codes and measure the damage."""
    from .evalsuite import render_table, token_drop_study, write_report
    from .tokenizer import load_tokenizer

    model = load_tokenizer(ckpt)
    samples, _ = load_dataset(data, split)
    res = token_drop_study(model, samples, fraction, seed, granularity, steps)
    rows = [{"arm": "baseline", "psnr": res.baseline.psnr, "ssim": res.baseline.ssim},
            {"arm": f"drop {fraction:g}", "psnr": res.dropped.psnr, "ssim": res.dropped.ssim}]
    click.echo(render_table(rows))
    click.echo("relative deltas: " + ", ".join(f"{k} {v:+.2%}" for k, v in res.relative_deltas.items()))
    if report_path:
        write_report(report_path, res)


@main.command("desk-run")
@click.option("--cache-dir", default=".desk_cache", show_default=True, type=click.Path(file_okay=False))
@click.option("--ablation", type=click.Choice(["none", "no_slot_attention", "no_diffusion_loss", "no_alignment_loss"]),
              default="none", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), help="Copy of the trained tokenizer checkpoint.")
def desk_run_cmd(cache_dir, ablation, out):
    """Generate scenes, train the reference embedder and both tokenizer stages in one go."""
    import shutil

    from .pipeline import DeskRecipe, desk_run

    recipe = DeskRecipe()
    if ablation != "none":
        recipe = recipe.ablation(**{ablation: True})
    run = desk_run(recipe, cache_dir, log_dir=cache_dir)
    ckpt = Path(cache_dir) / f"tokenizer_{recipe.key}.pt"
    if out:
        shutil.copyfile(ckpt, out)
    click.echo(f"tokenizer {run.tokenizer.config_hash} -> {out or ckpt}")


if __name__ == "__main__":
    main()
