"""Reconstruction metrics, object-discovery scoring, token-drop study and ablation reports."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .encoder import to_tensor
from .synthdata import SceneSample

PSNR_CAP = 99.0


# -- image metrics -------------------------------------------------------------

def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * math.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5, data_range: float = 1.0) -> float:
    """Mean SSIM over valid Gaussian windows, averaged over channels (HxW or HxWxC)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"image {a.shape[:2]} smaller than the {window}x{window} SSIM window")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    w = _gaussian_window(window, sigma)
    scores = []
    for ch in range(a.shape[2]):
        x = np.lib.stride_tricks.sliding_window_view(a[..., ch], (window, window))
        y = np.lib.stride_tricks.sliding_window_view(b[..., ch], (window, window))
        mx = (x * w).sum(axis=(-1, -2))
        my = (y * w).sum(axis=(-1, -2))
        vx = (x * x * w).sum(axis=(-1, -2)) - mx**2
        vy = (y * y * w).sum(axis=(-1, -2)) - my**2
        cov = (x * y * w).sum(axis=(-1, -2)) - mx * my
        s = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
        scores.append(s.mean())
    return float(np.mean(scores))


def pixel_l1(a, b) -> float:
    return float(np.mean(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64))))


# -- object discovery ----------------------------------------------------------

def adjusted_rand_index(labels_true, labels_pred) -> float:
    """ARI from the contingency table; two single-cluster labelings score 1.0."""
    t = np.asarray(labels_true).ravel()
    p = np.asarray(labels_pred).ravel()
    if t.shape != p.shape:
        raise ValueError("label arrays differ in size")
    n = t.size
    _, ti = np.unique(t, return_inverse=True)
    _, pi = np.unique(p, return_inverse=True)
    table = np.zeros((ti.max() + 1, pi.max() + 1), dtype=np.int64)
    np.add.at(table, (ti, pi), 1)

    def comb2(x):
        x = np.asarray(x, dtype=np.float64)
        return (x * (x - 1) / 2).sum()

    index = comb2(table)
    rows = comb2(table.sum(1))
    cols = comb2(table.sum(0))
    total = n * (n - 1) / 2
    expected = rows * cols / total if total else 0.0
    max_index = (rows + cols) / 2
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))


def foreground_ari(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    fg = gt > 0
    if not fg.any():
        raise ValueError("no foreground pixels in ground truth")
    return adjusted_rand_index(gt[fg], pred[fg])


def attention_to_masks(attn: torch.Tensor, grid: tuple[int, int], size: int) -> np.ndarray:
    """(B, N, M) slot attention -> (B, size, size) slot ids by per-pixel argmax."""
    b, n, m = attn.shape
    h, w = grid
    maps = attn.reshape(b, n, h, w).to(torch.float32)
    maps = F.interpolate(maps, size=(size, size), mode="nearest")
    return maps.argmax(dim=1).cpu().numpy()


@torch.no_grad()
def slot_masks(tokenizer, images: np.ndarray, layer: int = -1, iteration: int = -1) -> np.ndarray:
    se = tokenizer.encode_slots(to_tensor(images), mode="eval")
    attn = se.attention(layer, iteration)
    return attention_to_masks(attn, tokenizer.encoder.grid, tokenizer.cfg.image_size)


# -- reports -------------------------------------------------------------------

@dataclass
class MetricReport:
    psnr: float
    ssim: float
    pixel_l1: float
    per_sample: list[dict] = field(default_factory=list)
    config_hash: str = ""
    ckpt_hash: str = ""
    # reserved for metrics that need pretrained networks
    lpips: float | None = None
    dreamsim: float | None = None
    clip_t: float | None = None

    @classmethod
    def from_samples(cls, records: list[dict], config_hash: str = "", ckpt_hash: str = "") -> "MetricReport":
        return cls(
            psnr=float(np.mean([r["psnr"] for r in records])),
            ssim=float(np.mean([r["ssim"] for r in records])),
            pixel_l1=float(np.mean([r["pixel_l1"] for r in records])),
            per_sample=records,
            config_hash=config_hash,
            ckpt_hash=ckpt_hash,
        )


@dataclass
class DropStudyResult:
    fraction: float
    granularity: str
    baseline: MetricReport
    dropped: MetricReport
    relative_deltas: dict[str, float]


def compare_images(originals: np.ndarray, recons: np.ndarray) -> list[dict]:
    out = []
    for i, (a, b) in enumerate(zip(originals, recons)):
        out.append({"index": i, "psnr": psnr(a, b), "ssim": ssim(a, b), "pixel_l1": pixel_l1(a, b)})
    return out


def _hwc(x: torch.Tensor) -> np.ndarray:
    return x.permute(0, 2, 3, 1).cpu().numpy().astype(np.float64)


@torch.no_grad()
def reconstruction_report(tokenizer, samples: list[SceneSample], steps: int = 50, seed: int = 0,
                          batch_size: int = 32, ckpt_hash: str = "") -> MetricReport:
    """Image -> tokens -> image through the full discrete path."""
    images = np.stack([s.image for s in samples])
    codes = tokenizer.tokenize(images).codes
    recons = _decode_codes(tokenizer, codes, steps, seed, batch_size)
    return MetricReport.from_samples(compare_images(images, recons), tokenizer.config_hash, ckpt_hash)


def _decode_codes(tokenizer, codes, steps, seed, batch_size):
    out = []
    for start in range(0, codes.shape[0], batch_size):
        # per-batch seed keeps decoding paired across arms of a study
        out.append(_hwc(tokenizer.reconstruct(codes[start : start + batch_size], steps=steps, seed=seed + start)))
    return np.concatenate(out)


def replace_codes(codes: torch.Tensor, fraction: float, codebook_size: int, rng: np.random.Generator,
                  granularity: str = "slot") -> torch.Tensor:
    """Replace ceil(fraction * units) randomly chosen slots (all depths) or flattened tokens per image."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must be in [0, 1]")
    out = codes.clone()
    b, n, k = codes.shape
    for i in range(b):
        if granularity == "slot":
            chosen = rng.choice(n, size=math.ceil(fraction * n), replace=False)
            for s in chosen:
                out[i, s] = torch.as_tensor(rng.integers(0, codebook_size, size=k))
        elif granularity == "token":
            flat = out[i].reshape(-1)
            chosen = rng.choice(n * k, size=math.ceil(fraction * n * k), replace=False)
            flat[chosen] = torch.as_tensor(rng.integers(0, codebook_size, size=len(chosen)))
            out[i] = flat.reshape(n, k)
        else:
            raise ValueError(f"unknown granularity {granularity!r}")
    return out


@torch.no_grad()
def token_drop_study(tokenizer, samples: list[SceneSample], fraction: float = 0.5, seed: int = 0,
                     granularity: str = "slot", steps: int = 50, batch_size: int = 32) -> DropStudyResult:
    images = np.stack([s.image for s in samples])
    codes = tokenizer.tokenize(images).codes
    rng = np.random.default_rng(seed)
    dropped_codes = replace_codes(codes, fraction, tokenizer.cfg.quantizer.codebook_size, rng, granularity)
    base = MetricReport.from_samples(
        compare_images(images, _decode_codes(tokenizer, codes, steps, seed, batch_size)), tokenizer.config_hash
    )
    if fraction == 0:
        drop = base
    else:
        drop = MetricReport.from_samples(
            compare_images(images, _decode_codes(tokenizer, dropped_codes, steps, seed, batch_size)),
            tokenizer.config_hash,
        )
    deltas = {
        name: (getattr(drop, name) - getattr(base, name)) / abs(getattr(base, name)) if getattr(base, name) else 0.0
        for name in ("psnr", "ssim", "pixel_l1")
    }
    return DropStudyResult(fraction, granularity, base, drop, deltas)


def mean_foreground_ari(tokenizer, samples: list[SceneSample], layer: int = -1, iteration: int = -1) -> float:
    images = np.stack([s.image for s in samples])
    masks = slot_masks(tokenizer, images, layer, iteration)
    scores = [foreground_ari(m, s.masks) for m, s in zip(masks, samples) if (s.masks > 0).any()]
    return float(np.mean(scores))


def ablation_matrix(checkpoints: dict[str, str | Path], samples: list[SceneSample], steps: int = 50,
                    seed: int = 0, drop_fraction: float = 0.5) -> dict:
    from .tokenizer import load_tokenizer

    missing = [name for name, path in checkpoints.items() if not Path(path).exists()]
    if missing:
        raise FileNotFoundError("missing checkpoints: " + ", ".join(f"{m} ({checkpoints[m]})" for m in missing))
    rows = []
    for name, path in checkpoints.items():
        tok = load_tokenizer(path)
        rep = reconstruction_report(tok, samples, steps, seed)
        drop = token_drop_study(tok, samples, drop_fraction, seed, steps=steps)
        rows.append(
            {
                "config": name,
                "checkpoint": str(path),
                "psnr": rep.psnr,
                "ssim": rep.ssim,
                "ari": mean_foreground_ari(tok, samples),
                "drop_psnr_delta": drop.relative_deltas["psnr"],
                "lpips": None,
                "dreamsim": None,
            }
        )
    return {"rows": rows}


def render_table(rows: list[dict], columns: list[str] | None = None) -> str:
    if not rows:
        return ""
    columns = columns or [c for c in rows[0] if not isinstance(rows[0][c], (list, dict))]
    cells = [[_fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    line = "  ".join(c.ljust(w) for c, w in zip(columns, widths))
    sep = "  ".join("-" * w for w in widths)
    body = ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join([line, sep, *body])


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def write_report(path: str | Path, report) -> None:
    data = asdict(report) if hasattr(report, "__dataclass_fields__") else report
    Path(path).write_text(json.dumps(data, indent=2))
