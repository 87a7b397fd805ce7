"""Synthetic multi-object scenes with captions and instance masks.

Scenes are flat-colored circles, squares and triangles on a plain
background. Everything is a pure function of :class:`SceneSpec`: the
seed drives placement and sizes, the SceneSpec fixes colors and shapes.

On-disk layout written by :func:`write_dataset`::

    DIR/index.json                 manifest (vocabulary, canvas, sample list)
    DIR/samples/<split>_<i>.png    RGB image, 8-bit
    DIR/samples/<split>_<i>.json   sidecar: spec, caption_ids, mask rows
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

COLORS: dict[str, tuple[int, int, int]] = {
    "red": (230, 40, 40),
    "green": (40, 200, 60),
    "blue": (50, 80, 235),
    "yellow": (240, 220, 40),
    "magenta": (220, 50, 220),
    "cyan": (40, 220, 230),
    "orange": (250, 140, 20),
    "white": (245, 245, 245),
}
BACKGROUNDS: dict[str, tuple[int, int, int]] = {
    "black": (0, 0, 0),
    "gray": (100, 100, 100),
}
SHAPES = ("circle", "square", "triangle")
RELATIONS = {"left": "left of", "right": "right of", "above": "above", "below": "below"}

SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>")
# words used by the caption grammar plus the instruction templates of the LM
WORDS = (
    "a", "and", "the", "is", "left", "right", "of", "above", "below", ",",
    "USER:", "ASSISTANT:", "please", "generate", "an", "image", "describe",
    "this", "show", "me", "\n",
)

MAX_PLACEMENT_TRIES = 200
MAX_OVERLAP = 0.10


class PlacementError(RuntimeError):
    """Raised when objects cannot be placed without excessive overlap."""


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    num_objects: int
    canvas: tuple[int, int] = (64, 64)
    palette: tuple[str, ...] = ("red",)
    shapes: tuple[str, ...] = ("circle",)
    background: str = "black"

    def validate(self) -> None:
        if not 1 <= self.num_objects <= 4:
            raise ValueError("num_objects must be in 1..4")
        if len(self.palette) != self.num_objects or len(self.shapes) != self.num_objects:
            raise ValueError("palette and shapes need one entry per object")
        for c in self.palette:
            if c not in COLORS:
                raise ValueError(f"unknown color {c!r}")
        for s in self.shapes:
            if s not in SHAPES:
                raise ValueError(f"unknown shape {s!r}")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"unknown background {self.background!r}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "SceneSpec":
        return cls(
            seed=int(data["seed"]),
            num_objects=int(data["num_objects"]),
            canvas=tuple(data["canvas"]),
            palette=tuple(data["palette"]),
            shapes=tuple(data["shapes"]),
            background=data["background"],
        )


@dataclass
class SceneSample:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    caption_ids: list[int]
    masks: np.ndarray  # H x W int, 0 = background
    spec: SceneSpec
    boxes: list[tuple[int, int, int, int]] = field(default_factory=list)


class Vocabulary:
    def __init__(self, tokens: list[str]):
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.id_to_token = dict(enumerate(tokens))
        self.token_to_id = {t: i for i, t in self.id_to_token.items()}
        self.pad_id = self.token_to_id["<pad>"]
        self.bos_id = self.token_to_id["<bos>"]
        self.eos_id = self.token_to_id["<eos>"]

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls([*SPECIAL_TOKENS, *WORDS, *COLORS, *SHAPES])

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def __len__(self) -> int:
        return self.size

    def encode(self, words: list[str]) -> list[int]:
        out = []
        for w in words:
            if w not in self.token_to_id:
                raise KeyError(f"out-of-vocabulary token {w!r}")
            out.append(self.token_to_id[w])
        return out

    def decode(self, ids: list[int]) -> list[str]:
        return [self.id_to_token[int(i)] for i in ids]

    def to_json(self) -> list[str]:
        return [self.id_to_token[i] for i in range(self.size)]


# -- rendering -----------------------------------------------------------------

def _shape_mask(kind: str, cy: int, cx: int, half: int, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= half * half
    if kind == "square":
        return (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
    # upward triangle inside the bounding box
    top, bottom = cy - half, cy + half
    rows = (yy >= top) & (yy <= bottom)
    frac = (yy - top) / max(2 * half, 1)
    return rows & (np.abs(xx - cx) <= frac * half + 0.5)


def generate_scene(spec: SceneSpec, vocab: Vocabulary | None = None) -> SceneSample:
    spec.validate()
    vocab = vocab or Vocabulary.default()
    h, w = spec.canvas
    rng = np.random.default_rng(spec.seed)
    lo = max(3, min(h, w) // 8)
    hi = max(lo + 1, min(h, w) // 5)

    placed: list[np.ndarray] = []
    boxes: list[tuple[int, int, int, int]] = []
    for kind in spec.shapes:
        for _ in range(MAX_PLACEMENT_TRIES):
            half = int(rng.integers(lo, hi + 1))
            cy = int(rng.integers(half, h - half))
            cx = int(rng.integers(half, w - half))
            m = _shape_mask(kind, cy, cx, half, h, w)
            area = m.sum()
            if all((m & p).sum() <= MAX_OVERLAP * min(area, p.sum()) for p in placed):
                placed.append(m)
                boxes.append((cy - half, cx - half, cy + half, cx + half))
                break
        else:
            raise PlacementError(
                f"placement failed for object {len(placed)} of scene seed={spec.seed} "
                f"after {MAX_PLACEMENT_TRIES} tries"
            )

    image = np.empty((h, w, 3), dtype=np.uint8)
    image[:] = BACKGROUNDS[spec.background]
    masks = np.zeros((h, w), dtype=np.int64)
    for idx, (m, color) in enumerate(zip(placed, spec.palette), start=1):
        image[m] = COLORS[color]
        masks[m] = idx

    return SceneSample(
        image=image.astype(np.float32) / 255.0,
        caption_ids=build_caption(spec, vocab, boxes=boxes),
        masks=masks,
        spec=spec,
        boxes=boxes,
    )


# -- captions ------------------------------------------------------------------

def _centers(boxes):
    return [((y0 + y1) / 2, (x0 + x1) / 2) for y0, x0, y1, x1 in boxes]


def relation_between(box_a, box_b) -> str:
    """Relation word for object a relative to object b."""
    (ya, xa), (yb, xb) = _centers([box_a, box_b])
    if abs(xa - xb) >= abs(ya - yb):
        return "left" if xa < xb else "right"
    return "above" if ya < yb else "below"


def caption_words(spec: SceneSpec, boxes=None) -> list[str]:
    words: list[str] = []
    for i, (color, shape) in enumerate(zip(spec.palette, spec.shapes)):
        if i:
            words.append("and")
        words += ["a", color, shape]
    if spec.num_objects >= 2:
        if boxes is None:
            boxes = generate_scene(spec).boxes
        rel = relation_between(boxes[0], boxes[1])
        words += [",", "the", spec.palette[0], spec.shapes[0], "is"]
        words += RELATIONS[rel].split()
        words += ["the", spec.palette[1], spec.shapes[1]]
    return words


def build_caption(spec: SceneSpec, vocab: Vocabulary, boxes=None, max_len: int = 32) -> list[int]:
    ids = [vocab.bos_id, *vocab.encode(caption_words(spec, boxes)), vocab.eos_id]
    if len(ids) > max_len:
        raise ValueError(f"caption of length {len(ids)} exceeds max_len={max_len}")
    return ids


def parse_caption(words: list[str]) -> dict:
    """Parse a caption back into objects and an optional relation.

    Returns ``{"objects": [(color, shape), ...], "relation": (subj, rel, obj) | None}``.
    Raises ``ValueError`` on anything the grammar does not produce.
    """
    words = [w for w in words if w not in SPECIAL_TOKENS]
    objects: list[tuple[str, str]] = []

    def phrase(j):
        if j + 3 > len(words):
            raise ValueError("truncated phrase")
        art, color, shape = words[j : j + 3]
        if art not in ("a", "the") or color not in COLORS or shape not in SHAPES:
            raise ValueError(f"bad phrase {words[j:j + 3]}")
        return color, shape

    objects.append(phrase(0))
    i = 3
    while i < len(words) and words[i] == "and":
        objects.append(phrase(i + 1))
        i += 4
    relation = None
    if i < len(words):
        if words[i] != ",":
            raise ValueError(f"unexpected token {words[i]!r}")
        subj = phrase(i + 1)
        if words[i + 4] != "is":
            raise ValueError("missing 'is'")
        j = i + 5
        if words[j] in ("left", "right"):
            if words[j + 1] != "of":
                raise ValueError("expected 'of'")
            rel, j = words[j], j + 2
        elif words[j] in ("above", "below"):
            rel, j = words[j], j + 1
        else:
            raise ValueError(f"unknown relation {words[j]!r}")
        obj = phrase(j)
        if j + 3 != len(words):
            raise ValueError("trailing tokens after relation")
        relation = (subj, rel, obj)
    return {"objects": objects, "relation": relation}


# -- splits and persistence ----------------------------------------------------

def random_spec(
    rng: np.random.Generator,
    seed: int,
    canvas: tuple[int, int] = (64, 64),
    objects: tuple[int, int] = (1, 4),
) -> SceneSpec:
    n = int(rng.integers(objects[0], objects[1] + 1))
    palette = tuple(rng.choice(list(COLORS), size=n, replace=False).tolist())
    shapes = tuple(rng.choice(SHAPES, size=n).tolist())
    background = str(rng.choice(list(BACKGROUNDS)))
    return SceneSpec(seed, n, tuple(canvas), palette, shapes, background)


def make_splits(
    n_train: int,
    n_val: int,
    seed: int,
    canvas: tuple[int, int] = (64, 64),
    objects: tuple[int, int] = (1, 4),
) -> tuple[list[SceneSpec], list[SceneSpec]]:
    if n_train <= 0 or n_val <= 0:
        raise ValueError("n_train and n_val must be positive")
    rng = np.random.default_rng(seed)
    seeds = rng.choice(2**31 - 1, size=n_train + n_val, replace=False)
    specs = [random_spec(rng, int(s), canvas, objects) for s in seeds]
    return specs[:n_train], specs[n_train:]


def write_dataset(out: str | Path, splits: dict[str, list[SceneSpec]], vocab: Vocabulary | None = None) -> Path:
    vocab = vocab or Vocabulary.default()
    out = Path(out)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    entries = []
    canvas = None
    for split, specs in splits.items():
        for i, spec in enumerate(specs):
            sample = generate_scene(spec, vocab)
            canvas = spec.canvas
            stem = f"{split}_{i:05d}"
            Image.fromarray(np.round(sample.image * 255).astype(np.uint8)).save(out / "samples" / f"{stem}.png")
            sidecar = {
                "spec": spec.to_json(),
                "caption_ids": sample.caption_ids,
                "caption": " ".join(vocab.decode(sample.caption_ids)),
                "mask": sample.masks.tolist(),
            }
            (out / "samples" / f"{stem}.json").write_text(json.dumps(sidecar))
            entries.append({"split": split, "image": f"samples/{stem}.png", "record": f"samples/{stem}.json"})
    index = {"version": 1, "canvas": list(canvas or (0, 0)), "vocab": vocab.to_json(), "samples": entries}
    (out / "index.json").write_text(json.dumps(index, indent=1))
    return out


def load_dataset(root: str | Path, split: str | None = None) -> tuple[list[SceneSample], Vocabulary]:
    root = Path(root)
    index = json.loads((root / "index.json").read_text())
    vocab = Vocabulary(index["vocab"])
    samples = []
    for entry in index["samples"]:
        if split is not None and entry["split"] != split:
            continue
        rec = json.loads((root / entry["record"]).read_text())
        image = np.asarray(Image.open(root / entry["image"]).convert("RGB"), dtype=np.float32) / 255.0
        samples.append(
            SceneSample(
                image=image,
                caption_ids=list(rec["caption_ids"]),
                masks=np.asarray(rec["mask"], dtype=np.int64),
                spec=SceneSpec.from_json(rec["spec"]),
            )
        )
    return samples, vocab
