import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slot_tok.synthdata import (
    BACKGROUNDS,
    COLORS,
    SHAPES,
    PlacementError,
    SceneSpec,
    Vocabulary,
    build_caption,
    caption_words,
    generate_scene,
    load_dataset,
    make_splits,
    parse_caption,
    random_spec,
    relation_between,
    write_dataset,
)


def test_single_red_circle():
    s = generate_scene(SceneSpec(seed=0, num_objects=1, palette=("red",), shapes=("circle",)))
    assert len(np.unique(s.masks)) == 2
    obj = s.masks == 1
    np.testing.assert_array_equal(s.image[obj], np.broadcast_to(np.array(COLORS["red"]) / 255.0, s.image[obj].shape).astype(np.float32))
    assert (s.image[~obj] == 0).all()


def test_generation_is_byte_deterministic():
    spec = SceneSpec(seed=3, num_objects=3, palette=("red", "blue", "green"), shapes=("circle", "square", "triangle"))
    a, b = generate_scene(spec), generate_scene(spec)
    assert a.image.tobytes() == b.image.tobytes()
    assert a.masks.tobytes() == b.masks.tobytes()
    assert a.caption_ids == b.caption_ids


def test_two_objects_caption_round_trip(vocab):
    spec = SceneSpec(seed=7, num_objects=2, palette=("yellow", "cyan"), shapes=("square", "circle"))
    s = generate_scene(spec, vocab)
    words = vocab.decode(s.caption_ids)
    parsed = parse_caption(words)
    assert parsed["objects"] == [("yellow", "square"), ("cyan", "circle")]
    subj, rel, obj = parsed["relation"]
    assert subj == ("yellow", "square") and obj == ("cyan", "circle")
    assert rel == relation_between(s.boxes[0], s.boxes[1])


def test_single_object_caption_template(vocab):
    ids = build_caption(SceneSpec(seed=0, num_objects=1), vocab)
    assert vocab.decode(ids) == ["<bos>", "a", "red", "circle", "<eos>"]


def test_vocab_bijection(vocab):
    ids = list(range(vocab.size))
    assert vocab.encode(vocab.decode(ids)) == ids
    assert len({vocab.pad_id, vocab.bos_id, vocab.eos_id}) == 3


def test_out_of_vocabulary_names_token():
    small = Vocabulary(["<pad>", "<bos>", "<eos>", "a", "circle"])
    with pytest.raises(KeyError, match="red"):
        build_caption(SceneSpec(seed=0, num_objects=1), small)


def test_ten_thousand_specs_caption_sweep(vocab):
    # every random spec must caption within the vocabulary and parse back to its objects
    rng = np.random.default_rng(0)
    for i in range(10_000):
        spec = random_spec(rng, i, (64, 64), (1, 4))
        words = caption_words(spec, boxes=[(0, 0, 2, 2), (0, 4, 2, 6)] if spec.num_objects > 1 else None)
        ids = [vocab.bos_id, *vocab.encode(words), vocab.eos_id]
        assert len(ids) <= 32
        parsed = parse_caption(words)
        assert sorted(parsed["objects"]) == sorted(zip(spec.palette, spec.shapes))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 4), bg=st.sampled_from(sorted(BACKGROUNDS)),
       shape=st.sampled_from(SHAPES))
def test_masks_partition_and_match_pixels(seed, n, bg, shape):
    palette = tuple(sorted(COLORS))[:n]
    spec = SceneSpec(seed, n, (64, 64), palette, (shape,) * n, bg)
    s = generate_scene(spec)
    assert s.masks.shape == (64, 64)
    assert set(np.unique(s.masks)) <= set(range(n + 1))
    assert set(np.unique(s.masks)) >= set(range(1, n + 1))
    for idx, color in enumerate(palette, start=1):
        assert np.allclose(s.image[s.masks == idx], np.array(COLORS[color]) / 255.0)
    assert np.allclose(s.image[s.masks == 0], np.array(BACKGROUNDS[bg]) / 255.0)
    # bounding boxes stay inside the canvas
    for y0, x0, y1, x1 in s.boxes:
        assert 0 <= y0 and 0 <= x0 and y1 < 64 and x1 < 64


def test_placement_failure_is_explicit():
    spec = SceneSpec(seed=0, num_objects=4, canvas=(12, 12), palette=("red", "blue", "green", "white"),
                     shapes=("square",) * 4)
    with pytest.raises(PlacementError, match="placement failed"):
        generate_scene(spec)


def test_make_splits_counts_determinism_disjointness():
    tr, va = make_splits(64, 16, seed=1)
    assert len(tr) == 64 and len(va) == 16
    assert len({s.seed for s in tr + va}) == 80
    assert {s.seed for s in tr}.isdisjoint({s.seed for s in va})
    assert make_splits(64, 16, seed=1) == (tr, va)
    with pytest.raises(ValueError):
        make_splits(0, 3, seed=1)


def test_dataset_round_trip(tmp_path, vocab):
    tr, va = make_splits(3, 2, seed=5, canvas=(32, 32), objects=(1, 2))
    root = write_dataset(tmp_path / "ds", {"train": tr, "val": va}, vocab)
    assert (root / "index.json").exists()
    samples, v2 = load_dataset(root, "train")
    assert len(samples) == 3 and v2.to_json() == vocab.to_json()
    for spec, s in zip(tr, samples):
        ref = generate_scene(spec, vocab)
        assert s.spec == spec
        np.testing.assert_allclose(s.image, ref.image, atol=1 / 255)
        np.testing.assert_array_equal(s.masks, ref.masks)
        assert s.caption_ids == ref.caption_ids
