import itertools

import numpy as np
import pytest
import torch

from slot_tok.evalsuite import (
    PSNR_CAP,
    ablation_matrix,
    adjusted_rand_index,
    attention_to_masks,
    foreground_ari,
    psnr,
    render_table,
    replace_codes,
    ssim,
    token_drop_study,
)


def test_psnr_closed_forms():
    a = np.zeros((8, 8, 3))
    assert psnr(a, a) == PSNR_CAP
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert psnr(a, a + 1.0) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        psnr(a, np.zeros((8, 8)))


def test_ssim_constant_images_closed_form():
    c1, c2 = 0.01**2, 0.03**2
    a, b = np.full((16, 16), 0.2), np.full((16, 16), 0.7)
    expected = (2 * 0.2 * 0.7 + c1) * c2 / ((0.2**2 + 0.7**2 + c1) * c2)
    assert ssim(a, b) == pytest.approx(expected, abs=1e-12)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_matches_scikit_image_and_is_symmetric(rng):
    skm = pytest.importorskip("skimage.metrics")
    a = rng.random((32, 32, 3))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    ref = skm.structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                    data_range=1.0, channel_axis=-1)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-6)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def _pair_count_ari(t, p):
    """ARI by direct enumeration of element pairs."""
    n = len(t)
    pairs = list(itertools.combinations(range(n), 2))
    same_t = [t[i] == t[j] for i, j in pairs]
    same_p = [p[i] == p[j] for i, j in pairs]
    index = sum(a and b for a, b in zip(same_t, same_p))
    rows, cols, total = sum(same_t), sum(same_p), len(pairs)
    expected = rows * cols / total
    mx = (rows + cols) / 2
    if mx == expected:
        return 1.0
    return (index - expected) / (mx - expected)


def _labelings(n):
    # restricted growth strings enumerate every set partition exactly once
    def grow(prefix, top):
        if len(prefix) == n:
            yield tuple(prefix)
            return
        for v in range(top + 2):
            yield from grow(prefix + [v], max(top, v))

    yield from grow([0], 0)


@pytest.mark.parametrize("n", [2, 3, 4, 5, 6])
def test_ari_matches_pair_counting_on_every_partition_pair(n):
    parts = list(_labelings(n))
    for t in parts:
        for p in parts:
            assert adjusted_rand_index(t, p) == pytest.approx(_pair_count_ari(t, p), abs=1e-12)


def test_ari_matches_scikit_learn_and_permutation_invariance(rng):
    sk = pytest.importorskip("sklearn.metrics")
    for _ in range(50):
        t = rng.integers(0, 4, 200)
        p = rng.integers(0, 5, 200)
        p[:120] = t[:120]
        assert adjusted_rand_index(t, p) == pytest.approx(sk.adjusted_rand_score(t, p), abs=1e-12)
        relabel = rng.permutation(5)
        assert adjusted_rand_index(t, relabel[p]) == pytest.approx(adjusted_rand_index(t, p), abs=1e-12)


def test_ari_random_assignment_is_centered(rng):
    t = rng.integers(0, 3, 400)
    scores = [adjusted_rand_index(t, rng.integers(0, 4, 400)) for _ in range(100)]
    assert abs(np.mean(scores)) < 0.05


def test_foreground_ari_ignores_background_and_needs_foreground():
    gt = np.array([[0, 0, 1, 1], [0, 0, 2, 2]])
    pred = np.array([[3, 1, 5, 5], [2, 0, 7, 7]])
    assert foreground_ari(pred, gt) == 1.0
    with pytest.raises(ValueError):
        foreground_ari(pred, np.zeros_like(gt))


def test_attention_masks_are_nearest_upsampled_argmax():
    attn = torch.zeros(1, 2, 4)
    attn[0, 0, [0, 3]] = 1.0
    attn[0, 1, [1, 2]] = 1.0
    masks = attention_to_masks(attn, (2, 2), 4)
    expected = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [1, 1, 0, 0], [1, 1, 0, 0]])
    np.testing.assert_array_equal(masks[0], expected)


def test_replace_codes_counts_and_granularities(rng):
    codes = torch.zeros(6, 8, 4, dtype=torch.long)
    out = replace_codes(codes, 0.5, 1000, rng, "slot")
    # a slot counts as replaced when any depth differs (random draws can collide with 0)
    changed = (out != codes).any(-1).sum(-1)
    assert (changed <= 4).all() and changed.sum() > 18
    tok = replace_codes(codes, 0.25, 1000, rng, "token")
    assert ((tok != codes).sum((1, 2)) <= 8).all()
    assert torch.equal(replace_codes(codes, 0.0, 1000, rng), codes)
    with pytest.raises(ValueError):
        replace_codes(codes, 1.5, 10, rng)
    with pytest.raises(ValueError):
        replace_codes(codes, 0.5, 10, rng, "pixel")


def test_zero_fraction_drop_has_zero_deltas(make_tiny, tiny_scenes):
    m = make_tiny().eval()
    images = torch.as_tensor(np.stack([s.image for s in tiny_scenes[0]])).permute(0, 3, 1, 2)
    with torch.no_grad():
        m.quantizer.init_codebook(m.encode_slots(images, mode="eval").slots, torch.Generator().manual_seed(0))
    res = token_drop_study(m, tiny_scenes[1], fraction=0.0, steps=3)
    assert res.relative_deltas == {"psnr": 0.0, "ssim": 0.0, "pixel_l1": 0.0}


def test_ablation_matrix_names_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError, match="nsa"):
        ablation_matrix({"nsa": tmp_path / "missing.pt"}, [])


def test_render_table_formats_columns():
    text = render_table([{"config": "full", "psnr": 21.5, "lpips": None}, {"config": "nsa", "psnr": 18.0, "lpips": None}])
    lines = text.splitlines()
    assert lines[0].split() == ["config", "psnr", "lpips"]
    assert lines[2].split() == ["full", "21.5000", "-"]
