import contextlib

import numpy as np
import pytest
import torch

from slot_tok.synthdata import Vocabulary


@contextlib.contextmanager
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(old)


@pytest.fixture
def f64():
    with float64():
        yield


@pytest.fixture
def vocab():
    return Vocabulary.default()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(vocab_size: int):
    from slot_tok.config import DecoderConfig, DiffusionConfig, QuantizerConfig, SlotConfig, TokenizerConfig

    return TokenizerConfig(
        image_size=16, patch_size=4, d_input=16, encoder_layers=1, encoder_heads=2, ref_dim=16,
        vocab_size=vocab_size, max_text_len=32,
        slots=SlotConfig(num_slots=3, dim=16, gru_iters=2, num_layers=1, heads=2),
        quantizer=QuantizerConfig(codebook_size=16, code_dim=4, depth=2),
        decoder=DecoderConfig(channels=(8, 16), blocks_per_res=1, heads=2,
                              diffusion=DiffusionConfig(timesteps=20, beta_start=1e-3, beta_end=0.2)),
    )


@pytest.fixture(scope="session")
def tiny_scenes():
    from slot_tok.synthdata import generate_scene, make_splits

    v = Vocabulary.default()
    tr, va = make_splits(12, 4, seed=2, canvas=(16, 16), objects=(1, 2))
    return [generate_scene(s, v) for s in tr], [generate_scene(s, v) for s in va]


@pytest.fixture(scope="session")
def tiny_reference(tiny_scenes):
    from slot_tok.encoder import pretrain_reference

    train, _ = tiny_scenes
    v = Vocabulary.default()
    return pretrain_reference(np.stack([s.image for s in train]), [s.caption_ids for s in train], v.size,
                              dim=16, steps=5, batch_size=4, seed=0)


@pytest.fixture
def make_tiny(tiny_reference):
    from slot_tok.tokenizer import SlotTokenizer

    def build(seed: int = 0, **slot_overrides):
        cfg = tiny_config(Vocabulary.default().size)
        for k, val in slot_overrides.items():
            setattr(cfg.slots, k, val)
        torch.manual_seed(seed)
        m = SlotTokenizer(cfg)
        m.attach_reference(tiny_reference)
        return m

    return build
