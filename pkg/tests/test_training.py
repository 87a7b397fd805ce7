import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from conftest import tiny_config
from slot_tok.config import LossWeights, TrainConfig
from slot_tok.synthdata import Vocabulary
from slot_tok.tokenizer import SlotTokenizer
from slot_tok.training import (
    NonFiniteComponentError,
    StageTrainer,
    effective_weights,
    frozen_hash,
    i2t_loss,
    itc_loss,
    lr_at,
    make_batch,
    stage2_components,
    weighted_total,
)


def test_itc_with_identical_embeddings_is_two_ln_two(f64):
    s = torch.ones(2, 5)
    assert itc_loss(s, s.clone(), 0.07).item() == pytest.approx(2 * math.log(2), abs=1e-9)
    with pytest.raises(ValueError):
        itc_loss(torch.ones(1, 5), torch.ones(1, 5), 0.07)


def test_itc_matches_scalar_re_evaluation(f64):
    torch.manual_seed(0)
    s, t, tau = torch.randn(4, 6), torch.randn(4, 6), 0.3

    def unit(row):
        n = math.sqrt(sum(x * x for x in row))
        return [x / n for x in row]

    sn, tn = [unit(r) for r in s.tolist()], [unit(r) for r in t.tolist()]
    sim = [[sum(a * b for a, b in zip(sn[i], tn[j])) / tau for j in range(4)] for i in range(4)]
    i2t = -sum(sim[i][i] - math.log(sum(math.exp(x) for x in sim[i])) for i in range(4)) / 4
    t2i = -sum(sim[j][j] - math.log(sum(math.exp(sim[i][j]) for i in range(4))) for j in range(4)) / 4
    assert itc_loss(s, t, tau).item() == pytest.approx(i2t + t2i, abs=1e-12)


def test_i2t_with_uniform_logits_is_ln_vocab():
    T = 37
    ids = torch.tensor([[1, 5, 9, 2], [1, 7, 2, 0]])
    logits = torch.zeros(2, 3, T, dtype=torch.float64)
    assert i2t_loss(logits, ids).item() == pytest.approx(math.log(T), abs=1e-9)
    with pytest.raises(ValueError):
        i2t_loss(logits, torch.tensor([[1, 40, 2, 0]]).expand(2, -1))


def test_weighted_sum_and_nonfinite_component_naming():
    comps = {k: torch.tensor(1.0) for k in ("clip", "diff", "itc", "i2t")}
    w = effective_weights(TrainConfig(weights=LossWeights(1, 2, 3, 4)))
    assert weighted_total(comps, w).item() == 6.0 + 4.0
    comps2 = {"clip": torch.tensor(1.0), "diff": torch.tensor(1.0), "itc": torch.tensor(1.0), "i2t": torch.tensor(0.0)}
    assert weighted_total(comps2, w).item() == 6.0
    with pytest.raises(NonFiniteComponentError, match="itc"):
        weighted_total({"clip": torch.tensor(1.0), "itc": torch.tensor(float("nan"))}, w)


def test_lr_schedule_endpoints():
    assert lr_at(0, 100, 10, 1e-3) == 0.0
    assert lr_at(5, 100, 10, 1e-3) == pytest.approx(5e-4)
    assert lr_at(10, 100, 10, 1e-3) == pytest.approx(1e-3)
    assert lr_at(55, 100, 10, 1e-3) == pytest.approx(5e-4)
    assert lr_at(100, 100, 10, 1e-3) == pytest.approx(0.0, abs=1e-18)
    with pytest.raises(ValueError):
        lr_at(101, 100, 10, 1e-3)


def _cfg(**kw):
    base = dict(total_steps=4, warmup_steps=1, batch_size=4, max_lr=1e-3, log_every=1)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_weights_leave_parameters_unchanged(make_tiny, tiny_scenes):
    m = make_tiny()
    before = {k: v.clone() for k, v in m.state_dict().items()}
    zero = LossWeights(0, 0, 0, 0, 0, 0, 0, 0)
    StageTrainer(m, _cfg(weights=zero), tiny_scenes[0]).fit()
    for k, v in m.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_no_alignment_flag_equals_zero_alignment_weights(make_tiny, tiny_scenes):
    a = StageTrainer(make_tiny(), _cfg(no_alignment_loss=True), tiny_scenes[0]).fit()
    b = StageTrainer(make_tiny(), _cfg(weights=LossWeights(w3=0.0, w4=0.0)), tiny_scenes[0]).fit()
    assert [r["total"] for r in a.trace] == [r["total"] for r in b.trace]
    assert "itc" not in a.trace[0]


def test_stage1_losses_decrease(make_tiny, tiny_scenes):
    m = make_tiny()
    trace = StageTrainer(m, _cfg(total_steps=60, warmup_steps=5, max_lr=3e-3), tiny_scenes[0]).fit().trace
    totals = [r["total"] for r in trace]
    assert np.median(totals[-6:]) < np.median(totals[:6])


def test_stage2_frozen_parts_get_no_gradient_and_keep_their_hash(make_tiny, tiny_scenes):
    m = make_tiny()
    StageTrainer(m, _cfg(), tiny_scenes[0]).fit()
    ref_hash = frozen_hash(m)
    trainer = StageTrainer(m, _cfg(stage=2), tiny_scenes[0])
    assert bool(m.quantizer.codebook.initialized)
    batch = make_batch(tiny_scenes[0][:4])
    comps, _ = stage2_components(m, batch, trainer.weights, torch.Generator().manual_seed(0))
    weighted_total(comps, trainer.weights).backward()
    for part in (m.encoder, m.qformer, m.decoder):
        for p in part.parameters():
            assert p.grad is None or torch.count_nonzero(p.grad) == 0
    trainer.fit()
    assert frozen_hash(m) == ref_hash


def test_training_is_deterministic(make_tiny, tiny_scenes):
    traces = []
    for _ in range(2):
        m = make_tiny(seed=5)
        t1 = StageTrainer(m, _cfg(seed=3), tiny_scenes[0]).fit().trace
        t2 = StageTrainer(m, _cfg(stage=2, seed=3), tiny_scenes[0]).fit().trace
        traces.append((t1, t2, m.tokenize(np.stack([s.image for s in tiny_scenes[1]])).codes.tolist()))
    assert traces[0] == traces[1]


def test_dequantization_error_is_small_after_stage2(make_tiny, tiny_scenes):
    m = make_tiny()
    StageTrainer(m, _cfg(total_steps=40), tiny_scenes[0]).fit()
    StageTrainer(m, _cfg(stage=2, total_steps=200, warmup_steps=10, max_lr=3e-3, weights=LossWeights(w7=0, w8=0)),
                 tiny_scenes[0]).fit()
    images = make_batch(tiny_scenes[0]).images
    with torch.no_grad():
        slots = m.encode_slots(images, mode="eval").slots
        rebuilt = m.quantizer.dequantize(m.tokenize(images))
    rel = ((rebuilt - slots).pow(2).sum((1, 2)) / slots.pow(2).sum((1, 2))).mean().item()
    assert rel < 0.05, f"mean relative squared dequantization error {rel:.4f}"


def test_stage1_rejects_missing_reference(tiny_scenes):
    m = SlotTokenizer(tiny_config(Vocabulary.default().size))
    with pytest.raises(RuntimeError, match="reference"):
        StageTrainer(m, _cfg(), tiny_scenes[0]).step()


def test_itc_gradient_flows_through_temperature(make_tiny, tiny_scenes):
    m = make_tiny()
    batch = make_batch(tiny_scenes[0][:4])
    se = m.encode_slots(batch.images)
    text = m.qformer.encode_text(batch.ids)
    itc_loss(se.slots[:, -1], text.final, m.qformer.temperature).backward()
    assert m.qformer.log_tau.grad is not None and torch.isfinite(m.qformer.log_tau.grad).all()
    assert F.normalize(se.slots[:, -1], dim=-1).shape == (4, 16)
