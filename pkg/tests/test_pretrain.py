import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, strategies as st

from neurocodec.errors import MaskError
from neurocodec.optim import AdamW, param_groups
from neurocodec.pretrain import (MaskSpec, MEMModel, batch_masks, generate_mask, invert_mask, mask_count,
                                 mem_accuracy, mem_loss, pretrain_step)
from neurocodec.tokenizer import Tokenizer

from conftest import random_batch


def test_mask_counts():
    assert generate_mask(10, 0.5, 0).count == 5
    assert generate_mask(7, 0.5, 0).count == 3
    assert generate_mask(1, 0.5, 0).count == 1


@given(st.integers(1, 300), st.floats(0.01, 0.99), st.integers(0, 2**63))
def test_mask_count_property(N, r, seed):
    m = generate_mask(N, r, seed)
    assert m.count == max(1, math.floor(r * N)) == mask_count(N, r)
    assert np.array_equal(m.bits, generate_mask(N, r, seed).bits)


def test_mask_invalid():
    with pytest.raises(ValueError):
        generate_mask(0, 0.5, 0)
    with pytest.raises(ValueError):
        generate_mask(4, 1.0, 0)


def test_invert_mask():
    m = MaskSpec(np.array([1, 0, 1, 0], dtype=bool), 0.5, 0)
    assert invert_mask(m).bits.tolist() == [False, True, False, True]
    assert np.array_equal(invert_mask(invert_mask(m)).bits, m.bits)


@given(st.integers(2, 100), st.integers(0, 10_000))
def test_mask_and_inverse_partition(N, seed):
    m = generate_mask(N, 0.5, seed)
    inv = invert_mask(m)
    assert not (m.bits & inv.bits).any() and (m.bits | inv.bits).all()
    assert m.count + inv.count == N


def test_seeds_differ():
    masks = batch_masks(8, 16, 0.5, 0, 0)
    assert len({tuple(r.tolist()) for r in masks}) > 1
    assert torch.equal(masks, batch_masks(8, 16, 0.5, 0, 0))
    assert not torch.equal(masks, batch_masks(8, 16, 0.5, 0, 1))


def _setup(cfg, seed=0):
    torch.manual_seed(seed)
    tok = Tokenizer(cfg, seed=seed)
    mem = MEMModel(cfg)
    x, chan, time = random_batch(cfg, B=3, C=2, n_times=4, seed=seed)
    return tok, mem, {"x": x, "chan": chan, "time": time}


def test_uniform_logits_give_log_k(tiny):
    tok, mem, b = _setup(tiny)
    with torch.no_grad():
        mem.lm_head.weight.zero_()
        mem.lm_head.bias.zero_()
    targets = tok.get_indices(b["x"], b["chan"], b["time"])
    mask = batch_masks(3, 8, 0.5, 0, 0)
    loss, _, n = mem_loss(mem, b["x"], b["chan"], b["time"], mask, targets)
    assert n == 12
    assert abs(loss.item() - math.log(tiny.codebook_size)) < 1e-6


def test_oracle_classifier(tiny):
    tok, mem, b = _setup(tiny)
    targets = tok.get_indices(b["x"], b["chan"], b["time"])
    mask = batch_masks(3, 8, 0.5, 0, 0)

    class Oracle(torch.nn.Module):
        def forward(self, x, chan, time, mask=None):
            return 50.0 * F.one_hot(targets, tiny.codebook_size).float()

    loss, acc, _ = mem_loss(Oracle(), b["x"], b["chan"], b["time"], mask, targets)
    assert loss.item() < 1e-12 and acc == 1.0


def test_mem_loss_reference(tiny64):
    tok, mem, b = _setup(tiny64)
    tok, mem = tok.double(), mem.double()
    targets = tok.get_indices(b["x"], b["chan"], b["time"])
    mask = batch_masks(3, 8, 0.5, 1, 0)
    loss, acc, _ = mem_loss(mem, b["x"], b["chan"], b["time"], mask, targets)
    logits = mem(b["x"], b["chan"], b["time"], mask).detach().numpy()
    m, t = mask.numpy(), targets.numpy()
    nll = []
    for i, j in zip(*np.nonzero(m)):
        z = logits[i, j]
        top = z.max()
        nll.append(-(z[t[i, j]] - top - math.log(sum(math.exp(v - top) for v in z))))
    assert abs(loss.item() - sum(nll) / len(nll)) < 1e-10
    hit = [logits[i, j].argmax() == t[i, j] for i, j in zip(*np.nonzero(m))]
    assert acc == pytest.approx(np.mean(hit))


def test_empty_mask_raises(tiny):
    tok, mem, b = _setup(tiny)
    targets = tok.get_indices(b["x"], b["chan"], b["time"])
    with pytest.raises(MaskError):
        mem_loss(mem, b["x"], b["chan"], b["time"], torch.zeros(3, 8, dtype=torch.bool), targets)


def test_sum_reduction(tiny):
    tok, mem, b = _setup(tiny)
    targets = tok.get_indices(b["x"], b["chan"], b["time"])
    mask = batch_masks(3, 8, 0.5, 0, 0)
    mean, _, n = mem_loss(mem, b["x"], b["chan"], b["time"], mask, targets)
    total, _, _ = mem_loss(mem, b["x"], b["chan"], b["time"], mask, targets, reduction="sum")
    assert total.item() == pytest.approx(n * mean.item(), rel=1e-6)


def _opt(mem):
    return AdamW(param_groups(mem.named_parameters(), weight_decay=0.05), (0.9, 0.98), clip=3.0)


def test_step_reuses_targets(tiny):
    tok, mem, b = _setup(tiny)
    res = pretrain_step(mem, tok, b, _opt(mem), 1e-3)
    assert tok.samples_encoded == 3  # once per sample, shared by both passes
    assert res.loss >= 0 and res.loss_sym >= 0 and 0 <= res.mem_accuracy <= 1
    assert res.total == pytest.approx(res.loss + res.loss_sym, rel=1e-6)


def test_symmetric_toggle(tiny):
    tok, mem, b = _setup(tiny)
    res = pretrain_step(mem, tok, b, _opt(mem), 1e-3, symmetric=False)
    assert res.loss_sym == 0.0 and res.total == res.loss


def test_step_trace_is_deterministic(tiny):
    def trace():
        tok, mem, b = _setup(tiny, seed=4)
        opt = _opt(mem)
        return [pretrain_step(mem, tok, b, opt, 1e-3, seed=9, step=s).total for s in range(3)]

    assert trace() == trace()


def test_tokenizer_untouched_by_step(tiny):
    tok, mem, b = _setup(tiny)
    before = {k: v.clone() for k, v in tok.state_dict().items()}
    pretrain_step(mem, tok, b, _opt(mem), 1e-3)
    assert all(torch.equal(before[k], v) for k, v in tok.state_dict().items())


def test_chance_accuracy(tiny):
    """Fresh Gaussian head per batch: exchangeable rows make every class equally likely."""
    torch.manual_seed(0)
    g = torch.Generator().manual_seed(0)
    tok, mem = Tokenizer(tiny), MEMModel(tiny)
    accs = []
    for i in range(200):
        with torch.no_grad():
            mem.lm_head.weight.copy_(torch.randn(mem.lm_head.weight.shape, generator=g))
        x, chan, time = random_batch(tiny, B=4, C=2, n_times=4, seed=i)
        accs.append(mem_accuracy(mem, tok, [{"x": x, "chan": chan, "time": time}], 0.5, seed=i))
    accs = np.array(accs)
    se = accs.std(ddof=1) / np.sqrt(len(accs))
    assert abs(accs.mean() - 1 / tiny.codebook_size) <= 3 * se
