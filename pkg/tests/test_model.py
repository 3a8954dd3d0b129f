import math

import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F
from hypothesis import given, strategies as st

from neurocodec.config import ConvSpec, ModelConfig, preset
from neurocodec.errors import ConfigError
from neurocodec.model import (Classifier, LNQKAttention, NeuralTransformer, PoolHead, PositionEmbedding,
                              TemporalEncoder, attention_weights)

from conftest import random_batch


def test_base_conv_arithmetic():
    spec = ConvSpec()
    assert (200 + 14 - 15) // 8 + 1 == 25
    assert spec.output_length(200) == 25
    assert spec.flat_width(200) == 200
    assert TemporalEncoder(ModelConfig()).proj is None


def test_presets():
    base, tiny = preset("base"), preset("tiny")
    assert (base.hidden_d, base.layers, base.heads, base.mlp_d) == (200, 12, 10, 800)
    assert (tiny.hidden_d, tiny.layers, tiny.heads, tiny.mlp_d) == (64, 2, 4, 256)
    assert base.layer_scale_init == 0.1
    assert (base.codebook_size, base.codebook_dim) == (8192, 64)


def test_config_errors():
    with pytest.raises(ConfigError):
        ModelConfig(hidden_d=30, heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(patch_w=4, conv=ConvSpec(kernel=(15, 3, 3), padding=(0, 0, 0)))
    with pytest.raises(ConfigError):
        preset("huge")


def test_patch_width_mismatch(tiny):
    enc = TemporalEncoder(tiny)
    with pytest.raises(ConfigError):
        enc(torch.zeros(1, 2, 100))


def test_temporal_encode_shape(tiny):
    x, _, _ = random_batch(tiny, B=1, C=2, n_times=4)
    out = TemporalEncoder(tiny)(x)
    assert out.shape == (1, 8, tiny.hidden_d)


def test_zero_patch_gives_bias_image(tiny):
    enc = NeuralTransformer(tiny).temporal
    # with zero conv biases GELU(GN(0)) = GELU(bias of GN) = 0, so the whole trace is zero
    out = enc(torch.zeros(1, 3, tiny.patch_w))
    assert torch.equal(out, torch.zeros_like(out))
    # nonzero group-norm bias: each block sees a constant input, the conv sees bias-only images
    with torch.no_grad():
        enc.blocks[-1]["norm"].bias.fill_(0.5)
    out = enc(torch.zeros(1, 1, tiny.patch_w))
    expected = F.gelu(torch.tensor(0.5)) * torch.ones(tiny.conv.flat_width(tiny.patch_w))
    expected = enc.proj(expected) if enc.proj is not None else expected
    assert torch.allclose(out[0, 0], expected, atol=1e-6)


def test_group_norm_stats(tiny):
    torch.manual_seed(0)
    gn = nn.GroupNorm(4, 8, eps=0.0).double()
    x = torch.randn(5, 8, 25, dtype=torch.float64) * 3 + 2
    y = gn(x).reshape(5, 4, -1)
    assert y.mean(-1).abs().max() < 1e-6
    assert (y.var(-1, unbiased=False) - 1).abs().max() < 1e-6


def test_add_embeddings_zero_tables(tiny):
    pe = PositionEmbedding(tiny, 8)
    with torch.no_grad():
        pe.time_embed.zero_()
        pe.spatial_embed.zero_()
    e = torch.randn(1, 3, 8)
    out = pe(e, torch.tensor([[0, 1, 2]]), torch.tensor([[1, 2, 3]]))
    assert torch.equal(out, e)


def test_add_embeddings_shared_channel(tiny):
    pe = PositionEmbedding(tiny, 8)
    e = torch.randn(1, 2, 8, dtype=torch.float64)
    pe = pe.double()
    out = pe(e, torch.tensor([[5, 5]]), torch.tensor([[1, 3]]))
    te_delta = pe.time_embed[0] - pe.time_embed[2]
    assert torch.allclose(out[0, 0] - out[0, 1], e[0, 0] - e[0, 1] + te_delta, atol=1e-12)


def test_add_embeddings_one_hot(tiny):
    pe = PositionEmbedding(tiny, 8)
    with torch.no_grad():
        pe.time_embed.zero_()
        pe.spatial_embed.zero_()
        pe.time_embed[1, 3] = 2.5
    e = torch.randn(1, 1, 8)
    diff = pe(e, torch.tensor([[4]]), torch.tensor([[2]])) - e
    assert torch.count_nonzero(diff) == 1 and diff[0, 0, 3] == 2.5


def test_time_index_beyond_table(tiny):
    pe = PositionEmbedding(tiny, 8)
    with pytest.raises(ConfigError):
        pe(torch.zeros(1, 1, 8), torch.tensor([[0]]), torch.tensor([[tiny.tmax + 1]]))
    with pytest.raises(ConfigError):
        pe(torch.zeros(1, 1, 8), torch.tensor([[tiny.registry_size]]), torch.tensor([[1]]))


def test_spatial_toggle(tiny):
    pe = PositionEmbedding(tiny.replace(use_spatial=False), 8)
    e = torch.zeros(1, 2, 8)
    out = pe(e, torch.tensor([[1, 2]]), torch.tensor([[1, 1]]))
    assert torch.equal(out[0, 0], out[0, 1])


def test_attention_single_token():
    torch.manual_seed(0)
    attn = LNQKAttention(16, 4).double()
    x = torch.randn(1, 1, 16, dtype=torch.float64)
    w = attn.weights(x)
    assert torch.equal(w, torch.ones_like(w))
    _, _, v = attn.split(x)
    head_out = (w @ v).transpose(-3, -2).flatten(-2)
    assert torch.allclose(head_out, v.transpose(-3, -2).flatten(-2), atol=0)


@given(st.integers(1, 12), st.integers(0, 1000))
def test_attention_rows_sum_to_one(n, seed):
    torch.manual_seed(seed)
    attn = LNQKAttention(16, 4).double()
    w = attn.weights(torch.randn(2, n, 16, dtype=torch.float64))
    assert (w.sum(-1) - 1).abs().max() < 1e-9


@given(st.floats(0.01, 100.0), st.integers(0, 1000))
def test_attention_logit_scale_invariance(scale, seed):
    # LN without eps is exactly invariant to positive rescaling; eps > 0 perturbs that by O(eps/var)
    torch.manual_seed(seed)
    ln_q, ln_k = nn.LayerNorm(8, eps=0.0).double(), nn.LayerNorm(8, eps=0.0).double()
    q = torch.randn(3, 5, 8, dtype=torch.float64)
    k = torch.randn(3, 5, 8, dtype=torch.float64)
    logits = lambda a, b: ln_q(a) @ ln_k(b).transpose(-2, -1) / math.sqrt(8)
    s = torch.rand(3, 5, 1, dtype=torch.float64) * scale + 1e-3  # per-token positive factors
    assert (logits(q * s, k * s) - logits(q, k)).abs().max() < 1e-9


def test_attention_input_scaling():
    torch.manual_seed(1)
    attn = LNQKAttention(16, 4, eps=0.0).double()
    x = torch.randn(2, 6, 16, dtype=torch.float64)
    assert (attn.weights(5.0 * x) - attn.weights(x)).abs().max() < 1e-9


def test_attention_weights_matches_formula():
    torch.manual_seed(2)
    q, k = torch.randn(2, 4, 8, dtype=torch.float64), torch.randn(2, 4, 8, dtype=torch.float64)
    ln = nn.LayerNorm(8).double()
    w = attention_weights(q, k, ln, ln)
    ref = F.softmax(F.layer_norm(q, (8,)) @ F.layer_norm(k, (8,)).transpose(-2, -1) / math.sqrt(8), -1)
    assert torch.allclose(w, ref, atol=1e-12)


def test_qkv_has_no_bias():
    assert LNQKAttention(16, 4).qkv.bias is None


def test_encoder_shape_and_finite(tiny):
    x, chan, time = random_batch(tiny, B=2, C=2, n_times=4)
    h = NeuralTransformer(tiny)(x, chan, time)
    assert h.shape == (2, 8, tiny.hidden_d)
    assert torch.isfinite(h).all()


def test_encoder_deterministic(tiny):
    torch.manual_seed(0)
    model = NeuralTransformer(tiny).eval()
    x, chan, time = random_batch(tiny)
    mask = torch.tensor([[True, False, False, True]] * 2)
    assert torch.equal(model(x, chan, time, mask), model(x, chan, time, mask))


def test_all_zero_mask_is_identity(tiny):
    model = NeuralTransformer(tiny).eval()
    x, chan, time = random_batch(tiny)
    mask = torch.zeros(chan.shape, dtype=torch.bool)
    assert torch.equal(model(x, chan, time, mask), model(x, chan, time))


def test_all_ones_mask_ignores_patch_values(tiny):
    model = NeuralTransformer(tiny).eval()
    x1, chan, time = random_batch(tiny, seed=1)
    x2, _, _ = random_batch(tiny, seed=2)
    mask = torch.ones(chan.shape, dtype=torch.bool)
    assert torch.equal(model(x1, chan, time, mask), model(x2, chan, time, mask))


def test_mask_shape_error(tiny):
    model = NeuralTransformer(tiny)
    x, chan, time = random_batch(tiny)
    with pytest.raises(ConfigError):
        model(x, chan, time, torch.zeros(1, 3, dtype=torch.bool))


def test_pool_head_identical_vectors():
    head = PoolHead(8, 3)
    v = torch.randn(8)
    h = v.expand(1, 5, 8)
    assert torch.allclose(h.mean(-2)[0], v)
    assert torch.allclose(head(h), head.fc(v[None]), atol=1e-6)


def test_pool_head_permutation():
    torch.manual_seed(0)
    head = PoolHead(8, 3).double()
    h = torch.randn(2, 7, 8, dtype=torch.float64)
    perm = torch.randperm(7)
    assert torch.allclose(head(h), head(h[:, perm]), atol=1e-12)


def test_pool_head_zero_weights():
    head = PoolHead(8, 3)
    with torch.no_grad():
        head.fc.weight.zero_()
        head.fc.bias.copy_(torch.tensor([1.0, -2.0, 0.5]))
    out = head(torch.randn(4, 6, 8))
    assert torch.equal(out, torch.tensor([1.0, -2.0, 0.5]).expand(4, 3))


def test_classifier_from_backbone(tiny):
    torch.manual_seed(0)
    bb = NeuralTransformer(tiny)
    clf = Classifier.from_backbone(bb, 4)
    for (n1, a), (n2, b) in zip(bb.state_dict().items(), clf.backbone.state_dict().items()):
        assert n1 == n2 and torch.equal(a, b)
    x, chan, time = random_batch(tiny)
    assert clf(x, chan, time).shape == (2, 4)


def test_double_precision_switch(tiny64):
    model = NeuralTransformer(tiny64).to(tiny64.dtype)
    x, chan, time = random_batch(tiny64)
    assert model(x, chan, time).dtype == torch.float64
