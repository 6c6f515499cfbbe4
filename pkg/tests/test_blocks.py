import math

import numpy as np
import pytest

from ipslt import autodiff as ad
from ipslt import blocks
from ipslt.blocks import DropNet, ParamView
from ipslt.errors import UsageError

from conftest import fd_grad, max_rel_err

C, HEADS, FF = 8, 2, 16


def _tensors(arrays, grad=False):
    return {k: ad.Tensor(v, requires_grad=grad) for k, v in arrays.items()}


def attn_params(rng, identity=False, grad=False):
    if identity:
        arrays = {k: np.eye(C) for k in ("wq", "wk", "wv", "wo")}
    else:
        arrays = blocks.init_attention(rng, C, np.float64)
    return ParamView(_tensors(arrays, grad))


def enc_params(rng, cross=True, grad=False):
    arrays = blocks.init_encoder_layer(rng, C, FF, np.float64, cross=cross)
    for k in arrays:
        if ".ln_" in k or k.startswith("ln_"):
            arrays[k] = arrays[k] + 0.1 * rng.standard_normal(arrays[k].shape)
    return ParamView(_tensors(arrays, grad))


def dec_params(rng, grad=False):
    return ParamView(_tensors(blocks.init_decoder_layer(rng, C, FF, np.float64), grad))


def X(rng, *shape):
    return ad.Tensor(rng.standard_normal(shape))


# -- attention ----------------------------------------------------------------

def test_single_key_attention_is_projection(rng):
    p = attn_params(rng)
    q, kv = X(rng, 1, 5, C), X(rng, 1, 1, C)
    out = blocks.attention(q, kv, kv, p, HEADS).data
    expected = kv.data[0, 0] @ p["wv"].data @ p["wo"].data
    assert np.allclose(out[0], np.tile(expected, (5, 1)), atol=1e-12)


def test_identical_keys_average_values(rng):
    p = attn_params(rng)
    q = X(rng, 1, 3, C)
    k = ad.Tensor(np.tile(rng.standard_normal(C), (1, 4, 1)))
    v = X(rng, 1, 4, C)
    out = blocks.attention(q, k, v, p, HEADS).data
    expected = v.data[0].mean(axis=0) @ p["wv"].data @ p["wo"].data
    assert np.allclose(out[0], np.tile(expected, (3, 1)), atol=1e-12)


def test_identity_projection_rows_are_convex_combinations(rng):
    p = attn_params(rng, identity=True)
    v = ad.Tensor(np.abs(rng.standard_normal((1, 6, C))))
    out = blocks.attention(X(rng, 1, 4, C), X(rng, 1, 6, C), v, p, 1).data[0]
    lo, hi = v.data[0].min(axis=0), v.data[0].max(axis=0)
    assert ((out >= lo - 1e-12) & (out <= hi + 1e-12)).all()


def test_unbatched_attention(rng):
    p = attn_params(rng)
    q, kv = X(rng, 3, C), X(rng, 4, C)
    single = blocks.attention(q, kv, kv, p, HEADS).data
    batched = blocks.attention(ad.Tensor(q.data[None]), ad.Tensor(kv.data[None]),
                               ad.Tensor(kv.data[None]), p, HEADS).data[0]
    assert single.shape == (3, C) and np.array_equal(single, batched)


def test_key_padding_mask_blocks_padded_keys(rng):
    p = attn_params(rng)
    q, kv = X(rng, 1, 3, C), X(rng, 1, 5, C)
    mask = blocks.key_padding_mask([[True, True, True, False, False]], np.float64)
    full = blocks.attention(q, kv, kv, p, HEADS, mask).data
    changed = kv.data.copy()
    changed[0, 3:] = 99.0
    kv2 = ad.Tensor(changed)
    assert np.array_equal(blocks.attention(q, kv2, kv2, p, HEADS, mask).data, full)
    short = ad.Tensor(kv.data[:, :3])
    assert np.allclose(blocks.attention(q, short, short, p, HEADS).data, full, atol=1e-12)


def test_positional_encoding_examples():
    pe = blocks.positional_encoding(5, 6)
    assert np.array_equal(pe[0, 0::2], np.zeros(3)) and np.array_equal(pe[0, 1::2], np.ones(3))
    assert np.array_equal(blocks.positional_encoding(6, 6)[:5], pe)
    assert np.allclose(blocks.positional_encoding(2, 4)[1],
                       [math.sin(1), math.cos(1), math.sin(0.01), math.cos(0.01)], atol=1e-15)
    with pytest.raises(UsageError):
        blocks.positional_encoding(3, 5)


# -- decoder layer --------------------------------------------------------------

def test_decoder_layer_is_causal(rng):
    p = dec_params(rng)
    x = rng.standard_normal((1, 6, C))
    memory = X(rng, 1, 4, C)
    ref = blocks.decoder_layer(ad.Tensor(x), memory, p, HEADS).data
    for t in range(5):
        y = x.copy()
        y[0, t + 1:] = rng.standard_normal((5 - t, C))
        out = blocks.decoder_layer(ad.Tensor(y), memory, p, HEADS).data
        assert np.array_equal(out[0, :t + 1], ref[0, :t + 1])


def test_decoder_single_step_self_attention(rng):
    p = dec_params(rng)
    x, memory = X(rng, 1, 1, C), X(rng, 1, 3, C)
    out = blocks.decoder_layer(x, memory, p, HEADS)
    assert out.shape == (1, 1, C)


def test_decoder_layer_training_needs_causal_mask(rng):
    with pytest.raises(UsageError):
        blocks.decoder_layer(X(rng, 1, 2, C), X(rng, 1, 2, C), dec_params(rng), HEADS,
                             training=True, rng=rng)


def test_decoder_layer_gradient(f64, rng):
    p = dec_params(rng, grad=True)
    x, memory = ad.Tensor(rng.standard_normal((2, 3, C)), requires_grad=True), \
        ad.Tensor(rng.standard_normal((2, 4, C)), requires_grad=True)
    w = rng.standard_normal((2, 3, C))
    mask = blocks.key_padding_mask([[1, 1, 1, 1], [1, 1, 0, 0]], np.float64)

    def loss():
        return (blocks.decoder_layer(x, memory, p, HEADS, memory_mask=mask) * ad.Tensor(w)).sum()

    _grad_check(loss, [x, memory] + [p.store[k] for k in p.store])


def _grad_check(loss, tensors, tol=1e-5):
    loss().backward()
    analytic = [t.grad.copy() for t in tensors]

    def f():
        with ad.no_grad():
            return loss().item()

    for t, g in zip(tensors, analytic):
        assert max_rel_err(g, fd_grad(f, t.data)) < tol


# -- encoder / refinement layer -------------------------------------------------

def test_encoder_layer_formula(rng):
    """out = LN_out(FFN(LN_ffn(s)) + LN_res(s)), s = self-attention(x) + x."""
    p = enc_params(rng, cross=False)
    x = X(rng, 1, 4, C)
    out = blocks.encoder_layer(x, p, HEADS).data

    def ln(v, name):
        mu, var = v.mean(-1, keepdims=True), v.var(-1, keepdims=True)
        return (v - mu) / np.sqrt(var + blocks.LN_EPS) * p[name + ".gain"].data + p[name + ".bias"].data

    s = blocks.attention(x, x, x, p.sub("self_attn"), HEADS).data + x.data
    h = ln(s, "ln_ffn")
    f = np.maximum(h @ p["ffn.w1"].data + p["ffn.b1"].data, 0) @ p["ffn.w2"].data + p["ffn.b2"].data
    assert np.allclose(out, ln(f + ln(s, "ln_res"), "ln_out"), atol=1e-12)


def test_beta_one_matches_plain_encoder_and_ignores_memory(rng):
    p = enc_params(rng)
    x, memory = X(rng, 1, 5, C), X(rng, 1, 5, C)
    mixed = blocks.refinement_encoder_layer(x, memory, p, HEADS, DropNet(1.0)).data
    plain = blocks.encoder_layer(x, p, HEADS).data
    assert np.array_equal(mixed, plain)
    other = blocks.refinement_encoder_layer(x, X(rng, 1, 5, C), p, HEADS, DropNet(1.0)).data
    assert np.array_equal(other, mixed)


def test_beta_zero_ignores_self_attention(rng):
    p = enc_params(rng)
    x, memory = X(rng, 1, 5, C), X(rng, 1, 5, C)
    _, mixed = blocks.refinement_encoder_layer(x, memory, p, HEADS, DropNet(0.0), return_mixed=True)
    for k in ("wq", "wk", "wv", "wo"):
        p.store[f"self_attn.{k}"].data = rng.standard_normal((C, C))
    _, again = blocks.refinement_encoder_layer(x, memory, p, HEADS, DropNet(0.0), return_mixed=True)
    assert np.array_equal(mixed.data, again.data)
    expected = blocks.attention(x, memory, memory, p.sub("cross_attn"), HEADS).data
    assert np.array_equal(mixed.data, expected)


def test_inference_mix_is_beta_blend(rng):
    p = enc_params(rng)
    x, memory = X(rng, 1, 4, C), X(rng, 1, 4, C)
    _, mixed = blocks.refinement_encoder_layer(x, memory, p, HEADS, DropNet(0.3), return_mixed=True)
    s = blocks.attention(x, x, x, p.sub("self_attn"), HEADS).data
    c = blocks.attention(x, memory, memory, p.sub("cross_attn"), HEADS).data
    assert np.allclose(mixed.data, 0.3 * s + 0.7 * c, atol=1e-12)


def test_train_sample_picks_one_branch(rng):
    p = enc_params(rng)
    x, memory = X(rng, 1, 4, C), X(rng, 1, 4, C)
    s = blocks.attention(x, x, x, p.sub("self_attn"), HEADS).data
    c = blocks.attention(x, memory, memory, p.sub("cross_attn"), HEADS).data
    draw = np.random.default_rng(0)
    for _ in range(20):
        _, m = blocks.refinement_encoder_layer(x, memory, p, HEADS, DropNet(0.5, "train-sample"),
                                               rng=draw, return_mixed=True)
        assert np.array_equal(m.data, s) or np.array_equal(m.data, c)


def test_train_sample_needs_rng(rng):
    p = enc_params(rng)
    x = X(rng, 1, 3, C)
    with pytest.raises(UsageError):
        blocks.refinement_encoder_layer(x, x, p, HEADS, DropNet(0.5, "train-sample"))


def test_refinement_shape_mismatch(rng):
    with pytest.raises(UsageError):
        blocks.refinement_encoder_layer(X(rng, 1, 3, C), X(rng, 1, 4, C), enc_params(rng), HEADS,
                                        DropNet(0.5))


def test_dropnet_validation():
    with pytest.raises(UsageError):
        DropNet(1.5)
    with pytest.raises(UsageError):
        DropNet(0.5, "sometimes")


def test_dropnet_monte_carlo_small(rng):
    """Mean of sampled branch outputs approaches the inference blend (cheap version)."""
    p = enc_params(rng)
    x, memory = X(rng, 1, 3, C), X(rng, 1, 3, C)
    _, blend = blocks.refinement_encoder_layer(x, memory, p, HEADS, DropNet(0.5), return_mixed=True)
    draw = np.random.default_rng(7)
    samples = np.stack([
        blocks.refinement_encoder_layer(x, memory, p, HEADS, DropNet(0.5, "train-sample"),
                                        rng=draw, return_mixed=True)[1].data
        for _ in range(2000)])
    se = samples.std(axis=0, ddof=1) / math.sqrt(len(samples))
    assert (np.abs(samples.mean(axis=0) - blend.data) <= 3 * se + 1e-12).mean() > 0.95


def test_refinement_layer_gradient(f64, rng):
    p = enc_params(rng, grad=True)
    x = ad.Tensor(rng.standard_normal((2, 3, C)), requires_grad=True)
    memory = ad.Tensor(rng.standard_normal((2, 3, C)), requires_grad=True)
    w = rng.standard_normal((2, 3, C))
    mask = blocks.key_padding_mask([[1, 1, 1], [1, 1, 0]], np.float64)

    def loss():
        out = blocks.refinement_encoder_layer(x, memory, p, HEADS, DropNet(0.4),
                                              self_mask=mask, cross_mask=mask)
        return (out * ad.Tensor(w)).sum()

    _grad_check(loss, [x, memory] + [p.store[k] for k in p.store])
