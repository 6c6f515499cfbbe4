"""Transformer building blocks: attention, encoder/decoder layers, drop-net mixing.

Layers are plain functions of ``(inputs, params, rng)``. Parameters are passed
as :class:`ParamView` objects, a prefix into the flat, dotted-name parameter
store owned by the model. All activations are batched, shape (B, T, C);
:func:`attention` additionally accepts unbatched (T, C) inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import UsageError

LN_EPS = 1e-5


class ParamView:
    """Read-only prefix view into a flat ``{dotted.name: Tensor}`` mapping."""

    def __init__(self, store, prefix=""):
        self.store = store
        self.prefix = prefix

    def __getitem__(self, key):
        return self.store[self.prefix + key]

    def __contains__(self, key):
        return (self.prefix + key) in self.store

    def has_group(self, name):
        head = self.prefix + name + "."
        return any(k.startswith(head) for k in self.store)

    def sub(self, name):
        return ParamView(self.store, self.prefix + name + ".")


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------

def xavier(rng, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def init_attention(rng, d_model, dtype):
    return {name: xavier(rng, d_model, d_model, dtype) for name in ("wq", "wk", "wv", "wo")}


def init_ffn(rng, d_model, d_ff, dtype):
    return {
        "w1": xavier(rng, d_model, d_ff, dtype),
        "b1": np.zeros(d_ff, dtype),
        "w2": xavier(rng, d_ff, d_model, dtype),
        "b2": np.zeros(d_model, dtype),
    }


def init_layer_norm(d_model, dtype):
    return {"gain": np.ones(d_model, dtype), "bias": np.zeros(d_model, dtype)}


def _flatten(groups):
    flat = {}
    for prefix, group in groups.items():
        for name, value in group.items():
            flat[f"{prefix}.{name}"] = value
    return flat


def init_encoder_layer(rng, d_model, d_ff, dtype, cross=False):
    groups = {"self_attn": init_attention(rng, d_model, dtype)}
    if cross:
        groups["cross_attn"] = init_attention(rng, d_model, dtype)
    groups["ffn"] = init_ffn(rng, d_model, d_ff, dtype)
    for ln in ("ln_ffn", "ln_res", "ln_out"):
        groups[ln] = init_layer_norm(d_model, dtype)
    return _flatten(groups)


def init_decoder_layer(rng, d_model, d_ff, dtype):
    groups = {
        "self_attn": init_attention(rng, d_model, dtype),
        "cross_attn": init_attention(rng, d_model, dtype),
        "ffn": init_ffn(rng, d_model, d_ff, dtype),
    }
    for ln in ("ln1", "ln2", "ln3"):
        groups[ln] = init_layer_norm(d_model, dtype)
    return _flatten(groups)


# ---------------------------------------------------------------------------
# masks and positions
# ---------------------------------------------------------------------------

def positional_encoding(T, C, base=10000.0):
    """Sinusoidal table: sin on even columns, cos on odd columns."""
    if T < 1 or C < 1 or C % 2:
        raise UsageError(f"positional encoding needs T >= 1 and even C >= 2, got T={T}, C={C}")
    pos = np.arange(T, dtype=np.float64)[:, None]
    freq = base ** (-np.arange(0, C, 2, dtype=np.float64) / C)
    table = np.empty((T, C), dtype=np.float64)
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return table


def key_padding_mask(valid, dtype=np.float32):
    """(B, Tk) boolean validity -> additive mask of shape (B, 1, 1, Tk)."""
    valid = np.asarray(valid, dtype=bool)
    return np.where(valid, 0.0, -np.inf).astype(dtype)[:, None, None, :]


def causal_mask(T, dtype=np.float32):
    """Additive (1, 1, T, T) mask letting position t see positions <= t."""
    allowed = np.tril(np.ones((T, T), dtype=bool))
    return np.where(allowed, 0.0, -np.inf).astype(dtype)[None, None]


def _as_additive(mask, dtype):
    if mask is None:
        return None
    mask = np.asarray(mask)
    if mask.dtype == bool:
        mask = np.where(mask, 0.0, -np.inf)
    mask = mask.astype(dtype, copy=False)
    while mask.ndim < 4:
        mask = mask[None] if mask.ndim < 3 else mask[:, None]
    return mask


# ---------------------------------------------------------------------------
# sub-layers
# ---------------------------------------------------------------------------

def attention(query, key, value, p, n_heads, mask=None):
    """Multi-head scaled dot-product attention ``attn(q, K, V)``.

    ``mask`` may be boolean (True = attend) or additive (0 / -inf), with
    shape (Tq, Tk), (B, Tq, Tk) or anything broadcastable to (B, 1, Tq, Tk).
    """
    unbatched = query.ndim == 2
    if unbatched:
        query, key, value = (ad.reshape(t, (1,) + t.shape) for t in (query, key, value))
    if key.shape[:2] != value.shape[:2]:
        raise UsageError(f"keys {key.shape} and values {value.shape} differ in length")
    q = query @ p["wq"]
    k = key @ p["wk"]
    v = value @ p["wv"]
    out = ad.attention_core(q, k, v, n_heads, _as_additive(mask, q.dtype)) @ p["wo"]
    if unbatched:
        out = ad.reshape(out, out.shape[1:])
    return out


def feed_forward(x, p, dropout=0.0, rng=None, training=False):
    h = ad.relu(x @ p["w1"] + p["b1"])
    h = ad.dropout(h, dropout, rng, training)
    return h @ p["w2"] + p["b2"]


def layer_norm(x, p):
    return ad.layer_norm(x, p["gain"], p["bias"], LN_EPS)


@dataclass(frozen=True)
class DropNet:
    """Mixing rule between the self- and cross-attention branches.

    ``train-sample`` picks one branch per layer per forward pass (self with
    probability ``beta``); ``inference-mix`` blends them with weight ``beta``.
    A preset ``choice`` (True = self) replaces the draw.
    """

    beta: float = 0.5
    mode: str = "inference-mix"
    choice: bool = None

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise UsageError(f"beta must lie in [0, 1], got {self.beta}")
        if self.mode not in ("train-sample", "inference-mix"):
            raise UsageError(f"unknown drop-net mode {self.mode!r}")

    def fixed(self, choice):
        return DropNet(self.beta, self.mode, bool(choice))


def mixed_attention(state, memory, p, n_heads, dropnet, rng=None, self_mask=None, cross_mask=None):
    """Hidden state before the residual: self branch, cross branch, or their blend."""
    if memory is None or not p.has_group("cross_attn"):
        return attention(state, state, state, p.sub("self_attn"), n_heads, self_mask)
    beta = dropnet.beta
    if dropnet.mode == "train-sample":
        if dropnet.choice is not None:
            use_self = dropnet.choice
        elif rng is None:
            raise UsageError("drop-net train-sample mode needs an rng")
        else:
            use_self = rng.random() < beta
        if use_self:
            return attention(state, state, state, p.sub("self_attn"), n_heads, self_mask)
        return attention(state, memory, memory, p.sub("cross_attn"), n_heads, cross_mask)
    if beta == 1.0:
        return attention(state, state, state, p.sub("self_attn"), n_heads, self_mask)
    if beta == 0.0:
        return attention(state, memory, memory, p.sub("cross_attn"), n_heads, cross_mask)
    s = attention(state, state, state, p.sub("self_attn"), n_heads, self_mask)
    c = attention(state, memory, memory, p.sub("cross_attn"), n_heads, cross_mask)
    return s * beta + c * (1.0 - beta)


def encoder_layer(state, p, n_heads, memory=None, dropnet=DropNet(1.0), rng=None,
                  training=False, dropout=0.0, self_mask=None, cross_mask=None,
                  return_mixed=False):
    """One encoder layer: LN_out(FFN(LN_ffn(s)) + LN_res(s)) with s = mixed + state.

    Without ``memory`` (or without cross-attention weights) the mixed state is
    plain self-attention, which is how the initialisation encoder uses it.
    """
    mixed = mixed_attention(state, memory, p, n_heads, dropnet, rng, self_mask, cross_mask)
    s = ad.dropout(mixed, dropout, rng, training) + state
    h = layer_norm(s, p.sub("ln_ffn"))
    r = layer_norm(s, p.sub("ln_res"))
    f = ad.dropout(feed_forward(h, p.sub("ffn"), dropout, rng, training), dropout, rng, training)
    out = layer_norm(f + r, p.sub("ln_out"))
    return (out, mixed) if return_mixed else out


def refinement_encoder_layer(state, memory, p, n_heads, dropnet, rng=None, training=False,
                             dropout=0.0, self_mask=None, cross_mask=None, return_mixed=False):
    """Encoder layer whose attention mixes self-attention with cross-attention to ``memory``."""
    if memory.shape != state.shape:
        raise UsageError(f"state {state.shape} and memory {memory.shape} must match")
    return encoder_layer(state, p, n_heads, memory, dropnet, rng, training, dropout,
                         self_mask, cross_mask, return_mixed)


def decoder_layer(state, memory, p, n_heads, causal=None, memory_mask=None, training=False,
                  dropout=0.0, rng=None):
    """Post-norm decoder layer: masked self-attention, cross-attention, FFN."""
    if causal is None:
        if training:
            raise UsageError("decoder layer in training mode needs an explicit causal mask")
        causal = causal_mask(state.shape[-2], state.dtype)
    a = attention(state, state, state, p.sub("self_attn"), n_heads, causal)
    x = layer_norm(state + ad.dropout(a, dropout, rng, training), p.sub("ln1"))
    c = attention(x, memory, memory, p.sub("cross_attn"), n_heads, memory_mask)
    x = layer_norm(x + ad.dropout(c, dropout, rng, training), p.sub("ln2"))
    f = feed_forward(x, p.sub("ffn"), dropout, rng, training)
    return layer_norm(x + ad.dropout(f, dropout, rng, training), p.sub("ln3"))
