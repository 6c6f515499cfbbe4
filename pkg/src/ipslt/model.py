"""IP-SLT forward passes: feature embedding, prototype initialisation and refinement.

The model is a set of functions over a :class:`ModelParams` store. Groups:

``embed``     sliding-window projection of frame vectors to width C
``tok_emb``   target token embeddings (shared by both decoders)
``e1``/``d1`` initialisation encoder / decoder
``e2``/``d2`` refinement encoder / decoder, stored once and reused for every iteration
``out_proj``  shared vocabulary projection W (C x |V|)
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from . import blocks
from .blocks import DropNet, ParamView
from .errors import ShapeError, UsageError
from .vocab import BOS

GROUPS = ("embed", "tok_emb", "e1", "d1", "e2", "d2", "out_proj")
INIT_GROUPS = ("embed", "tok_emb", "e1", "d1", "out_proj")


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    n_iter: int = 3
    beta: float = 0.5
    dropout: float = 0.1
    vocab_size: int = 23
    window: int = 4
    stride: int = 2
    frame_dim: int = 16
    decoder_reads_features: bool = False
    tie_iteration_dropout: bool = True
    zero_init_cross: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.n_iter < 0:
            raise UsageError("n_iter (K) must be >= 0")
        if not 0.0 <= self.beta <= 1.0:
            raise UsageError("beta must lie in [0, 1]")
        if self.stride < 1 or self.window < self.stride:
            raise UsageError("need stride >= 1 and window >= stride")
        if self.d_model % self.n_heads or self.d_model % 2:
            raise UsageError("d_model must be even and divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise UsageError("dropout must lie in [0, 1)")
        if self.vocab_size < 4:
            raise UsageError("vocab_size must leave room for at least one real token")

    @classmethod
    def paper_preset(cls, **overrides):
        """Paper-scale widths (3-layer stacks, 8 heads, 2048-wide FFN)."""
        values = dict(d_model=512, n_heads=8, n_layers=3, d_ff=2048)
        values.update(overrides)
        return cls(**values)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise UsageError(f"unknown model config key(s): {sorted(unknown)}")
        return cls(**values)

    def n_features(self, n_frames):
        return -(-int(n_frames) // self.stride)


@dataclass
class FeatureSequence:
    """Visual features F, (B, T_f, C), with a (B, T_f) validity mask."""

    features: ad.Tensor
    mask: np.ndarray

    @property
    def lengths(self):
        return self.mask.sum(axis=1)


@dataclass
class Prototype:
    """Semantic state E^k, (B, T_f, C), produced at iteration ``k``."""

    states: ad.Tensor
    mask: np.ndarray
    iteration: int = 0


class ModelParams:
    """Ordered store of named parameter tensors, grouped by the first name component."""

    def __init__(self, tensors=None):
        self.tensors = OrderedDict(tensors or {})

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def view(self, prefix=""):
        return ParamView(self.tensors, prefix)

    def group_of(self, name):
        return name.split(".", 1)[0]

    def names(self, groups=None):
        if groups is None:
            return list(self.tensors)
        return [n for n in self.tensors if self.group_of(n) in groups]

    def groups(self):
        out = OrderedDict()
        for name in self.tensors:
            out.setdefault(self.group_of(name), []).append(name)
        return out

    def count(self):
        return int(sum(t.size for t in self.tensors.values()))

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def state_dict(self):
        return OrderedDict((n, t.data) for n, t in self.tensors.items())

    def load_state_dict(self, arrays):
        missing = [n for n in self.tensors if n not in arrays]
        extra = [n for n in arrays if n not in self.tensors]
        if missing or extra:
            raise ShapeError(f"parameter names differ: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, tensor in self.tensors.items():
            value = np.asarray(arrays[name])
            if value.shape != tensor.shape:
                raise ShapeError(f"parameter {name}: expected shape {tensor.shape}, got {value.shape}")
            tensor.data = value.astype(tensor.dtype, copy=True)

    def copy(self):
        return ModelParams((n, ad.Tensor(t.data.copy(), requires_grad=t.requires_grad))
                           for n, t in self.tensors.items())

    def astype(self, dtype):
        return ModelParams((n, ad.Tensor(t.data.astype(dtype), requires_grad=t.requires_grad))
                           for n, t in self.tensors.items())


def init_params(config, rng, dtype=None):
    """Randomly initialise every parameter group (Xavier weights, unit LN gains)."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    dtype = dtype or ad.get_default_dtype()
    C, V = config.d_model, config.vocab_size
    arrays = OrderedDict()
    arrays["embed.weight"] = blocks.xavier(rng, config.window * config.frame_dim, C, dtype)
    arrays["embed.bias"] = np.zeros(C, dtype)
    arrays["tok_emb.weight"] = (rng.standard_normal((V, C)) / math.sqrt(C)).astype(dtype)
    for group, maker in (("e1", "enc"), ("d1", "dec"), ("e2", "ref"), ("d2", "dec")):
        for i in range(config.n_layers):
            if maker == "dec":
                layer = blocks.init_decoder_layer(rng, C, config.d_ff, dtype)
            else:
                layer = blocks.init_encoder_layer(rng, C, config.d_ff, dtype, cross=maker == "ref")
            for name, value in layer.items():
                arrays[f"{group}.layers.{i}.{name}"] = value
    arrays["out_proj.weight"] = blocks.xavier(rng, C, V, dtype)
    if config.zero_init_cross:
        # the refinement starts out ignoring E^{k-1}, so iterations agree and IDL starts at 0
        for name in arrays:
            if name.startswith("e2.") and name.endswith("cross_attn.wo"):
                arrays[name][:] = 0
    return ModelParams((n, ad.Tensor(a, requires_grad=True, name=n)) for n, a in arrays.items())


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _batched_frames(frames, lengths):
    frames = np.asarray(frames)
    if frames.ndim == 2:
        frames = frames[None]
        if lengths is None:
            lengths = [frames.shape[1]]
    if frames.ndim != 3:
        raise ShapeError(f"frames must be (T_x, D) or (B, T_x, D), got {frames.shape}")
    if lengths is None:
        lengths = np.full(frames.shape[0], frames.shape[1])
    return frames, np.asarray(lengths, dtype=np.int64)


def embed_frames(frames, params, config, lengths=None, training=False, rng=None):
    """Slide a window of ``w`` frames with stride ``s`` and project each window to C.

    Produces ceil(T_x / s) feature vectors per sample; frames past the end of
    a sample count as zeros.
    """
    frames, lengths = _batched_frames(frames, lengths)
    B, T_x, D = frames.shape
    if T_x < 1 or (lengths < 1).any():
        raise UsageError("embed_frames needs at least one frame per sample")
    if D != config.frame_dim:
        raise ShapeError(f"frame width {D} != configured frame_dim {config.frame_dim}")
    dtype = params["embed.weight"].dtype
    w, s = config.window, config.stride
    T_f = config.n_features(T_x)
    index = np.arange(T_f)[:, None] * s + np.arange(w)[None, :]
    padded = np.zeros((B, index.max() + 1, D), dtype=dtype)
    live = np.arange(T_x)[None, :] < lengths[:, None]
    padded[:, :T_x] = np.where(live[..., None], frames, 0.0)
    windows = padded[:, index].reshape(B, T_f, w * D)
    pe = blocks.positional_encoding(T_f, config.d_model).astype(dtype)
    x = ad.Tensor(windows) @ params["embed.weight"] + params["embed.bias"] + pe
    x = ad.dropout(x, config.dropout, rng, training)
    mask = np.arange(T_f)[None, :] < -(-lengths[:, None] // s)
    return FeatureSequence(x, mask)


def initialize_prototype(F, params, config, training=False, rng=None):
    """E^0 = E1(F): a stack of self-attention encoder layers."""
    self_mask = blocks.key_padding_mask(F.mask, F.features.dtype)
    x = F.features
    view = params.view("e1.layers.")
    for i in range(config.n_layers):
        x = blocks.encoder_layer(x, view.sub(str(i)), config.n_heads, training=training,
                                 dropout=config.dropout, rng=rng, self_mask=self_mask)
    return Prototype(x, F.mask, 0)


def draw_branches(config, rng):
    """One drop-net draw per refinement layer (True = self-attention branch)."""
    return [bool(rng.random() < config.beta) for _ in range(config.n_layers)]


def refine_prototype(F, E_prev, params, config, dropnet=None, training=False, rng=None,
                     branches=None):
    """E^k from F (first-layer state) and E^{k-1} (cross-attention memory of every layer).

    ``branches`` fixes the per-layer drop-net choices in train-sample mode.
    """
    if F.features.shape != E_prev.states.shape:
        raise ShapeError(f"features {F.features.shape} and prototype {E_prev.states.shape} differ")
    if dropnet is None:
        dropnet = DropNet(config.beta, "train-sample" if training else "inference-mix")
    key_mask = blocks.key_padding_mask(F.mask, F.features.dtype)
    x = F.features
    view = params.view("e2.layers.")
    for i in range(config.n_layers):
        layer_dropnet = dropnet if branches is None else dropnet.fixed(branches[i])
        x = blocks.refinement_encoder_layer(
            x, E_prev.states, view.sub(str(i)), config.n_heads, layer_dropnet, rng=rng,
            training=training, dropout=config.dropout, self_mask=key_mask, cross_mask=key_mask)
    return Prototype(x, F.mask, E_prev.iteration + 1)


def decode_teacher_forced(E, tokens, params, config, which="d2", training=False, rng=None,
                          features=None):
    """Logits (B, T_y, |V|) for decoder input ``tokens`` (each row starting with BOS)."""
    if which not in ("d1", "d2"):
        raise UsageError(f"decoder must be 'd1' or 'd2', got {which!r}")
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None]
    if tokens.shape[1] < 1 or (tokens[:, 0] != BOS).any():
        raise UsageError("decoder input must start with BOS")
    if tokens.shape[0] != E.states.shape[0]:
        raise ShapeError(f"{tokens.shape[0]} token rows for {E.states.shape[0]} prototypes")
    C = config.d_model
    dtype = E.states.dtype
    T_y = tokens.shape[1]
    memory, memory_valid = E.states, E.mask
    if which == "d2" and config.decoder_reads_features and features is not None:
        memory = ad.concat([memory, features.features], axis=1)
        memory_valid = np.concatenate([memory_valid, features.mask], axis=1)
    x = ad.embedding(params["tok_emb.weight"], tokens) * math.sqrt(C)
    x = x + blocks.positional_encoding(T_y, C).astype(dtype)
    x = ad.dropout(x, config.dropout, rng, training)
    causal = blocks.causal_mask(T_y, dtype)
    memory_mask = blocks.key_padding_mask(memory_valid, dtype)
    view = params.view(f"{which}.layers.")
    for i in range(config.n_layers):
        x = blocks.decoder_layer(x, memory, view.sub(str(i)), config.n_heads, causal, memory_mask,
                                 training=training, dropout=config.dropout, rng=rng)
    return x @ params["out_proj.weight"]


def inference_decoder(config):
    """The decoder used at inference: D2, or D1 for a K=0 (baseline) model."""
    return "d1" if config.n_iter == 0 else "d2"


def forward_train(frames, tokens, params, config, rng, lengths=None, warm_only=False,
                  training=True):
    """Teacher-forced logits [U^0, U^1, ..., U^K] for one batch.

    ``warm_only`` stops after the initialisation branch (returns [U^0]).
    """
    F = embed_frames(frames, params, config, lengths, training, rng)
    E = initialize_prototype(F, params, config, training, rng)
    logits = [decode_teacher_forced(E, tokens, params, config, "d1", training, rng)]
    if warm_only:
        return logits
    mode = "train-sample" if training else "inference-mix"
    dropnet = DropNet(config.beta, mode)
    branches = draw_branches(config, rng) if training and config.n_iter else None
    seed = int(rng.integers(2**63)) if training and config.tie_iteration_dropout else None
    for _ in range(config.n_iter):
        # tied masks: every iteration of the shared module sees the same dropout noise
        step_rng = rng if seed is None else np.random.default_rng(seed)
        E = refine_prototype(F, E, params, config, dropnet, training, step_rng, branches)
        logits.append(decode_teacher_forced(E, tokens, params, config, "d2", training, step_rng, F))
    return logits


def forward_infer(frames, params, config, lengths=None, n_iter=None, return_features=False):
    """Final prototype E^K in eval mode. D1 is never touched."""
    K = config.n_iter if n_iter is None else n_iter
    with ad.no_grad():
        F = embed_frames(frames, params, config, lengths)
        E = initialize_prototype(F, params, config)
        dropnet = DropNet(config.beta, "inference-mix")
        for _ in range(K):
            E = refine_prototype(F, E, params, config, dropnet)
    return (E, F) if return_features else E
