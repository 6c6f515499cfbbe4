"""Finite-difference verification of analytic gradients."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import autodiff as ad
from .model import GROUPS, ModelConfig, forward_train, init_params
from .vocab import BOS, EOS, PAD

DEFAULT_DIMS = dict(d_model=8, n_heads=2, n_layers=1, n_iter=2, d_ff=16, vocab_size=8,
                    frame_dim=3, window=2, stride=2, beta=0.5, dropout=0.0, zero_init_cross=False)
TOLERANCE = 1e-4


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numerical_gradient(f, tensor, indices=None, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. entries of ``tensor.data``."""
    flat = tensor.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = []
    for i in indices:
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        out.append((up - down) / (2 * h))
    return np.array(out)


def check_tensor(f, tensor, analytic, max_entries=None, rng=None, h=1e-5):
    """Max relative error between ``analytic`` and central differences for one tensor."""
    size = tensor.data.size
    if max_entries is not None and size > max_entries:
        indices = np.sort((rng or np.random.default_rng(0)).choice(size, max_entries, replace=False))
    else:
        indices = np.arange(size)
    numeric = numerical_gradient(f, tensor, indices, h)
    return float(relative_error(np.asarray(analytic).reshape(-1)[indices], numeric).max())


def toy_batch(config, rng):
    """Two samples of different length so padding masks are exercised."""
    lengths = np.array([7, 4])
    frames = rng.standard_normal((2, 7, config.frame_dim))
    frames[1, 4:] = 0.0
    real = rng.integers(3, config.vocab_size, size=(2, 3))
    tgt_in = np.array([[BOS, real[0, 0], real[0, 1], real[0, 2]],
                       [BOS, real[1, 0], real[1, 1], PAD]])
    tgt_out = np.array([[real[0, 0], real[0, 1], real[0, 2], EOS],
                        [real[1, 0], real[1, 1], EOS, PAD]])
    return frames, lengths, tgt_in, tgt_out


def model_loss_fn(params, config, frames, lengths, tgt_in, tgt_out, lam=15.0):
    """Scalar training objective with the distillation teacher frozen at the current point.

    The frozen teacher makes the finite-difference target coincide with the
    gradient the tape computes (which never differentiates through the teacher).
    """
    with ad.no_grad():
        teacher = forward_train(frames, tgt_in, params, config, None, lengths, training=False)[-1].data
    mask = tgt_out != PAD

    def loss():
        logits = forward_train(frames, tgt_in, params, config, None, lengths, training=False)
        total = ad.cross_entropy_from_logits(logits[0], tgt_out, PAD) \
            + ad.cross_entropy_from_logits(logits[-1], tgt_out, PAD)
        for u in logits[1:-1]:
            total = total + ad.kl_divergence_from_logits(u, teacher, mask) * lam
        return total

    return loss


def run_gradcheck(dims=None, seed=0, max_entries=None, h=1e-5):
    """Check every parameter of a tiny float64 model; returns ``{group: max relative error}``."""
    values = dict(DEFAULT_DIMS)
    values.update(dims or {})
    config = ModelConfig(**values)
    rng = np.random.default_rng(seed)
    with ad.default_dtype(np.float64):
        params = init_params(config, rng, dtype=np.float64)
        # perturb LayerNorm gains/biases away from 1/0 so their gradients are generic
        for name, t in params.items():
            if ".ln" in name:
                t.data = t.data + 0.1 * rng.standard_normal(t.shape)
        frames, lengths, tgt_in, tgt_out = toy_batch(config, rng)
        loss = model_loss_fn(params, config, frames, lengths, tgt_in, tgt_out)
        params.zero_grad()
        out = loss()
        out.backward()
        analytic = {n: (t.grad if t.grad is not None else np.zeros_like(t.data)).copy()
                    for n, t in params.items()}

        def f():
            with ad.no_grad():
                return loss().item()

        report = OrderedDict((g, 0.0) for g in GROUPS)
        for name, t in params.items():
            err = check_tensor(f, t, analytic[name], max_entries, rng, h)
            group = params.group_of(name)
            report[group] = max(report[group], err)
    return report
