"""Adam with bias correction, plus global-norm gradient clipping."""
from __future__ import annotations

import numpy as np

from .errors import UsageError


def clip_grad_norm(tensors, max_norm):
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    grads = [t.grad for t in tensors if t.grad is not None]
    norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads)))
    if max_norm is not None and norm > max_norm:
        factor = max_norm / (norm + 1e-6)
        for t in tensors:
            if t.grad is not None:
                t.grad = t.grad * t.grad.dtype.type(factor)
    return norm


class Adam:
    """Adam over a named set of parameters.

    Each parameter keeps its own update count so parameters that sit out a
    step (no gradient, ``skip_missing=True``) still get correct bias
    correction later.
    """

    def __init__(self, named_params, lr=5e-5, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(named_params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.t = {n: 0 for n in self.params}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, skip_missing=False):
        missing = [n for n, p in self.params.items() if p.grad is None]
        if missing and not skip_missing:
            raise UsageError(f"no gradient for trainable parameter(s): {missing[:5]}")
        b1, b2 = self.betas
        self.step_count += 1
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.t[name] += 1
            t = self.t[name]
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            m_hat = m / (1.0 - b1 ** t)
            v_hat = v / (1.0 - b2 ** t)
            p.data = (p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def state_dict(self):
        return {
            "step_count": self.step_count,
            "t": dict(self.t),
            "m": dict(self.m),
            "v": dict(self.v),
            "lr": self.lr,
            "betas": list(self.betas),
            "eps": self.eps,
        }

    def load_state_dict(self, state):
        if set(state["m"]) != set(self.params):
            raise UsageError("optimizer state does not match the parameter set")
        self.step_count = int(state["step_count"])
        self.t = {n: int(state["t"][n]) for n in self.params}
        self.m = {n: np.array(state["m"][n], dtype=self.params[n].dtype) for n in self.params}
        self.v = {n: np.array(state["v"][n], dtype=self.params[n].dtype) for n in self.params}


def adam_step(params, grads, state, lr=5e-5, beta1=0.9, beta2=0.999, eps=1e-8):
    """Functional Adam update for a ``{name: Tensor}`` mapping and explicit grads.

    ``state`` is a dict that is created on first use and updated in place.
    """
    for name, p in params.items():
        if grads.get(name) is None:
            raise UsageError(f"no gradient for trainable parameter {name!r}")
    if not state:
        state.update(step=0, m={n: np.zeros_like(p.data) for n, p in params.items()},
                     v={n: np.zeros_like(p.data) for n, p in params.items()})
    state["step"] += 1
    t = state["step"]
    for name, p in params.items():
        g = grads[name]
        state["m"][name] = beta1 * state["m"][name] + (1 - beta1) * g
        state["v"][name] = beta2 * state["v"][name] + (1 - beta2) * g * g
        m_hat = state["m"][name] / (1 - beta1 ** t)
        v_hat = state["v"][name] / (1 - beta2 ** t)
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)
