"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation builds its output with :meth:`Tensor._result`,
which records the parent tensors and a closure implementing the local
gradient rule. Calling :meth:`Tensor.backward` on a scalar replays those
closures in reverse topological order.

Arrays are plain numpy arrays. Float32 is the default precision; wrap code
in ``default_dtype(np.float64)`` for gradient checks.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

from .errors import NumericError, ShapeError, UsageError

_local = threading.local()


def get_default_dtype():
    return getattr(_local, "dtype", np.float32)


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for new tensors on this thread."""
    previous = get_default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = previous


def is_grad_enabled():
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on this thread (inference, evaluation)."""
    previous = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None and isinstance(data, (np.ndarray, np.floating)) and data.dtype.kind == "f":
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=dtype or get_default_dtype())
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    @classmethod
    def _result(cls, data, parents, backward):
        out = cls(data)
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # -- gradient machinery -------------------------------------------------
    def _accum(self, g):
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self):
        """Populate ``.grad`` on every reachable tensor that requires it."""
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("backward() called on a tensor that is not on the tape")
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, like=self)))

    def __rsub__(self, other):
        return add(as_tensor(other, like=self), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise UsageError("only division by a scalar is supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or get_default_dtype()))


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b, like=a if isinstance(a, Tensor) else None)

    def backward(g):
        a._accum(g)
        b._accum(g)

    return Tensor._result(a.data + b.data, (a, b), backward)


def neg(a):
    def backward(g):
        a._accum(-g)

    return Tensor._result(-a.data, (a,), backward)


def mul(a, b):
    """Elementwise (Hadamard) product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accum(g * b.data)
        if b.requires_grad:
            b._accum(g * a.data)

    return Tensor._result(a.data * b.data, (a, b), backward)


def scale(a, c):
    c = float(c)

    def backward(g):
        a._accum(g * c)

    return Tensor._result(a.data * a.data.dtype.type(c), (a,), backward)


def relu(a):
    mask = a.data > 0

    def backward(g):
        a._accum(g * mask)

    return Tensor._result(a.data * mask, (a,), backward)


def dropout(a, p, rng=None, training=True):
    """Inverted dropout: identity in eval mode, rescaled by 1/(1-p) in training."""
    if not training or p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise UsageError(f"dropout rate must be in [0, 1), got {p}")
    if rng is None:
        raise UsageError("dropout in training mode needs an rng")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / a.dtype.type(1.0 - p)

    def backward(g):
        a._accum(g * keep)

    return Tensor._result(a.data * keep, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accum(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                b._accum(a.data.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                b._accum(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return Tensor._result(out, (a, b), backward)


def reshape(a, shape):
    old = a.shape

    def backward(g):
        a._accum(g.reshape(old))

    return Tensor._result(a.data.reshape(shape), (a,), backward)


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        a._accum(np.transpose(g, inverse))

    return Tensor._result(np.transpose(a.data, axes), (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                t._accum(g[tuple(index)])

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def getitem(a, index):
    """Slicing / indexing; repeated fancy indices accumulate gradient."""

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        a._accum(full)

    return Tensor._result(a.data[index], (a,), backward)


def embedding(table, ids):
    """Gather rows of ``table`` (V x C) for an integer array ``ids``."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        table._accum(full)

    return Tensor._result(table.data[ids], (table,), backward)


def sum_(a, axis=None, keepdims=False):
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape))

    return Tensor._result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum_(a, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# normalisation, attention and losses
# ---------------------------------------------------------------------------

def _check_finite(x, what):
    if np.isnan(x).any():
        raise NumericError(f"NaN in {what} input")


def softmax(a, axis=-1):
    _check_finite(a.data, "softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a._accum(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return Tensor._result(y, (a,), backward)


def _log_softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def log_softmax(a, axis=-1):
    if axis not in (-1, a.ndim - 1):
        raise UsageError("log_softmax supports the last axis only")
    _check_finite(a.data, "log_softmax")
    y = _log_softmax(a.data)

    def backward(g):
        a._accum(g - np.exp(y) * g.sum(axis=-1, keepdims=True))

    return Tensor._result(y, (a,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalise the last axis to zero mean / unit variance, then apply gain and bias."""
    if x.shape[-1] < 2:
        raise UsageError("layer_norm needs at least two features")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain._accum((g * xhat).reshape(-1, x.shape[-1]).sum(axis=0))
        if bias.requires_grad:
            bias._accum(g.reshape(-1, x.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            x._accum(rstd * (gx - gx.mean(axis=-1, keepdims=True)
                             - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return Tensor._result(out, (x, gain, bias), backward)


def attention_core(q, k, v, n_heads, mask=None):
    """Multi-head scaled dot-product attention on already-projected inputs.

    ``q`` is (B, Tq, C), ``k`` and ``v`` are (B, Tk, C). ``mask`` is an
    additive array broadcastable to (B, 1, Tq, Tk) holding 0 or -inf.
    Returns the concatenated head outputs, (B, Tq, C).
    """
    B, Tq, C = q.shape
    Tk = k.shape[1]
    if k.shape != v.shape or k.shape[0] != B or k.shape[2] != C:
        raise ShapeError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    if C % n_heads:
        raise ShapeError(f"model width {C} not divisible by {n_heads} heads")
    d = C // n_heads
    qh = q.data.reshape(B, Tq, n_heads, d).transpose(0, 2, 1, 3)
    kh = k.data.reshape(B, Tk, n_heads, d).transpose(0, 2, 1, 3)
    vh = v.data.reshape(B, Tk, n_heads, d).transpose(0, 2, 1, 3)
    scale_ = q.dtype.type(1.0 / np.sqrt(d))
    scores = np.matmul(qh, kh.transpose(0, 1, 3, 2)) * scale_
    if mask is not None:
        if np.isneginf(mask).all(axis=-1).any():
            raise NumericError("attention row with every key masked")
        scores = scores + mask
    _check_finite(scores, "attention")
    scores -= scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    out = np.matmul(probs, vh).transpose(0, 2, 1, 3).reshape(B, Tq, C)

    def backward(g):
        gh = g.reshape(B, Tq, n_heads, d).transpose(0, 2, 1, 3)
        if v.requires_grad:
            gv = np.matmul(probs.transpose(0, 1, 3, 2), gh)
            v._accum(gv.transpose(0, 2, 1, 3).reshape(B, Tk, C))
        if q.requires_grad or k.requires_grad:
            gp = np.matmul(gh, vh.transpose(0, 1, 3, 2))
            gs = probs * (gp - (gp * probs).sum(axis=-1, keepdims=True)) * scale_
            if q.requires_grad:
                q._accum(np.matmul(gs, kh).transpose(0, 2, 1, 3).reshape(B, Tq, C))
            if k.requires_grad:
                gk = np.matmul(gs.transpose(0, 1, 3, 2), qh)
                k._accum(gk.transpose(0, 2, 1, 3).reshape(B, Tk, C))

    return Tensor._result(out, (q, k, v), backward)


def cross_entropy_from_logits(logits, targets, pad_id=None):
    """Mean negative log-likelihood over positions whose target is not ``pad_id``."""
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"logits {logits.shape} do not match targets {targets.shape}")
    V = logits.shape[-1]
    valid = np.ones(targets.shape, dtype=bool) if pad_id is None else targets != pad_id
    if not valid.any():
        raise UsageError("cross entropy over an all-padding target")
    live = targets[valid]
    if live.size and (live.min() < 0 or live.max() >= V):
        raise IndexError(f"target id out of range [0, {V})")
    _check_finite(logits.data, "cross_entropy")
    logp = _log_softmax(logits.data)
    safe = np.where(valid, targets, 0)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    count = valid.sum()
    loss = -(picked * valid).sum() / count

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, safe[..., None],
                          np.take_along_axis(grad, safe[..., None], axis=-1) - 1.0, axis=-1)
        grad *= (valid / count)[..., None]
        logits._accum(grad * g)

    return Tensor._result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def kl_divergence_from_logits(student, teacher, mask=None):
    """Mean over unmasked positions of KL(softmax(teacher) || softmax(student)).

    The teacher is treated as a constant: no gradient reaches it.
    """
    teacher_data = teacher.data if isinstance(teacher, Tensor) else np.asarray(teacher)
    if student.shape != teacher_data.shape:
        raise ShapeError(f"KL shape mismatch: {student.shape} vs {teacher_data.shape}")
    if mask is None:
        mask = np.ones(student.shape[:-1], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    count = mask.sum()
    if count == 0:
        raise UsageError("KL divergence over an all-padding mask")
    log_p = _log_softmax(teacher_data)
    log_q = _log_softmax(student.data)
    p = np.exp(log_p)
    per_pos = (p * (log_p - log_q)).sum(axis=-1)
    value = max(float((per_pos * mask).sum() / count), 0.0)

    def backward(g):
        student._accum((np.exp(log_q) - p) * (mask / count)[..., None] * g)

    return Tensor._result(np.asarray(value, dtype=student.dtype), (student,), backward)
