"""scikit-learn style wrapper: ``fit(X, y)`` on frame sequences and token-id targets."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .data import Sample
from .decoding import BeamConfig, translate_many
from .errors import ShapeError, UsageError
from .metrics import bleu
from .model import ModelConfig, init_params
from .training import TrainConfig, train_epochs
from .vocab import EOS, N_SPECIAL


def check_frames(X, frame_dim=None):
    """Validate a list of (T_x, D) float arrays; returns float32 copies."""
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = list(X)
    if not isinstance(X, (list, tuple)) or not X:
        raise UsageError("X must be a non-empty list of (T_x, D) arrays")
    out = [check_array(x, dtype=np.float32, ensure_2d=True) for x in X]
    dims = {x.shape[1] for x in out}
    if len(dims) != 1:
        raise ShapeError(f"all frame sequences must share one frame width, got {sorted(dims)}")
    if frame_dim is not None and dims != {frame_dim}:
        raise ShapeError(f"expected frame width {frame_dim}, got {dims.pop()}")
    return out


def check_targets(y, n_samples):
    """Validate token-id sequences; real tokens must avoid the reserved ids."""
    if len(y) != n_samples:
        raise ShapeError(f"{n_samples} frame sequences but {len(y)} targets")
    out = []
    for seq in y:
        seq = [int(t) for t in seq]
        if any(t < N_SPECIAL for t in seq):
            raise UsageError(f"target ids below {N_SPECIAL} are reserved")
        out.append(seq)
    return out


class IPSLTTranslator(BaseEstimator):
    """Iterative prototype refinement translator.

    ``X`` is a list of (T_x, frame_dim) arrays and ``y`` a list of token-id
    lists (ids >= 3; 0..2 are PAD/BOS/EOS). ``predict`` returns token-id lists.
    """

    def __init__(self, d_model=64, n_heads=4, n_layers=2, d_ff=128, n_iter=3, beta=0.5,
                 dropout=0.1, window=4, stride=2, lam=15.0, idl_reduction="token", lr=1e-3,
                 batch_size=8, epochs=30, warm_max_epochs=3, beam_width=3, length_penalty=1.0,
                 vocab_size=None, random_state=0, verbose=False):
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.d_ff = d_ff
        self.n_iter = n_iter
        self.beta = beta
        self.dropout = dropout
        self.window = window
        self.stride = stride
        self.lam = lam
        self.idl_reduction = idl_reduction
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.warm_max_epochs = warm_max_epochs
        self.beam_width = beam_width
        self.length_penalty = length_penalty
        self.vocab_size = vocab_size
        self.random_state = random_state
        self.verbose = verbose

    def _samples(self, X, y=None, prefix="x"):
        targets = y if y is not None else [[] for _ in X]
        return [Sample(f"{prefix}-{i}", x, t) for i, (x, t) in enumerate(zip(X, targets))]

    def fit(self, X, y, X_dev=None, y_dev=None):
        X = check_frames(X)
        y = check_targets(y, len(X))
        vocab = self.vocab_size or max([EOS + 2] + [max(t) + 1 for t in y if t])
        self.config_ = ModelConfig(
            d_model=self.d_model, n_heads=self.n_heads, n_layers=self.n_layers, d_ff=self.d_ff,
            n_iter=self.n_iter, beta=self.beta, dropout=self.dropout, vocab_size=vocab,
            window=self.window, stride=self.stride, frame_dim=X[0].shape[1])
        tc = TrainConfig(lr=self.lr, batch_size=self.batch_size, epochs=self.epochs,
                         warm_max_epochs=self.warm_max_epochs, lam=self.lam,
                         idl_reduction=self.idl_reduction)
        rng = np.random.default_rng(self.random_state)
        self.params_ = init_params(self.config_, rng)
        train = self._samples(X, y, "train")
        dev = None
        if X_dev is not None:
            X_dev = check_frames(X_dev, self.config_.frame_dim)
            dev = self._samples(X_dev, check_targets(y_dev, len(X_dev)), "dev")
        log_fn = print if self.verbose else None
        state = train_epochs(train, dev, self.params_, self.config_, tc, rng, log_fn=log_fn)
        self.history_ = state.log
        self.n_features_in_ = self.config_.frame_dim
        return self

    def predict(self, X, n_iter=None):
        check_is_fitted(self, "params_")
        X = check_frames(X, self.config_.frame_dim)
        beam = BeamConfig(self.beam_width, self.length_penalty)
        outputs, _ = translate_many(self._samples(X), self.params_, self.config_, beam, n_iter)
        return outputs

    def score(self, X, y):
        """Corpus BLEU-4 of ``predict(X)`` against ``y``."""
        hyps = self.predict(X)
        return bleu(hyps, check_targets(y, len(hyps)))[3]
