"""Autoregressive decoding over the final prototype: greedy and GNMT-style beam search."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import UsageError
from .model import Prototype, decode_teacher_forced, forward_infer, inference_decoder
from .vocab import BOS, EOS, PAD


@dataclass(frozen=True)
class BeamConfig:
    width: int = 3
    length_penalty: float = 1.0
    max_len: int = None

    def __post_init__(self):
        if self.width < 1:
            raise UsageError(f"beam width must be >= 1, got {self.width}")
        if self.max_len is not None and self.max_len < 1:
            raise UsageError("max_len must be >= 1")


@dataclass
class Hypothesis:
    tokens: list = field(default_factory=lambda: [BOS])
    logprob: float = 0.0
    finished: bool = False

    @property
    def n_generated(self):
        return len(self.tokens) - 1

    def output(self):
        return [t for t in self.tokens[1:] if t != EOS]


def length_penalty(length, alpha):
    """GNMT normaliser ((5 + |Y|) / 6) ** alpha."""
    return ((5.0 + length) / 6.0) ** alpha


def normalized_score(hyp, alpha):
    return hyp.logprob / length_penalty(hyp.n_generated, alpha)


def default_max_len(E):
    return 2 * int(E.mask[0].sum()) + 5


def _select(E, index):
    return Prototype(ad.Tensor(E.states.data[index]), E.mask[index], E.iteration)


def step_log_probs(E, prefixes, params, config, which, features=None):
    """Next-token log-probabilities (float32) for each prefix; BOS and PAD are excluded."""
    prefixes = np.asarray(prefixes, dtype=np.int64)
    index = np.zeros(len(prefixes), dtype=np.int64)
    F = None
    if features is not None:
        F = type(features)(ad.Tensor(features.features.data[index]), features.mask[index])
    with ad.no_grad():
        logits = decode_teacher_forced(_select(E, index), prefixes, params, config, which,
                                       features=F)
    last = logits.data[:, -1, :]
    shifted = last - last.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp[:, BOS] = -np.inf
    logp[:, PAD] = -np.inf
    return logp


def _count(counter):
    if counter is not None:
        counter["decoder_calls"] += 1


def greedy_decode(E, params, config, max_len=None, which=None, counter=None, features=None):
    """Argmax decoding from BOS until EOS or ``max_len``; ties go to the lowest id."""
    _count(counter)
    which = which or inference_decoder(config)
    max_len = max_len or default_max_len(E)
    tokens = [BOS]
    for _ in range(max_len):
        logp = step_log_probs(E, [tokens], params, config, which, features)[0]
        nxt = int(np.argmax(logp))
        tokens.append(nxt)
        if nxt == EOS:
            break
    return [t for t in tokens[1:] if t != EOS]


def beam_search(E, params, config, beam=BeamConfig(), which=None, counter=None, features=None):
    """Beam search returning the winning :class:`Hypothesis`.

    At each step every live hypothesis is expanded with every token and the
    ``width`` best candidates by cumulative log-probability are kept; those
    ending in EOS are retired as finished. The result is the finished
    hypothesis with the best length-normalised score, or the best live one
    if nothing finished within ``max_len``.
    """
    _count(counter)
    which = which or inference_decoder(config)
    max_len = beam.max_len or default_max_len(E)
    alpha = beam.length_penalty
    live = [Hypothesis()]
    finished = []
    for _ in range(max_len):
        logp = step_log_probs(E, [h.tokens for h in live], params, config, which, features)
        scores = np.array([h.logprob for h in live], dtype=np.float64)[:, None] \
            + logp.astype(np.float64)
        parent, token = np.nonzero(np.isfinite(scores))
        cand = scores[parent, token]
        # best score first; ties by parent rank then token id
        order = np.lexsort((token, parent, -cand))[:beam.width]
        next_live = []
        for i in order:
            h = live[parent[i]]
            new = Hypothesis(h.tokens + [int(token[i])], float(cand[i]), int(token[i]) == EOS)
            (finished if new.finished else next_live).append(new)
        live = next_live
        if not live:
            break
    pool = finished or live
    return min(pool, key=lambda h: (-normalized_score(h, alpha), h.tokens))


def beam_decode(E, params, config, beam=BeamConfig(), which=None, counter=None, features=None,
                return_score=False):
    """Token ids of the best beam hypothesis, without BOS/EOS."""
    best = beam_search(E, params, config, beam, which, counter, features)
    if return_score:
        return best.output(), normalized_score(best, beam.length_penalty)
    return best.output()


def translate(frames, params, config, beam=BeamConfig(), n_iter=None, counter=None):
    """Embed, initialise, refine K times, then decode once with D2."""
    if n_iter is not None and n_iter > config.n_iter:
        raise UsageError(f"cannot run {n_iter} refinement iterations on a model trained with K={config.n_iter}")
    E, F = forward_infer(frames, params, config, n_iter=n_iter, return_features=True)
    return beam_decode(E, params, config, beam, counter=counter, features=F)


def translate_many(samples, params, config, beam=BeamConfig(), n_iter=None):
    """Translate a list of samples; returns (translations, decoder calls per sample)."""
    outputs, calls = [], []
    for s in samples:
        counter = Counter()
        outputs.append(translate(s.frames, params, config, beam, n_iter, counter))
        calls.append(counter["decoder_calls"])
    return outputs, calls
