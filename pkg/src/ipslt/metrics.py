"""Corpus BLEU-1..4 and ROUGE-L F1 over token sequences."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .vocab import BOS, EOS, PAD


@dataclass
class CorpusScore:
    bleu: list
    rouge_l: float
    brevity_penalty: float
    n_sentences: int

    def record(self, **extra):
        out = {f"bleu{i + 1}": b for i, b in enumerate(self.bleu)}
        out.update(rouge_l=self.rouge_l, bp=self.brevity_penalty, n=self.n_sentences)
        out.update(extra)
        return out

    def to_json(self, **extra):
        return json.dumps(self.record(**extra), sort_keys=True)


def _clean(tokens):
    """Integer token ids lose PAD/BOS and everything from EOS on; other tokens pass through."""
    out = []
    for t in tokens:
        if isinstance(t, (int, np.integer)):
            if t == EOS:
                break
            if t in (PAD, BOS):
                continue
        out.append(t)
    return out


def _check_corpus(hypotheses, references):
    if len(hypotheses) != len(references):
        raise UsageError(f"{len(hypotheses)} hypotheses for {len(references)} references")
    if not hypotheses:
        raise UsageError("cannot score an empty corpus")
    return [_clean(h) for h in hypotheses], [_clean(r) for r in references]


def ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses, references, max_n=4, smooth=False, return_bp=False):
    """Corpus BLEU-1..max_n with clipped n-gram precision and brevity penalty.

    ``smooth`` adds one to numerator and denominator for n > 1 (diagnostics only).
    """
    hypotheses, references = _check_corpus(hypotheses, references)
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = ngrams(hyp, n), ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0:
        bp = 0.0
    else:
        bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    scores, log_sum = [], 0.0
    for n in range(max_n):
        num, den = matches[n], totals[n]
        if smooth and n > 0:
            num, den = num + 1, den + 1
        if num == 0 or den == 0:
            log_sum = -math.inf
        else:
            log_sum += math.log(num / den)
        scores.append(0.0 if log_sum == -math.inf else bp * math.exp(log_sum / (n + 1)))
    return (scores, bp) if return_bp else scores


def lcs_length(a, b):
    """Longest common subsequence length by dynamic programming."""
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_sentence(hyp, ref):
    lcs = lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(hyp), lcs / len(ref)
    return 2 * p * r / (p + r)


def rouge_l(hypotheses, references):
    """Mean sentence-level ROUGE-L F1."""
    hypotheses, references = _check_corpus(hypotheses, references)
    return sum(rouge_l_sentence(h, r) for h, r in zip(hypotheses, references)) / len(hypotheses)


def corpus_score(hypotheses, references, max_n=4):
    scores, bp = bleu(hypotheses, references, max_n, return_bp=True)
    return CorpusScore(scores, rouge_l(hypotheses, references), bp, len(hypotheses))


def token_accuracy(hypotheses, references):
    """Position-wise matches over the longer of each hypothesis/reference pair."""
    hypotheses, references = _check_corpus(hypotheses, references)
    hits = total = 0
    for h, r in zip(hypotheses, references):
        hits += sum(a == b for a, b in zip(h, r))
        total += max(len(h), len(r))
    return hits / total if total else 1.0
