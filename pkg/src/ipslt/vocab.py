"""Token vocabulary with fixed reserved ids."""
from __future__ import annotations

PAD, BOS, EOS = 0, 1, 2
RESERVED = ("<pad>", "<bos>", "<eos>")
N_SPECIAL = len(RESERVED)


class Vocabulary:
    """Bijective token <-> id map. Ids 0, 1, 2 are always PAD, BOS, EOS."""

    def __init__(self, tokens=()):
        self.itos = list(RESERVED)
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        for tok in tokens:
            self.add(tok)

    @classmethod
    def symbols(cls, n_symbols):
        """Vocabulary of synthetic symbols ``s0 .. s{n-1}`` mapped to ids 3 ..."""
        return cls(f"s{i}" for i in range(n_symbols))

    def add(self, token):
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def encode(self, tokens):
        return [self.stoi[t] for t in tokens]

    def decode(self, ids):
        return [self.itos[i] for i in ids]


def strip_special(ids):
    """Drop BOS/PAD and cut at the first EOS."""
    out = []
    for i in ids:
        if i == EOS:
            break
        if i not in (PAD, BOS):
            out.append(int(i))
    return out
