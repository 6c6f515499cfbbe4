"""Synthetic frame-sequence -> token-sequence tasks, dataset files and batching.

Each symbol of a hidden sequence emits ``frames_per_symbol`` frame vectors
(a fixed per-symbol embedding plus Gaussian noise). The target depends on
the task:

``copy``               the symbol ids
``reverse``            the symbol ids, reversed
``windowed-majority``  the majority symbol of each consecutive window

File format: a header line ``#ipslt-dataset<TAB>1<TAB><count>`` followed by
one record per line::

    id <TAB> T_x <TAB> frame_dim <TAB> base64(little-endian float32 frames) <TAB> target ids
"""
from __future__ import annotations

import base64
import binascii
import os
from collections import Counter
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import FormatError, UsageError
from .vocab import BOS, EOS, PAD

TASKS = ("copy", "reverse", "windowed-majority")
SPLITS = ("train", "dev", "test")
HEADER = "#ipslt-dataset"
N_RESERVED = 3


@dataclass
class SyntheticTaskSpec:
    task: str = "copy"
    n_symbols: int = 17
    min_len: int = 2
    max_len: int = 8
    frames_per_symbol: int = 2
    noise: float = 0.0
    frame_dim: int = 16
    majority_window: int = 3
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.task not in TASKS:
            raise UsageError(f"unknown task {self.task!r}; choose from {', '.join(TASKS)}")
        if self.n_symbols < 2:
            raise UsageError("n_symbols must be at least 2")
        if not 1 <= self.min_len <= self.max_len:
            raise UsageError("need 1 <= min_len <= max_len")
        if self.frames_per_symbol < 1 or self.noise < 0:
            raise UsageError("frames_per_symbol must be >= 1 and noise >= 0")
        if self.task == "windowed-majority" and self.max_len < self.majority_window:
            raise UsageError("max_len must cover at least one majority window")

    @property
    def vocab_size(self):
        return self.n_symbols + N_RESERVED

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise UsageError(f"unknown task spec key(s): {sorted(unknown)}")
        return cls(**values)


@dataclass
class Sample:
    id: str
    frames: np.ndarray
    target: list

    def __eq__(self, other):
        return (isinstance(other, Sample) and self.id == other.id
                and list(self.target) == list(other.target)
                and self.frames.shape == other.frames.shape
                and self.frames.dtype == other.frames.dtype
                and self.frames.tobytes() == other.frames.tobytes())

    @property
    def n_frames(self):
        return self.frames.shape[0]


def windowed_majority(symbols, window):
    """Most frequent symbol of each consecutive window; ties go to the earliest one."""
    out = []
    for start in range(0, len(symbols), window):
        chunk = list(symbols[start:start + window])
        counts = Counter(chunk)
        best = max(counts.values())
        out.append(next(s for s in chunk if counts[s] == best))
    return out


def task_target(symbols, spec):
    if spec.task == "copy":
        return list(symbols)
    if spec.task == "reverse":
        return list(reversed(symbols))
    return windowed_majority(symbols, spec.majority_window)


def symbol_embeddings(spec):
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    return rng.standard_normal((spec.n_symbols, spec.frame_dim))


def render_frames(symbols, spec, embeddings, rng):
    """Frames for a sequence of token ids (ids start at 3)."""
    rows = np.repeat(embeddings[np.asarray(symbols) - N_RESERVED], spec.frames_per_symbol, axis=0)
    if spec.noise > 0:
        rows = rows + spec.noise * rng.standard_normal(rows.shape)
    return rows.astype(np.float32)


def _draw_symbols(spec, rng):
    if spec.task != "windowed-majority":
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        return [int(s) + N_RESERVED for s in rng.integers(0, spec.n_symbols, n)]
    w = spec.majority_window
    n_windows = int(rng.integers(max(1, spec.min_len // w), spec.max_len // w + 1))
    out = []
    for _ in range(n_windows):
        major = int(rng.integers(0, spec.n_symbols))
        chunk = [major] * w
        # every window keeps a strict majority; the rest are other symbols
        n_other = (w - 1) // 2
        for pos in rng.choice(w, size=n_other, replace=False):
            other = int(rng.integers(0, spec.n_symbols - 1))
            chunk[pos] = other + (other >= major)
        out.extend(s + N_RESERVED for s in chunk)
    return out


def generate_dataset(spec):
    """Deterministically generate ``{"train", "dev", "test"}`` sample lists from ``spec``."""
    spec.validate()
    embeddings = symbol_embeddings(spec)
    sizes = {"train": spec.n_train, "dev": spec.n_dev, "test": spec.n_test}
    splits = {}
    for index, split in enumerate(SPLITS, start=1):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
        samples = []
        for i in range(sizes[split]):
            symbols = _draw_symbols(spec, rng)
            frames = render_frames(symbols, spec, embeddings, rng)
            samples.append(Sample(f"{split}-{spec.seed}-{i:06d}", frames, task_target(symbols, spec)))
        splits[split] = samples
    return splits


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def format_record(sample):
    frames = np.ascontiguousarray(sample.frames, dtype="<f4")
    if frames.ndim != 2:
        raise UsageError(f"sample {sample.id}: frames must be 2-D")
    payload = base64.b64encode(frames.tobytes()).decode("ascii")
    target = " ".join(str(int(t)) for t in sample.target)
    return f"{sample.id}\t{frames.shape[0]}\t{frames.shape[1]}\t{payload}\t{target}\n"


def parse_record(line, lineno):
    if not line.endswith("\n"):
        raise FormatError("truncated record (missing newline)", lineno)
    parts = line[:-1].split("\t")
    if len(parts) != 5:
        raise FormatError(f"expected 5 tab-separated fields, got {len(parts)}", lineno)
    sample_id, t_x, dim, payload, target = parts
    try:
        t_x, dim = int(t_x), int(dim)
        raw = base64.b64decode(payload, validate=True)
        tokens = [int(t) for t in target.split()]
    except (ValueError, binascii.Error) as exc:
        raise FormatError(f"malformed field: {exc}", lineno) from None
    if len(raw) != 4 * t_x * dim:
        raise FormatError(f"frame payload has {len(raw)} bytes, expected {4 * t_x * dim}", lineno)
    frames = np.frombuffer(raw, dtype="<f4").reshape(t_x, dim).astype(np.float32)
    return Sample(sample_id, frames, tokens)


def save_dataset(samples, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{HEADER}\t1\t{len(samples)}\n")
        for sample in samples:
            fh.write(format_record(sample))


def load_dataset(path):
    """Read a dataset file. Any malformed or missing record raises :class:`FormatError`."""
    with open(path, encoding="utf-8", newline="") as fh:
        lines = fh.readlines()
    if not lines:
        raise FormatError("empty file (missing header)", 1)
    header = lines[0].rstrip("\n").split("\t")
    if len(header) != 3 or header[0] != HEADER or header[1] != "1" or not lines[0].endswith("\n"):
        raise FormatError("bad dataset header", 1)
    try:
        expected = int(header[2])
    except ValueError:
        raise FormatError("bad record count in header", 1) from None
    samples = [parse_record(line, i) for i, line in enumerate(lines[1:], start=2)]
    if len(samples) != expected:
        raise FormatError(f"header announces {expected} records, found {len(samples)}", len(lines))
    return samples


def split_path(directory, split):
    return os.path.join(directory, f"{split}.tsv")


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    ids: list
    frames: np.ndarray        # (B, T_x, D), zero rows past each sample's end
    lengths: np.ndarray       # (B,)
    frame_mask: np.ndarray    # (B, T_x)
    feature_mask: np.ndarray  # (B, T_f) or None when no stride was given
    tgt_in: np.ndarray        # (B, T_y) BOS + target, PAD filled
    tgt_out: np.ndarray       # (B, T_y) target + EOS, PAD filled

    def __len__(self):
        return len(self.ids)


def collate(samples, pad_id=PAD, stride=None):
    B = len(samples)
    lengths = np.array([s.n_frames for s in samples], dtype=np.int64)
    dim = samples[0].frames.shape[1]
    T_x = int(lengths.max())
    frames = np.zeros((B, T_x, dim), dtype=np.float32)
    for i, s in enumerate(samples):
        frames[i, :s.n_frames] = s.frames
    frame_mask = np.arange(T_x)[None, :] < lengths[:, None]
    feature_mask = None
    if stride is not None:
        T_f = -(-T_x // stride)
        feature_mask = np.arange(T_f)[None, :] < -(-lengths[:, None] // stride)
    T_y = max(len(s.target) for s in samples) + 1
    tgt_in = np.full((B, T_y), pad_id, dtype=np.int64)
    tgt_out = np.full((B, T_y), pad_id, dtype=np.int64)
    for i, s in enumerate(samples):
        n = len(s.target)
        tgt_in[i, 0] = BOS
        tgt_in[i, 1:n + 1] = s.target
        tgt_out[i, :n] = s.target
        tgt_out[i, n] = EOS
    return Batch([s.id for s in samples], frames, lengths, frame_mask, feature_mask, tgt_in, tgt_out)


def batch(samples, batch_size, pad_id=PAD, stride=None, order=None):
    """Split ``samples`` (optionally re-ordered by index array ``order``) into padded batches."""
    if batch_size < 1:
        raise UsageError("batch_size must be >= 1")
    if order is not None:
        samples = [samples[i] for i in order]
    return [collate(samples[i:i + batch_size], pad_id, stride)
            for i in range(0, len(samples), batch_size)]
