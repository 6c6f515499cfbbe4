"""Two-phase training loop: warm start of the initialisation branch, then end-to-end."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .data import batch
from .decoding import BeamConfig, translate_many
from .errors import UsageError
from .losses import IDL_REDUCTIONS, compute_loss
from .metrics import corpus_score, token_accuracy
from .model import INIT_GROUPS, forward_train
from .optim import Adam, clip_grad_norm
from .vocab import PAD

WARM, FULL = "warm-start", "full"


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    eval_batch_size: int = 64
    epochs: int = 30
    warm_max_epochs: int = 3
    warm_patience: int = 3
    warm_min_delta: float = 1e-3
    lam: float = 15.0
    idl_reduction: str = "token"
    clip_norm: float = 1.0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise UsageError("batch_size and epochs must be >= 1")
        if self.lr < 0 or self.lam < 0:
            raise UsageError("lr and lam must be non-negative")
        if self.idl_reduction not in IDL_REDUCTIONS:
            raise UsageError(f"idl_reduction must be one of {', '.join(IDL_REDUCTIONS)}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise UsageError(f"unknown train config key(s): {sorted(unknown)}")
        return cls(**values)


@dataclass
class TrainSchedule:
    """Warm start runs until dev CE(U^0) stalls for ``patience`` epochs or hits ``max_epochs``."""

    max_epochs: int = 10
    patience: int = 3
    min_delta: float = 1e-3
    phase: str = WARM
    warm_epochs: int = 0
    best_dev_ce0: float = math.inf
    bad_epochs: int = 0

    def observe(self, dev_ce0):
        """Record one warm-start epoch; returns True when the phase switches to full."""
        if self.phase != WARM:
            return False
        self.warm_epochs += 1
        if dev_ce0 < self.best_dev_ce0 - self.min_delta:
            self.best_dev_ce0 = dev_ce0
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        if self.bad_epochs >= self.patience or self.warm_epochs >= self.max_epochs:
            self.phase = FULL
            return True
        return False

    @classmethod
    def from_config(cls, tc):
        return cls(tc.warm_max_epochs, tc.warm_patience, tc.warm_min_delta)


@dataclass
class TrainState:
    schedule: TrainSchedule
    optimizer: Adam
    rng: np.random.Generator
    epoch: int = 0
    log: list = field(default_factory=list)
    best_dev_acc: float = -1.0
    best_epoch: int = -1


def make_optimizer(params, tc, phase):
    names = params.names(INIT_GROUPS if phase == WARM else None)
    return Adam(((n, params[n]) for n in names), tc.lr, (tc.beta1, tc.beta2), tc.eps)


def new_state(params, tc, rng):
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    schedule = TrainSchedule.from_config(tc)
    return TrainState(schedule, make_optimizer(params, tc, WARM), rng)


def state_to_dict(state):
    """JSON-ready snapshot of everything but the optimizer moments and rng."""
    return {"schedule": asdict(state.schedule), "epoch": state.epoch, "log": state.log,
            "best_dev_acc": state.best_dev_acc, "best_epoch": state.best_epoch}


def restore_state(values, optimizer_state, rng_state, params, tc):
    """Rebuild a :class:`TrainState` saved by :func:`state_to_dict`."""
    schedule = TrainSchedule(**values["schedule"])
    optimizer = make_optimizer(params, tc, schedule.phase)
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)
    rng = np.random.default_rng()
    rng.bit_generator.state = rng_state
    return TrainState(schedule, optimizer, rng, values["epoch"], list(values["log"]),
                      values["best_dev_acc"], values["best_epoch"])


def _token_hits(logits, targets):
    valid = targets != PAD
    return int(((logits.data.argmax(-1) == targets) & valid).sum()), int(valid.sum())


def evaluate_teacher_forced(samples, params, config, lam=15.0, warm_only=False, batch_size=64,
                            idl_reduction="token"):
    """Token-weighted dev losses and teacher-forced accuracy of the inference-path output."""
    sums = {"ce0": 0.0, "ceK": 0.0, "idl": 0.0, "total": 0.0}
    hits = count = 0
    with ad.no_grad():
        for b in batch(samples, batch_size, stride=config.stride):
            logits = forward_train(b.frames, b.tgt_in, params, config, None, lengths=b.lengths,
                                   warm_only=warm_only, training=False)
            n = int((b.tgt_out != PAD).sum())
            if warm_only:
                sums["ce0"] += ad.cross_entropy_from_logits(logits[0], b.tgt_out, PAD).item() * n
            else:
                lb = compute_loss(logits, b.tgt_out, lam, idl_reduction=idl_reduction)
                for k, v in lb.as_dict().items():
                    sums[k] += v * n
            h, c = _token_hits(logits[-1], b.tgt_out)
            hits, count = hits + h, count + c
    out = {k: v / count for k, v in sums.items()}
    if warm_only:
        out = {"ce0": out["ce0"]}
    out["token_acc"] = hits / count
    return out


def train_epochs(train, dev, params, config, tc, rng=0, state=None, on_epoch_end=None,
                 stop_after=None, log_fn=None):
    """Run (or resume) training up to ``tc.epochs`` total epochs.

    ``on_epoch_end(state, record, improved)`` is called after every epoch,
    ``stop_after`` simulates an interruption after that many epochs.
    Returns the final :class:`TrainState`; ``state.log`` holds one record per epoch.
    """
    if not train:
        raise UsageError("training set is empty")
    if state is None:
        state = new_state(params, tc, rng)
    while state.epoch < tc.epochs:
        if stop_after is not None and state.epoch >= stop_after:
            break
        warm = state.schedule.phase == WARM
        opt = state.optimizer
        order = state.rng.permutation(len(train))
        sums = {"ce0": 0.0, "ceK": 0.0, "idl": 0.0, "total": 0.0}
        n_batches = 0
        for b in batch(train, tc.batch_size, stride=config.stride, order=order):
            logits = forward_train(b.frames, b.tgt_in, params, config, state.rng,
                                   lengths=b.lengths, warm_only=warm)
            if warm:
                loss = ad.cross_entropy_from_logits(logits[0], b.tgt_out, PAD)
                sums["ce0"] += loss.item()
            else:
                lb = compute_loss(logits, b.tgt_out, tc.lam, n_iter=config.n_iter,
                                  idl_reduction=tc.idl_reduction)
                loss = lb.tensor
                for k, v in lb.as_dict().items():
                    sums[k] += v
            n_batches += 1
            params.zero_grad()
            loss.backward()
            clip_grad_norm(list(opt.params.values()), tc.clip_norm)
            opt.step(skip_missing=True)
        dev_stats = evaluate_teacher_forced(dev or train, params, config, tc.lam, warm,
                                            tc.eval_batch_size, tc.idl_reduction)
        record = {"epoch": state.epoch + 1, "phase": state.schedule.phase}
        for k in ("ce0", "ceK", "idl", "total"):
            record[k] = sums[k] / n_batches if (k == "ce0" or not warm) else None
        for k, v in dev_stats.items():
            record[f"dev_{k}"] = v
        state.epoch += 1
        improved = False
        if not warm and dev_stats["token_acc"] > state.best_dev_acc:
            state.best_dev_acc, state.best_epoch, improved = dev_stats["token_acc"], state.epoch, True
        if warm and state.schedule.observe(dev_stats["ce0"]):
            state.optimizer = make_optimizer(params, tc, FULL)
        state.log.append(record)
        if log_fn is not None:
            log_fn(record)
        if on_epoch_end is not None:
            on_epoch_end(state, record, improved)
    return state


def evaluate_translations(samples, params, config, beam=BeamConfig(), n_iter=None):
    """Decode ``samples`` and score them: corpus BLEU/ROUGE-L plus token accuracy."""
    hyps, calls = translate_many(samples, params, config, beam, n_iter)
    refs = [list(s.target) for s in samples]
    score = corpus_score(hyps, refs)
    return score, token_accuracy(hyps, refs), hyps, calls
