"""Small multi-seed sweeps comparing refinement depth K and distillation weight."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import SyntheticTaskSpec, generate_dataset
from .decoding import BeamConfig
from .model import ModelConfig, init_params
from .training import TrainConfig, evaluate_translations, train_epochs


@dataclass
class Trial:
    label: str
    seed: int
    dev_bleu4: float
    dev_token_acc: float
    best_epoch: int


@dataclass
class SweepResult:
    trials: list = field(default_factory=list)

    def by_label(self):
        out = {}
        for t in self.trials:
            out.setdefault(t.label, []).append(t)
        return out

    def mean_bleu4(self):
        return {k: float(np.mean([t.dev_bleu4 for t in v])) for k, v in self.by_label().items()}

    def per_seed(self, label):
        return {t.seed: t.dev_bleu4 for t in self.trials if t.label == label}

    def records(self):
        return [vars(t) for t in self.trials]


def noisy_majority_task(**overrides):
    """Default task for trend runs: windowed majority with sigma = 0.5 frame noise.

    Sequences hold 2 to 6 windows, so most targets are long enough to contain 4-grams.
    """
    values = dict(task="windowed-majority", noise=0.5, min_len=6, max_len=18, n_train=1000,
                  n_dev=150, n_test=150)
    values.update(overrides)
    return SyntheticTaskSpec(**values)


def run_trial(splits, model_config, train_config, seed, label="", beam=BeamConfig()):
    """Train from scratch with ``seed``; score the best-dev parameters by dev BLEU-4."""
    params = init_params(model_config, np.random.default_rng(seed))
    best = {}

    def keep(state, record, improved):
        if improved or "params" not in best:
            best["params"] = params.copy()

    state = train_epochs(splits["train"], splits["dev"], params, model_config, train_config,
                         rng=seed, on_epoch_end=keep)
    score, acc, _, _ = evaluate_translations(splits["dev"], best["params"], model_config, beam)
    return Trial(label, seed, score.bleu[3], acc, state.best_epoch)


def sweep(variants, task=None, model=None, train=None, seeds=(0, 1, 2), log_fn=None):
    """Run every ``{label: (model_overrides, train_overrides)}`` variant for every seed.

    All variants share one dataset, generated from ``task``.
    """
    task = task or noisy_majority_task()
    splits = generate_dataset(task)
    base_model = replace(model or ModelConfig(), vocab_size=task.vocab_size,
                         frame_dim=task.frame_dim)
    base_train = train or TrainConfig()
    result = SweepResult()
    for label, (m_over, t_over) in variants.items():
        mc = replace(base_model, **m_over)
        tc = replace(base_train, **t_over)
        for seed in seeds:
            trial = run_trial(splits, mc, tc, seed, label)
            result.trials.append(trial)
            if log_fn is not None:
                log_fn(trial)
    return result


def depth_variants(depths=(0, 1, 2, 3)):
    return {f"K={k}": ({"n_iter": k}, {}) for k in depths}


def distillation_variants(lams=(0.0, 15.0), depth=3):
    return {f"lam={lam:g}": ({"n_iter": depth}, {"lam": lam}) for lam in lams}
