"""Iterative prototype refinement for frame-sequence to text translation, on numpy."""
from .autodiff import Tensor, no_grad
from .decoding import BeamConfig, beam_decode, greedy_decode, translate
from .errors import FormatError, IPSLTError, NumericError, ShapeError, UsageError
from .estimator import IPSLTTranslator
from .losses import LossBreakdown, compute_loss
from .metrics import CorpusScore, bleu, corpus_score, rouge_l
from .model import ModelConfig, ModelParams, forward_infer, forward_train, init_params
from .training import TrainConfig, train_epochs

__version__ = "0.1.0"

__all__ = [
    "BeamConfig", "CorpusScore", "FormatError", "IPSLTError", "IPSLTTranslator", "LossBreakdown",
    "ModelConfig", "ModelParams", "NumericError", "ShapeError", "Tensor", "TrainConfig",
    "UsageError", "beam_decode", "bleu", "compute_loss", "corpus_score", "forward_infer",
    "forward_train", "greedy_decode", "init_params", "no_grad", "rouge_l", "train_epochs",
    "translate",
]
