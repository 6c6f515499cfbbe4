"""Training objective: cross-entropy on the first and last outputs plus iterative distillation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import UsageError
from .vocab import PAD


@dataclass
class LossBreakdown:
    ce0: float
    ceK: float
    idl: float
    total: float
    lam: float
    tensor: ad.Tensor = field(default=None, repr=False, compare=False)

    def as_dict(self):
        return {"ce0": self.ce0, "ceK": self.ceK, "idl": self.idl, "total": self.total}


IDL_REDUCTIONS = ("token", "element")


def distillation_loss(logits_list, targets, pad_id=PAD, reduction="token"):
    """Sum over intermediate outputs U^1..U^{K-1} of KL(softmax(U^K) || softmax(U^k)).

    The final output acts as a fixed teacher: gradients only reach the
    intermediate outputs. Each KL is averaged over non-pad positions
    (``"token"``), or additionally over the vocabulary (``"element"``, i.e.
    divided by |V|, the scale of an elementwise-mean KL loss).
    """
    if reduction not in IDL_REDUCTIONS:
        raise UsageError(f"unknown IDL reduction {reduction!r}; choose from {', '.join(IDL_REDUCTIONS)}")
    targets = np.asarray(targets)
    mask = targets != pad_id
    teacher = logits_list[-1].data
    terms = [ad.kl_divergence_from_logits(u, teacher, mask) for u in logits_list[1:-1]]
    if not terms:
        return ad.Tensor(np.zeros((), dtype=logits_list[0].dtype))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    if reduction == "element":
        total = total * (1.0 / logits_list[-1].shape[-1])
    return total


def compute_loss(logits_list, targets, lam=15.0, pad_id=PAD, n_iter=None, idl_reduction="token"):
    """total = CE(U^0) + CE(U^K) + lam * IDL, for ``logits_list = [U^0, ..., U^K]``.

    Intermediate outputs get no cross-entropy term. With K = 0 the single
    output is both U^0 and U^K. ``idl_reduction`` is passed to
    :func:`distillation_loss`; the reported ``idl`` is the reduced value.
    """
    if not logits_list:
        raise UsageError("compute_loss needs at least one logits sequence")
    if n_iter is not None and len(logits_list) != n_iter + 1:
        raise UsageError(f"expected {n_iter + 1} logits sequences for K={n_iter}, got {len(logits_list)}")
    ce0 = ad.cross_entropy_from_logits(logits_list[0], targets, pad_id)
    ceK = ad.cross_entropy_from_logits(logits_list[-1], targets, pad_id)
    idl = distillation_loss(logits_list, targets, pad_id, idl_reduction)
    total = ce0 + ceK
    if len(logits_list) > 2:
        total = total + idl * lam
    return LossBreakdown(ce0.item(), ceK.item(), idl.item(), total.item(), lam, total)
