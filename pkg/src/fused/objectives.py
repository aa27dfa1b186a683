"""Source, calibration and distillation losses.

All logs are floored as ``log(x + 1e-8)``. Dataset-level sums are estimated
on whatever batch is passed in.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import torch

from .branch import ProbBatch

EPS = 1e-8

log = logging.getLogger(__name__)


def _probs(p: ProbBatch | torch.Tensor) -> torch.Tensor:
    return p.values if isinstance(p, ProbBatch) else p


def _flog(x: torch.Tensor) -> torch.Tensor:
    return torch.log(x + EPS)


@dataclass
class JointDistribution:
    P: torch.Tensor
    marginal_fm: torch.Tensor
    marginal_sm: torch.Tensor


@dataclass(frozen=True)
class LossWeights:
    kd: float = 1.0
    div: float = 1.0

    def __post_init__(self) -> None:
        for name in ("kd", "div"):
            v = getattr(self, name)
            if not (v >= 0 and v != float("inf")):
                raise ValueError(f"loss weight {name} must be finite and nonnegative, got {v}")


def joint_distribution(p_fm: ProbBatch | torch.Tensor,
                       p_sm: ProbBatch | torch.Tensor) -> JointDistribution:
    """K x K average outer product of the two branches' predictions."""
    a, b = _probs(p_fm), _probs(p_sm)
    if a.shape != b.shape:
        raise ValueError(f"branch predictions differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.shape[0] == 0:
        raise ValueError("joint distribution needs at least one sample")
    P = a.T @ b / a.shape[0]
    return JointDistribution(P, P.sum(dim=1), P.sum(dim=0))


def mi_loss(J: JointDistribution) -> torch.Tensor:
    """Negative mutual information between the FM and SM predictions."""
    P = J.P
    pmi = _flog(P) - _flog(J.marginal_fm)[:, None] - _flog(J.marginal_sm)[None, :]
    return -(P * pmi).sum()


def masked_ce(p_sm: ProbBatch | torch.Tensor, labels: torch.Tensor,
              mask: torch.Tensor) -> torch.Tensor:
    p = _probs(p_sm)
    if not (p.shape[0] == labels.shape[0] == mask.shape[0]):
        raise ValueError("probabilities, labels and mask must share N")
    m = mask.to(p.dtype)
    total = m.sum()
    if total == 0:
        # an empty consensus set is legal on small batches
        log.debug("masked_ce: empty mask in batch of %d", p.shape[0])
        return (p * 0).sum()
    picked = _flog(p.gather(1, labels.long().view(-1, 1)).squeeze(1))
    return -(m * picked).sum() / total


def kd_loss(p_fm: ProbBatch | torch.Tensor, p_sm: ProbBatch | torch.Tensor,
            detach_teacher: bool = True) -> torch.Tensor:
    """Mean KL(teacher || student) over all rows."""
    t, s = _probs(p_fm), _probs(p_sm)
    if t.shape != s.shape:
        raise ValueError(f"teacher/student shapes differ: {tuple(t.shape)} vs {tuple(s.shape)}")
    if detach_teacher:
        t = t.detach()
    return (t * (_flog(t) - _flog(s))).sum(dim=1).mean()


def div_loss(p_sm: ProbBatch | torch.Tensor) -> torch.Tensor:
    """Negative entropy of the batch-mean prediction."""
    mean = _probs(p_sm).mean(dim=0)
    return (mean * _flog(mean)).sum()


def source_ce(p: ProbBatch | torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    probs = _probs(p)
    k = probs.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        bad = int(((labels < 0) | (labels >= k)).nonzero()[0])
        raise ValueError(f"label {int(labels[bad])} at row {bad} outside [0, {k})")
    return -_flog(probs.gather(1, labels.long().view(-1, 1))).mean()


def total_fm_loss(J: JointDistribution) -> torch.Tensor:
    return mi_loss(J)


def total_sm_loss(ce, kd, div, w: LossWeights = LossWeights()):
    return ce + w.kd * kd + w.div * div
