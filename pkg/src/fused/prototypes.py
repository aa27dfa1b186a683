"""Per-branch class prototypes and the prototype (cosine) view."""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import torch
import torch.nn.functional as F

from .branch import Branch, ProbBatch, Role, View

NORM_ATOL = 1e-6


@dataclass
class PrototypeBank:
    centroids: torch.Tensor
    momentum: float = 0.9
    margin_threshold: float = 0.6
    temperature: float = 10.0
    owner_role: Role = Role.SM

    def __post_init__(self) -> None:
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0.0 <= self.margin_threshold < 1.0:
            raise ValueError(f"margin_threshold must be in [0, 1), got {self.margin_threshold}")
        if self.temperature < 0:
            raise ValueError(f"temperature must be nonnegative, got {self.temperature}")
        if self.centroids.dim() != 2:
            raise ValueError("centroids must be K x D")
        norms = self.centroids.norm(dim=1)
        if ((norms - 1).abs() > NORM_ATOL).any():
            raise ValueError("centroid rows must have unit L2 norm")

    @property
    def num_classes(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def init_from_classifier(branch: Branch, momentum: float = 0.9, margin_threshold: float = 0.6,
                         temperature: float = 10.0) -> PrototypeBank:
    w = branch.classifier.weight.detach().clone()
    norms = w.norm(dim=1, keepdim=True)
    zero = (norms.squeeze(1) == 0).nonzero()
    if len(zero):
        raise ValueError(f"classifier weight row {int(zero[0])} has zero norm")
    return PrototypeBank(w / norms, momentum, margin_threshold, temperature, branch.role)


def margin(p: ProbBatch | torch.Tensor) -> torch.Tensor:
    """Top-1 minus top-2 probability per row."""
    values = p.values if isinstance(p, ProbBatch) else p
    top = torch.topk(values.detach(), 2, dim=1).values
    return top[:, 0] - top[:, 1]


def ema_update(bank: PrototypeBank, features: torch.Tensor, labels: torch.Tensor,
               margins: torch.Tensor) -> PrototypeBank:
    """Move each class centroid toward the mean normalized feature of its
    confident samples, then renormalize. Returns a new bank; classes without
    a qualifying sample keep their row untouched."""
    z = F.normalize(features.detach().to(bank.centroids.dtype), dim=1)
    keep = margins.detach() > bank.margin_threshold
    centroids = bank.centroids.clone()
    for k in torch.unique(labels[keep]).tolist():
        sel = keep & (labels == k)
        row = bank.momentum * centroids[k] + (1 - bank.momentum) * z[sel].mean(dim=0)
        centroids[k] = row / row.norm()
    return replace(bank, centroids=centroids)


def _check_rows(features: torch.Tensor, bank: PrototypeBank) -> None:
    if features.dim() != 2 or features.shape[1] != bank.dim:
        raise ValueError(f"bank expects D={bank.dim}, got {tuple(features.shape)}")
    zero = (features.detach().norm(dim=1) == 0).nonzero()
    if len(zero):
        raise ValueError(f"feature row {int(zero[0])} has zero norm")


def cosine_similarities(bank: PrototypeBank, features: torch.Tensor) -> torch.Tensor:
    """N x K cosine similarity of each feature row to each centroid."""
    _check_rows(features, bank)
    z = F.normalize(features, dim=1)
    return z @ bank.centroids.to(z.dtype).T


def prototype_view(bank: PrototypeBank, features: torch.Tensor) -> ProbBatch:
    sims = cosine_similarities(bank, features)
    return ProbBatch(F.softmax(bank.temperature * sims, dim=1), View.PROTOTYPE, bank.owner_role)


def export_centroids_csv(bank: PrototypeBank, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class"] + [f"d{j}" for j in range(bank.dim)])
        for k, row in enumerate(bank.centroids.tolist()):
            w.writerow([k] + [repr(v) for v in row])
