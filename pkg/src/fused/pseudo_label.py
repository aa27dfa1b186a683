"""Consensus filtering and two-stage pseudo-label refinement."""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import torch

from .branch import Branch, encode, linear_view, predicted_label
from .prototypes import PrototypeBank, cosine_similarities, prototype_view


class Stage(IntEnum):
    AGREEMENT = 0
    ARBITRATION = 1


VARIANTS = ("fused", "fm_proto", "fm_linear", "sm_proto", "sm_linear")


@dataclass
class RefinementBundle:
    labels_fm_linear: torch.Tensor
    labels_fm_proto: torch.Tensor
    labels_sm_linear: torch.Tensor
    labels_sm_proto: torch.Tensor
    sims_fm: torch.Tensor
    sims_sm: torch.Tensor
    mask: torch.Tensor
    refined: torch.Tensor
    stage_used: torch.Tensor

    @property
    def mask_rate(self) -> float:
        return float(self.mask.float().mean()) if len(self.mask) else 0.0

    @property
    def agreement_rate(self) -> float:
        if not len(self.stage_used):
            return 0.0
        return float((self.stage_used == Stage.AGREEMENT).float().mean())


def consensus_mask(fm_linear_labels: torch.Tensor, fm_proto_labels: torch.Tensor) -> torch.Tensor:
    if fm_linear_labels.shape != fm_proto_labels.shape:
        raise ValueError("label vectors differ in length")
    return fm_linear_labels == fm_proto_labels


def refine_labels(fm_linear: torch.Tensor, sm_linear: torch.Tensor, sims_fm: torch.Tensor,
                  sims_sm: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Keep the linear label where both branches agree; otherwise take the class
    with the highest prototype similarity in either branch (lowest index on ties)."""
    n = fm_linear.shape[0]
    if sm_linear.shape[0] != n or sims_fm.shape != sims_sm.shape or sims_fm.shape[0] != n:
        raise ValueError(
            f"dimension mismatch: labels {n}/{sm_linear.shape[0]}, "
            f"sims {tuple(sims_fm.shape)}/{tuple(sims_sm.shape)}"
        )
    agree = fm_linear == sm_linear
    arbitrated = torch.argmax(torch.maximum(sims_fm.detach(), sims_sm.detach()), dim=1)
    refined = torch.where(agree, fm_linear, arbitrated)
    stage = torch.where(agree, Stage.AGREEMENT, Stage.ARBITRATION).to(torch.int8)
    return refined, stage


def bundle_from_views(p_fm_linear, p_fm_proto, p_sm_linear, p_sm_proto, sims_fm, sims_sm,
                      variant: str = "fused") -> RefinementBundle:
    """Assemble a bundle from already-computed views.

    ``variant`` selects where the supervised label comes from: ``fused`` is the
    two-stage rule, the others take a single view's argmax verbatim.
    """
    lab = {
        "fm_linear": predicted_label(p_fm_linear),
        "fm_proto": predicted_label(p_fm_proto),
        "sm_linear": predicted_label(p_sm_linear),
        "sm_proto": predicted_label(p_sm_proto),
    }
    refined, stage = refine_labels(lab["fm_linear"], lab["sm_linear"], sims_fm, sims_sm)
    if variant != "fused":
        if variant not in VARIANTS:
            raise ValueError(f"unknown pseudo-label variant {variant!r}")
        refined = lab[variant]
    return RefinementBundle(
        labels_fm_linear=lab["fm_linear"],
        labels_fm_proto=lab["fm_proto"],
        labels_sm_linear=lab["sm_linear"],
        labels_sm_proto=lab["sm_proto"],
        sims_fm=sims_fm.detach(),
        sims_sm=sims_sm.detach(),
        mask=consensus_mask(lab["fm_linear"], lab["fm_proto"]),
        refined=refined,
        stage_used=stage,
    )


@torch.no_grad()
def build_bundle(fm: Branch, sm: Branch, bank_fm: PrototypeBank, bank_sm: PrototypeBank,
                 batch: torch.Tensor, variant: str = "fused") -> RefinementBundle:
    z_fm, z_sm = encode(fm, batch), encode(sm, batch)
    return bundle_from_views(
        linear_view(fm, z_fm), prototype_view(bank_fm, z_fm),
        linear_view(sm, z_sm), prototype_view(bank_sm, z_sm),
        cosine_similarities(bank_fm, z_fm), cosine_similarities(bank_sm, z_sm),
        variant,
    )
