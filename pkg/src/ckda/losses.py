"""Identity classification, batch-hard triplet, and the weighted training objective."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError


@dataclass
class LossWeights:
    alpha: float = 1.0   # prompt alignment
    beta: float = 1.0    # cross-modal alignment
    mu: float = 0.5      # inter vs intra balance
    margin: float = 0.3  # triplet margin

    def validate(self) -> None:
        for name in ("alpha", "beta", "margin"):
            if getattr(self, name) < 0:
                raise ConfigError("must be non-negative", name)
        if not 0.0 <= self.mu <= 1.0:
            raise ConfigError("must lie in [0, 1]", "mu")


def ce_loss(logits: torch.Tensor, labels: torch.Tensor, label_smoothing: float = 0.0) -> torch.Tensor:
    n = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"labels outside [0, {n}) for this head")
    return F.cross_entropy(logits, labels, label_smoothing=label_smoothing)


def pairwise_distance(x: torch.Tensor) -> torch.Tensor:
    sq = (x.unsqueeze(1) - x.unsqueeze(0)).pow(2).sum(-1)
    # clamp keeps the sqrt differentiable when two features coincide
    return sq.clamp_min(1e-12).sqrt()


def triplet_loss(features: torch.Tensor, labels: torch.Tensor, margin: float = 0.3,
                 modality: torch.Tensor | None = None, mining: str = "global",
                 reduction: str = "mean") -> torch.Tensor:
    """Batch-hard triplet loss on Euclidean distances.

    ``mining="global"`` mines over the whole batch. ``"cross_modality"`` only
    considers positives and negatives of the other modality than the anchor.
    Anchors without a valid positive or negative are skipped; with
    ``reduction="none"`` the per-anchor losses are returned and skipped
    anchors hold NaN.
    """
    dist = pairwise_distance(features)
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    eye = torch.eye(len(labels), dtype=torch.bool, device=labels.device)
    pos_mask = same & ~eye
    neg_mask = ~same
    if mining == "cross_modality":
        if modality is None:
            raise ValueError("cross_modality mining needs modality labels")
        other = modality.unsqueeze(0) != modality.unsqueeze(1)
        pos_mask &= other
        neg_mask &= other
    elif mining != "global":
        raise ConfigError(f"unknown mining mode {mining!r}", "triplet_mining")

    valid = pos_mask.any(1) & neg_mask.any(1)
    if not valid.any():
        raise ValueError("no anchor has both a positive and a negative in this batch")
    d_ap = dist.masked_fill(~pos_mask, float("-inf")).max(dim=1).values
    d_an = dist.masked_fill(~neg_mask, float("inf")).min(dim=1).values
    per_anchor = F.relu(d_ap - d_an + margin)
    if reduction == "none":
        return per_anchor.masked_fill(~valid, float("nan"))
    return per_anchor[valid].mean()


def total_loss(ce: torch.Tensor, trip: torch.Tensor, weights: LossWeights,
               l_p: torch.Tensor | None = None, l_inter: torch.Tensor | None = None,
               l_intra: torch.Tensor | None = None) -> torch.Tensor:
    """L_base + alpha*L_p + beta*(mu*L_inter + (1-mu)*L_intra).

    Missing anti-forgetting terms (stage 1, or module disabled) count as zero
    and are left out of the sum entirely.
    """
    weights.validate()
    loss = ce + trip
    if l_p is not None:
        loss = loss + weights.alpha * l_p
    if l_inter is not None or l_intra is not None:
        inter = l_inter if l_inter is not None else 0.0
        intra = l_intra if l_intra is not None else 0.0
        loss = loss + weights.beta * (weights.mu * inter + (1 - weights.mu) * intra)
    return loss
