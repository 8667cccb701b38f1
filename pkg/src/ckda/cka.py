"""Prototype-anchored cross-modal knowledge alignment.

Batch features are described by their temperature-scaled cosine affinity to
last stage's per-identity prototypes, once per (feature modality, prototype
modality) pair. Affinity rows are compared through a batch-by-batch
relational softmax, and the frozen model's relations are distilled into the
current model's with a row-averaged KL divergence.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import NumericError
from .synth_data import Modality

TAU = 0.1


@dataclass(frozen=True)
class PrototypeBank:
    stage: int
    visible: torch.Tensor
    infrared: torch.Tensor
    identity_ids: tuple[int, ...]

    def __post_init__(self):
        if self.visible.shape != self.infrared.shape:
            raise ValueError("visible and infrared prototype matrices differ in shape")
        if self.visible.shape[0] != len(self.identity_ids):
            raise ValueError("one prototype row per identity expected")

    def for_modality(self, modality: Modality) -> torch.Tensor:
        return self.visible if modality == Modality.VISIBLE else self.infrared

    def __len__(self):
        return len(self.identity_ids)


def prototypes_from_features(features: torch.Tensor, identities: Sequence[int],
                             modalities: Sequence[int], stage: int) -> PrototypeBank:
    """Per-identity, per-modality mean of ``features``; rows ordered by identity id."""
    identities = np.asarray(identities)
    modalities = np.asarray(modalities)
    ids = sorted(set(identities.tolist()))
    rows = {m: [] for m in Modality}
    for pid in ids:
        for m in Modality:
            sel = np.flatnonzero((identities == pid) & (modalities == int(m)))
            if len(sel) == 0:
                raise ValueError(f"identity {pid} has no {m.name.lower()} samples")
            rows[m].append(features[torch.as_tensor(sel)].mean(dim=0))
    return PrototypeBank(stage=stage, visible=torch.stack(rows[Modality.VISIBLE]),
                         infrared=torch.stack(rows[Modality.INFRARED]), identity_ids=tuple(ids))


def _unit_rows(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = x.norm(dim=1, keepdim=True)
    bad = (norms.squeeze(1) == 0).nonzero()
    if len(bad):
        row = int(bad[0, 0])
        raise NumericError(f"{what} row {row} has zero norm", row=row)
    return x / norms


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return _unit_rows(a, "feature") @ _unit_rows(b, "prototype").T


def affinity(features: torch.Tensor, prototypes: torch.Tensor, tau: float = TAU) -> torch.Tensor:
    """Row-wise softmax of cosine similarity / tau, shape (B, N)."""
    if prototypes.shape[0] < 1:
        raise ValueError("need at least one prototype")
    return torch.softmax(cosine_matrix(features, prototypes) / tau, dim=1)


def relational(aff: torch.Tensor, tau: float = TAU) -> torch.Tensor:
    """Row-wise softmax of the affinity Gram matrix / tau, shape (B, B)."""
    return torch.softmax(aff @ aff.T / tau, dim=1)


def row_kl(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """KL(p || q) per row, averaged over rows. Rows must be strictly positive."""
    return (p * (p.log() - q.log())).sum(dim=1).mean()


def inter_loss(yo_vt, yz_vt, yo_tv, yz_tv) -> torch.Tensor:
    return row_kl(yo_vt, yz_vt) + row_kl(yo_tv, yz_tv)


def intra_loss(yo_vv, yz_vv, yo_tt, yz_tt) -> torch.Tensor:
    return row_kl(yo_vv, yz_vv) + row_kl(yo_tt, yz_tt)


# (feature modality, prototype modality) per direction tag
DIRECTIONS = {
    "vt": (Modality.VISIBLE, Modality.INFRARED),
    "tv": (Modality.INFRARED, Modality.VISIBLE),
    "vv": (Modality.VISIBLE, Modality.VISIBLE),
    "tt": (Modality.INFRARED, Modality.INFRARED),
}


def relation_set(features: torch.Tensor, modality: torch.Tensor, bank: PrototypeBank,
                 tau: float = TAU) -> dict[str, torch.Tensor]:
    out = {}
    for tag, (feat_mod, proto_mod) in DIRECTIONS.items():
        feats = features[modality == int(feat_mod)]
        out[tag] = relational(affinity(feats, bank.for_modality(proto_mod), tau), tau)
    return out


def cka_losses(old_features: torch.Tensor, new_features: torch.Tensor, modality: torch.Tensor,
               bank: PrototypeBank, tau: float = TAU) -> tuple[torch.Tensor, torch.Tensor]:
    """(L_inter, L_intra). The old-model side is a detached target."""
    yo = relation_set(old_features.detach(), modality, bank, tau)
    yz = relation_set(new_features, modality, bank, tau)
    return (inter_loss(yo["vt"], yz["vt"], yo["tv"], yz["tv"]),
            intra_loss(yo["vv"], yz["vv"], yo["tt"], yz["tt"]))

