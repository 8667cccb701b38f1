"""Modality-specific prompting, prompt composition and the prompt alignment loss."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbone import depatchify
from .errors import ConfigError, StateError
from .synth_data import Modality


NORM_STATS = ("running", "batch")


class SpecificBranch(nn.Module):
    """Token-wise bottleneck: linear -> batch norm -> linear -> dropout.

    The output projection starts at zero, so an untrained branch emits an
    all-zero prompt. ``norm_stats="batch"`` normalises with the statistics
    of the tokens at hand in eval mode too, instead of running averages.
    """

    def __init__(self, token_dim: int, reduction: int = 4, dropout: float = 0.1,
                 norm_stats: str = "batch"):
        super().__init__()
        if norm_stats not in NORM_STATS:
            raise ConfigError(f"expected one of {NORM_STATS}", "msp_norm_stats")
        hidden = token_dim // reduction
        self.fc1 = nn.Linear(token_dim, hidden)
        self.bn = nn.BatchNorm1d(hidden, track_running_stats=norm_stats == "running")
        self.fc2 = nn.Linear(hidden, token_dim)
        self.drop = nn.Dropout(dropout)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        b, m, dim = tokens.shape
        if self.training and b < 2:
            raise StateError("batch norm in training mode needs at least 2 images per modality")
        h = self.bn(self.fc1(tokens.reshape(b * m, dim)))
        return self.drop(self.fc2(h)).reshape(b, m, dim)


class MSP(nn.Module):
    def __init__(self, token_dim: int, patch_size: int, grid: tuple[int, int],
                 reduction: int = 4, dropout: float = 0.1, norm_stats: str = "batch"):
        super().__init__()
        if token_dim % reduction:
            raise ConfigError(f"token dim {token_dim} not divisible by {reduction}", "reduction")
        if not 0.0 <= dropout < 1.0:
            raise ConfigError("must lie in [0, 1)", "msp_dropout")
        self.patch_size = patch_size
        self.grid = tuple(grid)
        self.branches = nn.ModuleDict({
            m.name.lower(): SpecificBranch(token_dim, reduction, dropout, norm_stats)
            for m in Modality
        })

    def branch(self, modality: Modality) -> SpecificBranch:
        return self.branches[Modality(modality).name.lower()]

    def forward_single(self, tokens: torch.Tensor, modality: Modality) -> torch.Tensor:
        """All of ``tokens`` belong to ``modality``; returns (B, H, W, C)."""
        return depatchify(self.branch(modality)(tokens), self.patch_size, self.grid)

    def forward(self, tokens: torch.Tensor, modality: torch.Tensor) -> torch.Tensor:
        """Route each image through its own modality branch."""
        out = tokens.new_zeros(tokens.shape)
        for m in Modality:
            idx = (modality == int(m)).nonzero(as_tuple=True)[0]
            if len(idx):
                out = out.index_put((idx,), self.branch(m)(tokens[idx]))
        return depatchify(out, self.patch_size, self.grid)


@dataclass
class PromptTriple:
    k_com: torch.Tensor
    k_spe: torch.Tensor
    k_p: torch.Tensor


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}", "prompt")


def compose_prompt(k_com: torch.Tensor, k_spe: torch.Tensor) -> torch.Tensor:
    _same_shape(k_com, k_spe)
    return k_spe + k_com


def merge_prompt(images: torch.Tensor, k_p: torch.Tensor) -> torch.Tensor:
    _same_shape(images, k_p)
    return images + k_p


def prompt_alignment_loss(current: torch.Tensor, previous: torch.Tensor | None) -> torch.Tensor:
    """Mean absolute difference between this stage's and last stage's prompts."""
    if previous is None:
        raise StateError("no previous-stage prompt: skip the alignment loss at stage 1")
    _same_shape(current, previous)
    # torch's abs() has subgradient 0 at 0
    return (current - previous).abs().mean()
