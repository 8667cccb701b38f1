"""Modality-common prompting.

Image tokens are embedded into a small latent grid, instance-normalised to
strip per-image style, and gated against the un-normalised grid with two
channel masks. The fused grid is squashed and projected back to token space,
giving an additive image-space prompt.
"""
from __future__ import annotations

import torch
import torch.nn as nn

from .backbone import depatchify
from .errors import ConfigError


def instance_norm(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Standardise each channel over spatial positions, per sample.

    ``x`` is (B, gh, gw, d). Biased variance, no affine terms.
    """
    mean = x.mean(dim=(-3, -2), keepdim=True)
    var = x.var(dim=(-3, -2), unbiased=False, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps)


def fuse_common(x_ori, x_in, e_o, e_i):
    return e_o * x_ori + (1 - e_o) * (e_i * x_in)


class ChannelMask(nn.Module):
    """Pointwise bottleneck d -> d/r -> d producing a gate per channel.

    With ``literal_order`` the activations are swapped (sigmoid inside,
    rectifier outside), which no longer keeps the gate inside (0, 1).
    """

    def __init__(self, dim: int, reduction: int, literal_order: bool = False):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim // reduction)
        self.fc2 = nn.Linear(dim // reduction, dim)
        self.literal_order = literal_order

    def forward(self, x):
        if self.literal_order:
            return torch.relu(self.fc2(torch.sigmoid(self.fc1(x))))
        return torch.sigmoid(self.fc2(torch.relu(self.fc1(x))))


class MCP(nn.Module):
    def __init__(self, token_dim: int, patch_size: int, grid: tuple[int, int], dim: int = 8,
                 reduction: int = 4, eps: float = 1e-5, literal_order: bool = False,
                 restore_init_std: float = 0.02):
        super().__init__()
        if dim % reduction:
            raise ConfigError(f"latent dim {dim} not divisible by reduction {reduction}", "mcp_dim")
        if eps <= 0:
            raise ConfigError("must be positive", "eps")
        self.patch_size = patch_size
        self.grid = tuple(grid)
        self.eps = eps
        self.embed = nn.Linear(token_dim, dim)
        self.mask_ori = ChannelMask(dim, reduction, literal_order)
        self.mask_in = ChannelMask(dim, reduction, literal_order)
        self.restore = nn.Linear(dim, token_dim)
        # a large initial prompt would swamp [0, 1] images
        nn.init.normal_(self.restore.weight, std=restore_init_std)
        nn.init.zeros_(self.restore.bias)

    def embed_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        """(B, M, D_tok) -> x_ori of shape (B, gh, gw, d)."""
        if tokens.shape[-1] != self.embed.in_features:
            raise ConfigError(f"token dim {tokens.shape[-1]} != {self.embed.in_features}", "tokens")
        h = self.embed(tokens)
        return h.reshape(*h.shape[:-2], *self.grid, h.shape[-1])

    def channel_masks(self, x_ori, x_in):
        return self.mask_ori(x_ori), self.mask_in(x_in)

    def restore_prompt(self, x_com: torch.Tensor) -> torch.Tensor:
        """x_com grid -> image-space prompt (B, H, W, C)."""
        h = x_com.reshape(*x_com.shape[:-3], -1, x_com.shape[-1])
        return depatchify(self.restore(torch.sigmoid(h)), self.patch_size, self.grid)

    def intermediates(self, tokens):
        x_ori = self.embed_tokens(tokens)
        x_in = instance_norm(x_ori, self.eps)
        e_o, e_i = self.channel_masks(x_ori, x_in)
        x_com = fuse_common(x_ori, x_in, e_o, e_i)
        return {"x_ori": x_ori, "x_in": x_in, "e_o": e_o, "e_i": e_i, "x_com": x_com}

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.restore_prompt(self.intermediates(tokens)["x_com"])
