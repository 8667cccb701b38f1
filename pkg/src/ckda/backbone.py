"""Patch tokenisation, a small ViT encoder with a BN neck, and identity heads."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, StateError


def grid_shape(height: int, width: int, patch_size: int) -> tuple[int, int]:
    if height % patch_size or width % patch_size:
        raise ConfigError(f"image {height}x{width} not divisible by patch size {patch_size}",
                          "patch_size")
    return height // patch_size, width // patch_size


def patchify(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(..., H, W, C) -> (..., M, ps*ps*C), tokens in row-major grid order."""
    *lead, h, w, c = images.shape
    gh, gw = grid_shape(h, w, patch_size)
    x = images.reshape(*lead, gh, patch_size, gw, patch_size, c)
    n = len(lead)
    x = x.permute(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, gh * gw, patch_size * patch_size * c)


def depatchify(tokens: torch.Tensor, patch_size: int, grid: tuple[int, int]) -> torch.Tensor:
    """Inverse of :func:`patchify`."""
    *lead, m, dim = tokens.shape
    gh, gw = grid
    if m != gh * gw or dim % (patch_size * patch_size):
        raise ConfigError(f"cannot fold {m} tokens of size {dim} onto grid {grid}", "tokens")
    c = dim // (patch_size * patch_size)
    x = tokens.reshape(*lead, gh, gw, patch_size, patch_size, c)
    n = len(lead)
    x = x.permute(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, gh * patch_size, gw * patch_size, c)


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, num_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        y = self.norm1(x)
        x = x + self.attn(y, y, y, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class TinyViT(nn.Module):
    """Patch embedding + class token + pre-norm transformer blocks + BN neck.

    ``forward`` returns ``(z_pre, z)``: the class-token feature and its
    batch-normalised version. The neck's shift is frozen at zero, as in the
    usual BNNeck recipe.
    """

    def __init__(self, image_size=(32, 32), channels=3, patch_size=8, embed_dim=64,
                 depth=2, num_heads=4, mlp_ratio=2.0):
        super().__init__()
        self.patch_size = patch_size
        self.grid = grid_shape(image_size[0], image_size[1], patch_size)
        num_tokens = self.grid[0] * self.grid[1]
        token_dim = patch_size * patch_size * channels

        self.patch_embed = nn.Linear(token_dim, embed_dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, num_tokens + 1, embed_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.blocks = nn.ModuleList(Block(embed_dim, num_heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(embed_dim)
        self.neck = nn.BatchNorm1d(embed_dim)
        self.neck.bias.requires_grad_(False)
        self.feat_dim = embed_dim

    def forward(self, images: torch.Tensor):
        tokens = self.patch_embed(patchify(images, self.patch_size))
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        x = torch.cat([cls, tokens], dim=1) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        z_pre = self.norm(x)[:, 0]
        return z_pre, self.neck(z_pre)

    def neck_statistics(self) -> tuple[torch.Tensor, torch.Tensor]:
        return self.neck.running_mean.clone(), self.neck.running_var.clone()

    def inference_neck(self, z_pre: torch.Tensor, stats=None) -> torch.Tensor:
        """Neck normalisation with running statistics, whatever the module mode.

        ``stats`` replaces the live running (mean, var), e.g. a copy taken
        before a training-mode forward moved them.
        """
        n = self.neck
        mean, var = stats if stats is not None else (n.running_mean, n.running_var)
        return F.batch_norm(z_pre, mean, var, n.weight, n.bias, training=False, eps=n.eps)


def new_head(feat_dim: int, num_classes: int) -> nn.Linear:
    head = nn.Linear(feat_dim, num_classes)
    nn.init.normal_(head.weight, std=0.001)
    nn.init.zeros_(head.bias)
    return head


def classify(z: torch.Tensor, heads: nn.ModuleList, stage: int) -> torch.Tensor:
    """Raw logits of the stage-``stage`` head (stages counted from 1)."""
    if not 1 <= stage <= len(heads):
        raise StateError(f"no classifier head for stage {stage} ({len(heads)} heads exist)")
    head = heads[stage - 1]
    return F.linear(z, head.weight, head.bias)
