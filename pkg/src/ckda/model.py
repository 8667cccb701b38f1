"""Full model: prompt generators + encoder + per-stage heads, and the stage EMA merge."""
from __future__ import annotations

import copy

import torch
import torch.nn as nn

from .backbone import TinyViT, classify, new_head, patchify
from .config import ModelConfig
from .errors import StateError
from .mcp import MCP
from .msp import MSP, PromptTriple, compose_prompt, merge_prompt
from .synth_data import Modality


class CKDAModel(nn.Module):
    """Holds everything that persists across stages.

    ``use_mcp`` / ``use_msp`` switch the corresponding prompt to zero; the
    modules still exist so that checkpoints have one layout.
    """

    def __init__(self, cfg: ModelConfig = ModelConfig(), image_shape=(32, 32, 3),
                 use_mcp: bool = True, use_msp: bool = True, ema_lambda: float = 0.5):
        super().__init__()
        self.cfg = cfg
        self.image_shape = tuple(image_shape)
        h, w, c = self.image_shape
        ps = cfg.patch_size
        self.encoder = TinyViT((h, w), c, ps, cfg.embed_dim, cfg.depth, cfg.num_heads, cfg.mlp_ratio)
        token_dim = ps * ps * c
        grid = self.encoder.grid
        self.mcp = MCP(token_dim, ps, grid, cfg.mcp_dim, cfg.reduction, cfg.eps,
                       cfg.literal_mask_activations)
        self.msp = MSP(token_dim, ps, grid, cfg.reduction, cfg.msp_dropout, cfg.msp_norm_stats)
        self.heads = nn.ModuleList()
        self.use_mcp = use_mcp
        self.use_msp = use_msp
        self.ema_lambda = ema_lambda
        self.stage_index = 0

    @property
    def feat_dim(self) -> int:
        return self.encoder.feat_dim

    def add_head(self, num_classes: int) -> nn.Linear:
        for head in self.heads:
            head.requires_grad_(False)
        head = new_head(self.feat_dim, num_classes)
        self.heads.append(head)
        self.stage_index = len(self.heads)
        return head

    def prompts(self, images: torch.Tensor, modality: torch.Tensor) -> PromptTriple:
        zeros = torch.zeros_like(images)
        if not (self.use_mcp or self.use_msp):
            return PromptTriple(zeros, zeros, zeros)
        tokens = patchify(images, self.cfg.patch_size)
        k_com = self.mcp(tokens) if self.use_mcp else zeros
        k_spe = self.msp(tokens, modality) if self.use_msp else zeros
        return PromptTriple(k_com, k_spe, compose_prompt(k_com, k_spe))

    def forward(self, images: torch.Tensor, modality: torch.Tensor) -> dict:
        triple = self.prompts(images, modality)
        prompted = merge_prompt(images, triple.k_p)
        z_pre, z = self.encoder(prompted)
        return {"prompts": triple, "prompted": prompted, "z_pre": z_pre, "z": z}

    def encode(self, images: torch.Tensor, modality: torch.Tensor):
        """(z_pre, z) for already-batched images."""
        out = self(images, modality)
        return out["z_pre"], out["z"]

    def classify(self, z: torch.Tensor, stage: int | None = None) -> torch.Tensor:
        return classify(z, self.heads, stage or self.stage_index)

    def shared_modules(self, include_prompts: bool = True) -> dict[str, nn.Module]:
        mods = {"encoder": self.encoder}
        if include_prompts:
            mods.update(mcp=self.mcp, msp=self.msp)
        return mods


def modality_tensor(modalities) -> torch.Tensor:
    return torch.as_tensor([int(Modality(m)) for m in modalities], dtype=torch.long)


def ema_merge(old: CKDAModel, new: CKDAModel, lam: float, merge_prompts: bool = True) -> CKDAModel:
    """``lam * old + (1 - lam) * new`` over encoder (and prompt) tensors.

    Classifier heads, and prompts when ``merge_prompts`` is off, are taken
    from ``new`` unchanged. Integer buffers (batch counters) come from ``new``.
    """
    if not 0.0 <= lam <= 1.0:
        raise StateError(f"EMA weight {lam} outside [0, 1]")
    merged = copy.deepcopy(new)
    old_mods = old.shared_modules(merge_prompts)
    for name, mod in merged.shared_modules(merge_prompts).items():
        old_state = old_mods[name].state_dict()
        state = mod.state_dict()
        if old_state.keys() != state.keys():
            raise StateError(f"{name}: parameter names differ between old and new model")
        for key, value in state.items():
            ref = old_state[key]
            if ref.shape != value.shape:
                raise StateError(f"{name}.{key}: shape {tuple(ref.shape)} vs {tuple(value.shape)}")
            if value.is_floating_point():
                # endpoints are exact: no arithmetic at lam in {0, 1}
                if lam == 1.0:
                    value.copy_(ref)
                elif lam != 0.0:
                    value.copy_(lam * ref + (1 - lam) * value)
    merged.ema_lambda = lam
    return merged
