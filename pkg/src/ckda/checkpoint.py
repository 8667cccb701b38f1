"""Checkpoint archives.

A checkpoint is a single ``.npz`` file (format version 1):

* ``param/<name>``: every tensor of the model's ``state_dict``, keyed by its
  canonical module path (``encoder.blocks.0.attn.in_proj_weight``, ...).
* ``bank/visible``, ``bank/infrared``, ``bank/identity_ids``: the prototype
  bank extracted after this stage, when one is stored.
* ``meta``: a JSON string with ``format_version``, ``stage_index``,
  ``ema_lambda``, ``config_hash``, ``head_sizes``, ``image_shape``,
  ``use_mcp``, ``use_msp``, ``bank_stage`` and the full ``model_config``.
"""
from __future__ import annotations

import dataclasses
import json
import os

import numpy as np
import torch

from .cka import PrototypeBank
from .config import ModelConfig
from .errors import StateError
from .model import CKDAModel

FORMAT_VERSION = 1


def save_checkpoint(path: str | os.PathLike, model: CKDAModel, config_hash: str = "",
                    bank: PrototypeBank | None = None) -> str:
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {
        "format_version": FORMAT_VERSION,
        "stage_index": model.stage_index,
        "ema_lambda": model.ema_lambda,
        "config_hash": config_hash,
        "head_sizes": [h.out_features for h in model.heads],
        "image_shape": list(model.image_shape),
        "use_mcp": model.use_mcp,
        "use_msp": model.use_msp,
        "bank_stage": None,
        "model_config": dataclasses.asdict(model.cfg),
    }
    if bank is not None:
        arrays["bank/visible"] = bank.visible.detach().cpu().numpy()
        arrays["bank/infrared"] = bank.infrared.detach().cpu().numpy()
        arrays["bank/identity_ids"] = np.asarray(bank.identity_ids, dtype=np.int64)
        meta["bank_stage"] = bank.stage
    arrays["meta"] = np.asarray(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return str(path)


def load_checkpoint(path: str | os.PathLike):
    """Returns ``(model, bank_or_None, meta)``; the model is in eval mode."""
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(str(archive["meta"]))
        if meta.get("format_version") != FORMAT_VERSION:
            raise StateError(f"unsupported checkpoint format {meta.get('format_version')}")
        model = CKDAModel(ModelConfig(**meta["model_config"]), tuple(meta["image_shape"]),
                          meta["use_mcp"], meta["use_msp"], meta["ema_lambda"])
        for n in meta["head_sizes"]:
            model.add_head(n)
        state = {k[len("param/"):]: torch.from_numpy(archive[k].copy())
                 for k in archive.files if k.startswith("param/")}
        model.load_state_dict(state)
        bank = None
        if meta["bank_stage"] is not None:
            bank = PrototypeBank(stage=meta["bank_stage"],
                                 visible=torch.from_numpy(archive["bank/visible"].copy()),
                                 infrared=torch.from_numpy(archive["bank/infrared"].copy()),
                                 identity_ids=tuple(int(i) for i in archive["bank/identity_ids"]))
    model.stage_index = meta["stage_index"]
    model.eval()
    return model, bank, meta
