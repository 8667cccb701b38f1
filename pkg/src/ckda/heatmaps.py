"""Spatial prompt-magnitude maps and where their energy falls relative to the body."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .backbone import patchify
from .model import CKDAModel, modality_tensor
from .msp import compose_prompt, merge_prompt
from .synth_data import Sample

MAPS = ("common", "specific", "prompted")


@dataclass
class HeatmapRecord:
    sample: int
    identity: int
    modality: str
    kind: str
    file: str
    energy_in: float    # mean squared magnitude over silhouette pixels
    energy_out: float   # same over background pixels
    in_fraction: float  # share of the total energy that lies inside the silhouette


def magnitude(prompt: np.ndarray) -> np.ndarray:
    """(H, W, C) -> (H, W) per-pixel L2 norm over channels."""
    return np.sqrt((np.asarray(prompt, dtype=np.float64) ** 2).sum(axis=-1))


def energy_split(mag: np.ndarray, mask: np.ndarray) -> tuple[float, float, float]:
    energy = mag ** 2
    total = energy.sum()
    e_in = float(energy[mask].mean()) if mask.any() else 0.0
    e_out = float(energy[~mask].mean()) if (~mask).any() else 0.0
    frac = float(energy[mask].sum() / total) if total > 0 else 0.0
    return e_in, e_out, frac


def to_png(mag: np.ndarray, path: str) -> None:
    peak = mag.max()
    scaled = mag / peak if peak > 0 else np.zeros_like(mag)
    Image.fromarray(np.round(scaled * 255).astype(np.uint8), mode="L").save(path)


@torch.no_grad()
def prompt_maps(model: CKDAModel, samples: Sequence[Sample]) -> dict[str, np.ndarray]:
    """Magnitude maps (N, H, W) for the common prompt, the specific prompt and the prompted image.

    Both prompt modules are queried directly, whatever the model's toggles.
    """
    model.eval()
    dtype = next(model.parameters()).dtype
    images = torch.as_tensor(np.stack([s.image for s in samples]), dtype=dtype)
    mods = modality_tensor([s.modality for s in samples])
    tokens = patchify(images, model.cfg.patch_size)
    k_com = model.mcp(tokens)
    k_spe = model.msp(tokens, mods)
    prompted = merge_prompt(images, compose_prompt(k_com, k_spe))
    return {"common": magnitude(k_com.numpy()), "specific": magnitude(k_spe.numpy()),
            "prompted": magnitude(prompted.numpy())}


def report_heatmaps(model: CKDAModel, samples: Sequence[Sample], masks: Sequence[np.ndarray],
                    out_dir: str) -> dict:
    """Write one PNG per (sample, map) plus ``heatmaps.jsonl`` and ``summary.json``."""
    if len(samples) != len(masks):
        raise ValueError("one silhouette mask per sample expected")
    h, w, _ = model.image_shape
    os.makedirs(out_dir, exist_ok=True)
    maps = prompt_maps(model, samples)
    records = []
    for i, (sample, mask) in enumerate(zip(samples, masks)):
        if mask.shape != (h, w):
            raise ValueError(f"mask {i} has shape {mask.shape}, images are {h}x{w}")
        for kind in MAPS:
            name = f"s{i:03d}_id{sample.identity}_{sample.modality.name.lower()}_{kind}.png"
            mag = maps[kind][i]
            to_png(mag, os.path.join(out_dir, name))
            e_in, e_out, frac = energy_split(mag, mask)
            records.append(HeatmapRecord(i, sample.identity, sample.modality.name.lower(), kind,
                                         name, e_in, e_out, frac))
    with open(os.path.join(out_dir, "heatmaps.jsonl"), "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.__dict__) + "\n")
    mean_frac = {k: float(np.mean([r.in_fraction for r in records if r.kind == k])) for k in MAPS}
    summary = {
        "num_samples": len(samples),
        "mean_in_fraction": mean_frac,
        "mask_area_fraction": float(np.mean([m.mean() for m in masks])),
        "common_more_on_body": mean_frac["common"] > mean_frac["specific"],
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary
