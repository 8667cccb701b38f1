"""Deterministic synthetic visible/infrared identity stream.

Every identity owns a body silhouette (head, torso and two legs drawn as
ellipses) that is shared by both modalities. The visible render paints the
silhouette with the identity's three-colour palette; the infrared render
ignores the palette and fills the same silhouette with identity-specific
heat blobs, replicated into three near-grey channels. Each stage applies its
own affine style (gain, bias, background tone) to all of its images.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Sequence

import numpy as np

from .errors import ConfigError


class Modality(IntEnum):
    VISIBLE = 0
    INFRARED = 1


# (low, high) for each silhouette parameter, in normalised image coordinates
SILHOUETTE_RANGES = {
    "center_x": (0.40, 0.60),
    "head_radius": (0.08, 0.13),
    "torso_half_width": (0.12, 0.24),
    "torso_half_height": (0.15, 0.23),
    "leg_half_width": (0.05, 0.09),
    "leg_half_height": (0.13, 0.20),
    "leg_gap": (0.04, 0.10),
}
SILHOUETTE_FIELDS = tuple(SILHOUETTE_RANGES)

IR_BODY_TEMPERATURE = 0.55
IR_BACKGROUND_SCALE = 0.4


@dataclass(frozen=True)
class IdentitySpec:
    identity_id: int
    silhouette_params: tuple[float, ...]
    visible_palette: tuple[tuple[float, float, float], ...]
    thermal_seed: int


@dataclass(frozen=True)
class StyleShift:
    gain: float = 1.0
    bias: float = 0.0
    background: float = 0.0

    def apply(self, image: np.ndarray) -> np.ndarray:
        return np.clip(self.gain * image + self.bias, 0.0, 1.0)


@dataclass(frozen=True)
class StageConfig:
    """Per-stage generation template.

    ``style_shift`` left as None makes :func:`make_stream` draw a different
    style for every stage from the master seed.
    """

    num_identities: int = 20
    samples_per_identity_per_modality: int = 8
    image_height: int = 32
    image_width: int = 32
    channels: int = 3
    patch_size: int = 8
    noise_amplitude: float = 0.08
    ir_channel_deviation: float = 0.02
    style_shift: StyleShift | None = None
    gain_range: tuple[float, float] = (0.85, 1.15)
    bias_range: tuple[float, float] = (-0.08, 0.08)
    background_range: tuple[float, float] = (0.15, 0.45)
    stage_index: int = 1

    def validate(self) -> None:
        if self.num_identities < 2:
            raise ConfigError("need at least 2 identities per stage", "num_identities")
        if self.samples_per_identity_per_modality < 4:
            # two per modality are held out for query/gallery, two stay for training
            raise ConfigError("need at least 4 samples per identity and modality",
                              "samples_per_identity_per_modality")
        if self.channels != 3:
            raise ConfigError("only 3-channel images are supported", "channels")
        if self.patch_size < 1:
            raise ConfigError("must be positive", "patch_size")
        if self.image_height % self.patch_size:
            raise ConfigError(f"{self.image_height} not divisible by patch size {self.patch_size}",
                              "image_height")
        if self.image_width % self.patch_size:
            raise ConfigError(f"{self.image_width} not divisible by patch size {self.patch_size}",
                              "image_width")
        if not 0.0 <= self.noise_amplitude < 0.5:
            raise ConfigError("must lie in [0, 0.5)", "noise_amplitude")
        if not 0.0 <= self.ir_channel_deviation < 0.5:
            raise ConfigError("must lie in [0, 0.5)", "ir_channel_deviation")
        if self.stage_index < 1:
            raise ConfigError("stages are numbered from 1", "stage_index")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.image_height, self.image_width, self.channels)


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    identity: int
    modality: Modality
    stage: int


@dataclass(frozen=True)
class StageDataset:
    stage: int
    train: Sequence[Sample]
    query: Sequence[Sample]
    gallery: Sequence[Sample]
    identity_roster: Sequence[IdentitySpec]
    query_modality: Modality
    style: StyleShift
    config: StageConfig = field(repr=False)

    @property
    def num_identities(self) -> int:
        return len(self.identity_roster)

    @property
    def identity_ids(self) -> list[int]:
        return [spec.identity_id for spec in self.identity_roster]

    def mask_for(self, identity: int) -> np.ndarray:
        for spec in self.identity_roster:
            if spec.identity_id == identity:
                return silhouette_mask(spec, self.config.image_height, self.config.image_width)
        raise KeyError(identity)


def _pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    ys = (np.arange(height) + 0.5) / height
    xs = (np.arange(width) + 0.5) / width
    return np.meshgrid(ys, xs, indexing="ij")


def _ellipse(yy, xx, cy, cx, ry, rx) -> np.ndarray:
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def body_parts(spec: IdentitySpec, height: int, width: int) -> dict[str, np.ndarray]:
    """Boolean masks of head, torso and legs. Parts do not overlap."""
    cx, head_r, torso_hw, torso_hh, leg_hw, leg_hh, leg_gap = spec.silhouette_params
    yy, xx = _pixel_grid(height, width)
    torso_cy = 0.22 + torso_hh
    head = _ellipse(yy, xx, 0.22 - 0.6 * head_r, cx, head_r, head_r)
    torso = _ellipse(yy, xx, torso_cy, cx, torso_hh, torso_hw) & ~head
    leg_cy = torso_cy + torso_hh + 0.7 * leg_hh
    legs = (_ellipse(yy, xx, leg_cy, cx - leg_gap, leg_hh, leg_hw)
            | _ellipse(yy, xx, leg_cy, cx + leg_gap, leg_hh, leg_hw)) & ~head & ~torso
    return {"head": head, "torso": torso, "legs": legs}


def silhouette_mask(spec: IdentitySpec, height: int, width: int) -> np.ndarray:
    parts = body_parts(spec, height, width)
    return parts["head"] | parts["torso"] | parts["legs"]


def random_identity(identity_id: int, rng: np.random.Generator) -> IdentitySpec:
    params = tuple(float(rng.uniform(lo, hi)) for lo, hi in SILHOUETTE_RANGES.values())
    palette = tuple(tuple(float(c) for c in rng.uniform(0.0, 1.0, size=3)) for _ in range(3))
    return IdentitySpec(
        identity_id=identity_id,
        silhouette_params=params,
        visible_palette=palette,
        thermal_seed=int(rng.integers(0, 2**31 - 1)),
    )


def _noise(rng: np.random.Generator, amplitude: float, shape) -> np.ndarray:
    if amplitude == 0.0:
        return np.zeros(shape)
    return rng.uniform(-amplitude, amplitude, size=shape)


def render_visible(spec: IdentitySpec, style: StyleShift, rng: np.random.Generator,
                   config: StageConfig = StageConfig()) -> np.ndarray:
    h, w, c = config.shape
    parts = body_parts(spec, h, w)
    image = np.full((h, w, c), style.background, dtype=np.float64)
    for part, colour in zip(("head", "torso", "legs"), spec.visible_palette):
        image[parts[part]] = colour
    image += _noise(rng, config.noise_amplitude, (h, w, c))
    return style.apply(image).astype(np.float32)


def heat_map(spec: IdentitySpec, height: int, width: int) -> np.ndarray:
    """Identity heat layout: body temperature plus Gaussian blobs, zero outside the body."""
    mask = silhouette_mask(spec, height, width)
    rng = np.random.default_rng(spec.thermal_seed)
    yy, xx = _pixel_grid(height, width)
    inside = np.argwhere(mask)
    heat = np.full((height, width), IR_BODY_TEMPERATURE)
    for _ in range(3):
        y, x = inside[rng.integers(len(inside))]
        cy, cx = (y + 0.5) / height, (x + 0.5) / width
        sigma = rng.uniform(0.05, 0.10)
        amp = rng.uniform(-0.3, 0.45)
        heat += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    return np.where(mask, heat, 0.0)


def render_infrared(spec: IdentitySpec, style: StyleShift, rng: np.random.Generator,
                    config: StageConfig = StageConfig()) -> np.ndarray:
    h, w, c = config.shape
    mask = silhouette_mask(spec, h, w)
    grey = np.where(mask, heat_map(spec, h, w), IR_BACKGROUND_SCALE * style.background)
    grey = grey + _noise(rng, config.noise_amplitude, (h, w))
    image = np.repeat(grey[..., None], c, axis=2)
    # split the deviation symmetrically so any two channels differ by at most the bound
    image += _noise(rng, config.ir_channel_deviation / 2, (h, w, c))
    return style.apply(image).astype(np.float32)


def _draw_style(config: StageConfig, rng: np.random.Generator) -> StyleShift:
    return StyleShift(
        gain=float(rng.uniform(*config.gain_range)),
        bias=float(rng.uniform(*config.bias_range)),
        background=float(rng.uniform(*config.background_range)),
    )


def query_modality_for(stage: int) -> Modality:
    # odd stages query visible->infrared, even stages infrared->visible
    return Modality.VISIBLE if stage % 2 == 1 else Modality.INFRARED


def make_stage(config: StageConfig, first_identity: int, seed: np.random.SeedSequence) -> StageDataset:
    config.validate()
    id_seq, style_seq, sample_seq = seed.spawn(3)
    id_rng = np.random.default_rng(id_seq)
    roster = [random_identity(first_identity + k, id_rng) for k in range(config.num_identities)]
    style = config.style_shift or _draw_style(config, np.random.default_rng(style_seq))
    rng = np.random.default_rng(sample_seq)
    stage = config.stage_index
    q_mod = query_modality_for(stage)
    renderers = {Modality.VISIBLE: render_visible, Modality.INFRARED: render_infrared}

    train, query, gallery = [], [], []
    n = config.samples_per_identity_per_modality
    for spec in roster:
        for modality, render in renderers.items():
            samples = [Sample(render(spec, style, rng, config), spec.identity_id, modality, stage)
                       for _ in range(n)]
            held_out, rest = samples[:2], samples[2:]
            (query if modality == q_mod else gallery).extend(held_out)
            train.extend(rest)
    return StageDataset(stage=stage, train=tuple(train), query=tuple(query), gallery=tuple(gallery),
                        identity_roster=tuple(roster), query_modality=q_mod, style=style,
                        config=config)


def make_stream(num_stages: int, per_stage: StageConfig, master_seed: int) -> list[StageDataset]:
    """Generate ``num_stages`` stages with pairwise-disjoint identity sets."""
    if num_stages < 1:
        raise ConfigError("need at least one stage", "num_stages")
    per_stage.validate()
    seeds = np.random.SeedSequence(master_seed).spawn(num_stages)
    stream = []
    next_id = 0
    for s, seed in enumerate(seeds, start=1):
        cfg = replace(per_stage, stage_index=s)
        stream.append(make_stage(cfg, next_id, seed))
        next_id += cfg.num_identities
    return stream


def export_stream(stream: Sequence[StageDataset], directory: str | os.PathLike) -> str:
    """Write one PNG per sample plus ``manifest.jsonl``.

    Manifest records carry ``file`` (path relative to ``directory``),
    ``identity``, ``modality`` ("visible" / "infrared"), ``stage`` and
    ``split`` ("train" / "query" / "gallery").
    """
    from PIL import Image

    os.makedirs(directory, exist_ok=True)
    manifest = os.path.join(directory, "manifest.jsonl")
    with open(manifest, "w") as fh:
        for ds in stream:
            stage_dir = os.path.join(directory, f"stage{ds.stage}")
            os.makedirs(stage_dir, exist_ok=True)
            for split in ("train", "query", "gallery"):
                for k, sample in enumerate(getattr(ds, split)):
                    name = f"{split}_{k:05d}_id{sample.identity}_{sample.modality.name.lower()}.png"
                    pixels = np.round(np.asarray(sample.image) * 255).astype(np.uint8)
                    Image.fromarray(pixels).save(os.path.join(stage_dir, name))
                    record = {
                        "file": f"stage{ds.stage}/{name}",
                        "identity": sample.identity,
                        "modality": sample.modality.name.lower(),
                        "stage": sample.stage,
                        "split": split,
                    }
                    fh.write(json.dumps(record) + "\n")
    return manifest
