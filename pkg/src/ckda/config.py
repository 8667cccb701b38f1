"""Experiment configuration: dataclasses, YAML loading, dotted overrides."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

import yaml

from .errors import ConfigError
from .losses import LossWeights
from .synth_data import StageConfig


@dataclass
class DataConfig:
    num_stages: int = 3
    num_identities: int = 20
    samples_per_identity_per_modality: int = 8
    image_height: int = 32
    image_width: int = 32
    channels: int = 3
    noise_amplitude: float = 0.08
    ir_channel_deviation: float = 0.02
    gain_range: list = field(default_factory=lambda: [0.85, 1.15])
    bias_range: list = field(default_factory=lambda: [-0.08, 0.08])
    background_range: list = field(default_factory=lambda: [0.15, 0.45])
    master_seed: int = 0

    def stage_config(self, patch_size: int) -> StageConfig:
        return StageConfig(
            num_identities=self.num_identities,
            samples_per_identity_per_modality=self.samples_per_identity_per_modality,
            image_height=self.image_height,
            image_width=self.image_width,
            channels=self.channels,
            patch_size=patch_size,
            noise_amplitude=self.noise_amplitude,
            ir_channel_deviation=self.ir_channel_deviation,
            gain_range=_pair(self.gain_range, "gain_range"),
            bias_range=_pair(self.bias_range, "bias_range"),
            background_range=_pair(self.background_range, "background_range"),
        )


def _pair(values, where: str) -> tuple[float, float]:
    if len(values) != 2 or not all(isinstance(v, (int, float)) for v in values):
        raise ConfigError("expected [low, high]", where)
    low, high = float(values[0]), float(values[1])
    if low > high:
        raise ConfigError("low end above high end", where)
    return low, high


@dataclass
class ModelConfig:
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 2
    num_heads: int = 4
    mlp_ratio: float = 2.0
    mcp_dim: int = 8
    reduction: int = 4
    eps: float = 1e-5
    msp_dropout: float = 0.1
    msp_norm_stats: str = "batch"
    literal_mask_activations: bool = False
    merge_op: str = "add"

    def validate(self) -> None:
        if self.embed_dim % self.num_heads:
            raise ConfigError("must be divisible by num_heads", "model.embed_dim")
        if self.mcp_dim % self.reduction:
            raise ConfigError("must be divisible by reduction", "model.mcp_dim")
        if self.msp_norm_stats not in ("running", "batch"):
            raise ConfigError("expected 'running' or 'batch'", "model.msp_norm_stats")
        if self.merge_op != "add":
            raise ConfigError("only 'add' is implemented", "model.merge_op")


@dataclass
class BatchSpec:
    identities: int = 8
    visible_per_identity: int = 2
    infrared_per_identity: int = 2

    @property
    def batch_size(self) -> int:
        return self.identities * (self.visible_per_identity + self.infrared_per_identity)


@dataclass
class Toggles:
    mcp: bool = True
    msp: bool = True
    cka: bool = True
    ema: bool = True


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 3e-4
    weight_decay: float = 1e-4
    batch: BatchSpec = field(default_factory=BatchSpec)
    weights: LossWeights = field(default_factory=LossWeights)
    ema_lambda: float = 0.5
    ema_prompts: bool = True
    seed: int = 0
    toggles: Toggles = field(default_factory=Toggles)
    cka_features: str = "post_bn"
    triplet_mining: str = "global"
    label_smoothing: float = 0.0

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("must be >= 0", "train.epochs")
        if self.lr <= 0:
            raise ConfigError("must be > 0", "train.lr")
        if not 0.0 <= self.ema_lambda <= 1.0:
            raise ConfigError("must lie in [0, 1]", "train.ema_lambda")
        if self.cka_features not in ("post_bn", "pre_bn"):
            raise ConfigError("expected 'post_bn' or 'pre_bn'", "train.cka_features")
        if self.triplet_mining not in ("global", "cross_modality"):
            raise ConfigError("expected 'global' or 'cross_modality'", "train.triplet_mining")
        b = self.batch
        if b.identities < 2:
            raise ConfigError("need at least 2 identities per batch", "train.batch.identities")
        if b.visible_per_identity < 1 or b.infrared_per_identity < 1:
            raise ConfigError("need at least one image per modality and identity", "train.batch")
        try:
            self.weights.validate()
        except ConfigError as err:
            raise ConfigError(str(err).split(": ", 1)[-1], f"train.weights.{err.field}") from None


@dataclass
class AblationConfig:
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    grid: list[dict[str, bool]] = field(default_factory=list)


@dataclass
class ExperimentConfig:
    name: str = "ckda"
    output_dir: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    report_formats: list[str] = field(default_factory=lambda: ["json", "table"])
    checkpoints: bool = True

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        try:
            self.data.stage_config(self.model.patch_size).validate()
        except ConfigError as err:
            raise ConfigError(str(err).split(": ", 1)[-1], f"data.{err.field}") from None
        if self.data.num_stages < 1:
            raise ConfigError("must be >= 1", "data.num_stages")
        if (self.train.batch.visible_per_identity + self.train.batch.infrared_per_identity) < 2:
            raise ConfigError("need two images per identity for triplet mining", "train.batch")
        unknown = set(self.report_formats) - {"json", "table"}
        if unknown:
            raise ConfigError(f"unknown formats {sorted(unknown)}", "report_formats")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """Digest of everything that affects results (not names, paths or formats)."""
        d = self.to_dict()
        blob = json.dumps({k: d[k] for k in ("data", "model", "train")}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _build(cls, data: Any, path: str):
    if not dataclasses.is_dataclass(cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping, got {type(data).__name__}", path or "<root>")
    hints = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in hints:
            raise ConfigError("unknown field", where)
        kwargs[key] = _coerce(hints[key], value, where)
    return cls(**kwargs)


_NESTED = {
    "data": DataConfig, "model": ModelConfig, "train": TrainConfig, "ablation": AblationConfig,
    "batch": BatchSpec, "weights": LossWeights, "toggles": Toggles,
}


def _coerce(f: dataclasses.Field, value: Any, where: str):
    if f.name in _NESTED:
        return _build(_NESTED[f.name], value, where)
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", where)
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", where)
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", where)
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", where)
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"expected a list, got {value!r}", where)
    return value


def config_from_dict(data: dict | None) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data or {}, "")
    cfg.validate()
    return cfg


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` overrides (value parsed as YAML) onto a raw config dict."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value", "--set")
        key, raw = item.split("=", 1)
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError("not a mapping", key)
        node[parts[-1]] = yaml.safe_load(raw)
    return data


def load_config(path: str | None, overrides: list[str] = ()) -> tuple[ExperimentConfig, str]:
    """Returns the validated config and the raw file text (archived verbatim)."""
    text = ""
    data: dict = {}
    if path is not None:
        with open(path) as fh:
            text = fh.read()
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as err:
            raise ConfigError(f"not valid YAML: {err}", path) from None
        if not isinstance(data, dict):
            raise ConfigError("top level must be a mapping", path)
    data = apply_overrides(data, list(overrides))
    return config_from_dict(data), text

