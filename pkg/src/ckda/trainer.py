"""Stage-sequential lifelong training.

Each stage sees only its own training split. What carries over between
stages is the model itself, a frozen copy of the previous stage's model, and
that stage's per-identity prototype bank.
"""
from __future__ import annotations

import copy
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .cka import PrototypeBank, cka_losses, prototypes_from_features
from .config import ModelConfig, TrainConfig
from .errors import ConfigError, StateError
from .evaluation import MetricsMatrix, evaluate_stage, extract_features
from .losses import ce_loss, total_loss, triplet_loss
from .model import CKDAModel, ema_merge, modality_tensor
from .msp import prompt_alignment_loss
from .synth_data import Modality, StageDataset

log = logging.getLogger(__name__)


@dataclass
class StageSnapshot:
    model: CKDAModel
    bank: PrototypeBank | None


@dataclass
class StreamResult:
    model: CKDAModel
    metrics: MetricsMatrix
    checkpoints: list[str] = field(default_factory=list)
    log: list[dict] = field(default_factory=list)
    banks: list[PrototypeBank] = field(default_factory=list)


def freeze(model: CKDAModel) -> CKDAModel:
    frozen = copy.deepcopy(model)
    frozen.eval()
    frozen.requires_grad_(False)
    return frozen


class PKSampler:
    """Identity-balanced batches: P identities, K_v visible and K_t infrared images each."""

    def __init__(self, stage: StageDataset, cfg: TrainConfig):
        b = cfg.batch
        self.p, self.k = b.identities, {Modality.VISIBLE: b.visible_per_identity,
                                        Modality.INFRARED: b.infrared_per_identity}
        ids = stage.identity_ids
        if self.p > len(ids):
            raise ConfigError(f"{self.p} identities per batch but stage {stage.stage} has "
                              f"{len(ids)}", "train.batch.identities")
        self.label_of = {pid: k for k, pid in enumerate(ids)}
        pools = {(pid, m): [] for pid in ids for m in Modality}
        for idx, s in enumerate(stage.train):
            pools[(s.identity, s.modality)].append(idx)
        for (pid, m), pool in pools.items():
            if len(pool) < self.k[m]:
                raise ConfigError(f"identity {pid} has {len(pool)} {m.name.lower()} training "
                                  f"images, batch needs {self.k[m]}", "train.batch")
        self.ids = ids
        self.pools = {key: np.asarray(v) for key, v in pools.items()}

    def epoch(self, rng: np.random.Generator) -> list[np.ndarray]:
        order = rng.permutation(len(self.ids))
        batches = []
        for start in range(0, len(order), self.p):
            chunk = order[start:start + self.p]
            if len(chunk) < 2:
                continue
            idx = []
            for j in chunk:
                pid = self.ids[j]
                for m in Modality:
                    idx.extend(rng.choice(self.pools[(pid, m)], size=self.k[m], replace=False))
            batches.append(np.asarray(idx))
        return batches

    def steps_per_epoch(self) -> int:
        n = len(self.ids)
        return n // self.p + (1 if n % self.p >= 2 else 0)


def stage_tensors(stage: StageDataset, dtype=torch.float32):
    train = stage.train
    images = torch.as_tensor(np.stack([s.image for s in train]), dtype=dtype)
    modality = modality_tensor([s.modality for s in train])
    return images, modality, [s.identity for s in train]


def train_stage(model: CKDAModel, snapshot: StageSnapshot | None, stage: StageDataset,
                cfg: TrainConfig, on_record: Callable[[dict], None] | None = None):
    """Optimise one stage; returns ``(model, log_records)``.

    ``snapshot`` must be None exactly at stage 1. When a snapshot exists and
    the EMA toggle is on, the trained weights are merged with the snapshot's.
    """
    cfg.validate()
    if (snapshot is None) != (stage.stage == 1):
        raise StateError("a snapshot is required after stage 1 and forbidden at stage 1")
    if model.stage_index != stage.stage or model.heads[-1].out_features != stage.num_identities:
        raise StateError(f"model has no head for stage {stage.stage}; call add_head first")
    records: list[dict] = []
    if cfg.epochs == 0:
        return model, records

    sampler = PKSampler(stage, cfg)
    dtype = next(model.parameters()).dtype
    images, modality, identities = stage_tensors(stage, dtype)
    labels = torch.as_tensor([sampler.label_of[i] for i in identities], dtype=torch.long)
    rng = np.random.default_rng([cfg.seed, stage.stage])
    torch.manual_seed(cfg.seed * 1009 + stage.stage)

    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    total_steps = cfg.epochs * sampler.steps_per_epoch()
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=total_steps)
    w = cfg.weights
    use_prompts = model.use_mcp or model.use_msp
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        for idx in sampler.epoch(rng):
            idx_t = torch.as_tensor(idx)
            x, m, y = images[idx_t], modality[idx_t], labels[idx_t]
            neck_stats = model.encoder.neck_statistics() if snapshot is not None else None
            out = model(x, m)
            l_ce = ce_loss(model.classify(out["z"]), y, cfg.label_smoothing)
            l_trip = triplet_loss(out["z_pre"], y, w.margin, m, cfg.triplet_mining)
            l_p = l_inter = l_intra = None
            if snapshot is not None:
                with torch.no_grad():
                    old = snapshot.model(x, m)
                if use_prompts:
                    l_p = prompt_alignment_loss(out["prompts"].k_p, old["prompts"].k_p)
                if cfg.toggles.cka:
                    if cfg.cka_features == "post_bn":
                        # normalise with the statistics from before this batch's forward,
                        # so a model identical to the snapshot gives identical features
                        old_f = old["z"]
                        new_f = model.encoder.inference_neck(out["z_pre"], neck_stats)
                    else:
                        old_f, new_f = old["z_pre"], out["z_pre"]
                    l_inter, l_intra = cka_losses(old_f, new_f, m, snapshot.bank)
            loss = total_loss(l_ce, l_trip, w, l_p, l_inter, l_intra)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            step += 1
            rec = {"stage": stage.stage, "epoch": epoch, "step": step,
                   "ce": l_ce.item(), "trip": l_trip.item(),
                   "prompt": None if l_p is None else l_p.item(),
                   "inter": None if l_inter is None else l_inter.item(),
                   "intra": None if l_intra is None else l_intra.item(),
                   "total": loss.item()}
            records.append(rec)
            if on_record is not None:
                on_record(rec)
    model.eval()
    if snapshot is not None and cfg.toggles.ema:
        model = ema_merge(snapshot.model, model, cfg.ema_lambda, cfg.ema_prompts)
    return model, records


def extract_prototypes(model: CKDAModel, stage: StageDataset, pre_bn: bool = False) -> PrototypeBank:
    train = list(stage.train)
    feats = torch.as_tensor(extract_features(model, train, pre_bn=pre_bn), dtype=torch.float32)
    return prototypes_from_features(feats, [s.identity for s in train],
                                    [int(s.modality) for s in train], stage.stage)


def build_model(model_cfg: ModelConfig, cfg: TrainConfig, image_shape) -> CKDAModel:
    torch.manual_seed(cfg.seed)
    return CKDAModel(model_cfg, image_shape, use_mcp=cfg.toggles.mcp, use_msp=cfg.toggles.msp,
                     ema_lambda=cfg.ema_lambda)


def run_stream(stream: Sequence[StageDataset], cfg: TrainConfig,
               model_cfg: ModelConfig = ModelConfig(), checkpoint_dir: str | None = None,
               config_hash: str = "", log_path: str | None = None,
               model: CKDAModel | None = None) -> StreamResult:
    """Train through ``stream`` in order and fill the lower-triangular metrics matrix."""
    if not stream:
        raise ConfigError("empty stream", "data.num_stages")
    from .checkpoint import save_checkpoint

    if model is None:
        model = build_model(model_cfg, cfg, stream[0].config.shape)
    metrics = MetricsMatrix(len(stream))
    result = StreamResult(model, metrics)
    log_fh = open(log_path, "a") if log_path else None

    def on_record(rec):
        result.log.append(rec)
        if log_fh is not None:
            log_fh.write(json.dumps(rec) + "\n")

    snapshot = None
    try:
        for stage in stream:
            torch.manual_seed(cfg.seed * 7919 + stage.stage)
            model.add_head(stage.num_identities)
            model, _ = train_stage(model, snapshot, stage, cfg, on_record)
            bank = extract_prototypes(model, stage, pre_bn=cfg.cka_features == "pre_bn")
            result.banks.append(bank)
            for past in stream[:stage.stage]:
                metrics.record(stage.stage, past.stage, evaluate_stage(model, past))
            log.info("stage %d: mAP row %s", stage.stage,
                     np.round(metrics.row(stage.stage), 4).tolist())
            if checkpoint_dir is not None:
                os.makedirs(checkpoint_dir, exist_ok=True)
                path = os.path.join(checkpoint_dir, f"stage{stage.stage}.npz")
                result.checkpoints.append(save_checkpoint(path, model, config_hash, bank))
            snapshot = StageSnapshot(freeze(model), bank)
    finally:
        if log_fh is not None:
            log_fh.close()
    result.model = model
    return result
