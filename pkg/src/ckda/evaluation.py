"""Cross-modal retrieval metrics and forgetting over a stage stream."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import NumericError
from .model import modality_tensor
from .synth_data import StageDataset

METRICS = ("mAP", "R1")


def _unit(x: np.ndarray, what: str) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    norms = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(norms == 0)
    if len(bad):
        raise NumericError(f"{what} row {bad[0]} has zero norm", row=int(bad[0]))
    return x / norms[:, None]


def similarity(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    return _unit(query, "query") @ _unit(gallery, "gallery").T


def rank_gallery(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Gallery indices by descending cosine similarity; ties go to the lower index.

    A single query vector gives a 1-D permutation, a query matrix one row each.
    """
    if len(gallery) == 0:
        raise ValueError("empty gallery")
    single = np.ndim(query) == 1
    sim = similarity(query, gallery)
    idx = np.arange(sim.shape[1])
    order = np.stack([np.lexsort((idx, -row)) for row in sim])
    return order[0] if single else order


def _ranked_matches(rankings: np.ndarray, relevance: np.ndarray) -> np.ndarray:
    rankings = np.atleast_2d(rankings)
    relevance = np.atleast_2d(np.asarray(relevance, dtype=bool))
    matches = np.take_along_axis(relevance, rankings, axis=1)
    empty = np.flatnonzero(~matches.any(axis=1))
    if len(empty):
        raise ValueError(f"query {empty[0]} has no relevant gallery item")
    return matches


def average_precision(matches: np.ndarray) -> np.ndarray:
    hits = np.cumsum(matches, axis=1)
    precision = hits / np.arange(1, matches.shape[1] + 1)
    return (precision * matches).sum(axis=1) / matches.sum(axis=1)


def mean_ap(rankings: np.ndarray, relevance: np.ndarray) -> float:
    """``relevance[q, g]`` flags gallery item g (storage order) as relevant to query q."""
    return float(average_precision(_ranked_matches(rankings, relevance)).mean())


def rank1(rankings: np.ndarray, relevance: np.ndarray) -> float:
    return float(_ranked_matches(rankings, relevance)[:, 0].mean())


def retrieval_metrics(query_feats, query_ids, gallery_feats, gallery_ids) -> dict[str, float]:
    rankings = rank_gallery(np.asarray(query_feats), np.asarray(gallery_feats))
    relevance = np.asarray(query_ids)[:, None] == np.asarray(gallery_ids)[None, :]
    return {"mAP": mean_ap(rankings, relevance), "R1": rank1(rankings, relevance)}


@dataclass
class MetricsMatrix:
    """``values[metric][t, i]``: metric on stage i+1 after training stage t+1.

    Entries above the diagonal are NaN (stage not seen yet).
    """

    num_stages: int
    values: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for m in METRICS:
            self.values.setdefault(m, np.full((self.num_stages, self.num_stages), np.nan))

    def record(self, after_stage: int, on_stage: int, metrics: dict[str, float]) -> None:
        if on_stage > after_stage:
            raise ValueError("cannot evaluate on a stage that has not been trained yet")
        for m in METRICS:
            self.values[m][after_stage - 1, on_stage - 1] = metrics[m]

    def row(self, after_stage: int, metric: str = "mAP") -> np.ndarray:
        return self.values[metric][after_stage - 1, :after_stage]

    def final_average(self, metric: str = "mAP") -> float:
        return float(self.row(self.num_stages, metric).mean())

    def to_dict(self) -> dict:
        return {m: [[None if np.isnan(v) else float(v) for v in row] for row in self.values[m]]
                for m in METRICS}


def average_forgetting(matrix: MetricsMatrix, metric: str = "mAP", form: str = "diagonal") -> float:
    """Mean drop of each non-final stage from a reference score to its final score.

    ``form="diagonal"`` uses the score right after that stage was trained;
    ``form="max"`` the best score it ever had before the final stage.
    """
    s = matrix.num_stages
    if s < 2:
        raise ValueError("average forgetting needs at least 2 stages")
    a = matrix.values[metric]
    drops = []
    for i in range(s - 1):
        ref = a[i, i] if form == "diagonal" else np.nanmax(a[i:s - 1, i])
        drops.append(ref - a[s - 1, i])
    return float(np.mean(drops))


@torch.no_grad()
def extract_features(model, samples, batch_size: int = 256, pre_bn: bool = False) -> np.ndarray:
    """Eval-mode features of ``samples`` (post-BN unless ``pre_bn``)."""
    was_training = model.training
    model.eval()
    out = []
    dtype = next(model.parameters()).dtype
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images = torch.as_tensor(np.stack([s.image for s in chunk]), dtype=dtype)
        z_pre, z = model.encode(images, modality_tensor([s.modality for s in chunk]))
        out.append((z_pre if pre_bn else z).numpy())
    model.train(was_training)
    return np.concatenate(out).astype(np.float64)


def evaluate_stage(model, stage: StageDataset) -> dict[str, float]:
    q = extract_features(model, list(stage.query))
    g = extract_features(model, list(stage.gallery))
    return retrieval_metrics(q, [s.identity for s in stage.query],
                             g, [s.identity for s in stage.gallery])
