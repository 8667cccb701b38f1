"""Metrics reports (structured and human-readable) and ablation summaries."""
from __future__ import annotations

import json
import math

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .evaluation import METRICS, MetricsMatrix, average_forgetting


def metrics_report(metrics: MetricsMatrix, cfg: ExperimentConfig) -> dict:
    s = metrics.num_stages
    forgetting = None
    if s >= 2:
        forgetting = {m: average_forgetting(metrics, m) for m in METRICS}
    return {
        "name": cfg.name,
        "config_hash": cfg.hash(),
        "seed": cfg.train.seed,
        "master_seed": cfg.data.master_seed,
        "code_version": __version__,
        "num_stages": s,
        "matrix": metrics.to_dict(),
        "final_average": {m: metrics.final_average(m) for m in METRICS},
        "average_forgetting": forgetting,
    }


def dumps(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def _pct(v) -> str:
    return "     -" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{100 * v:6.2f}"


def metrics_table(report: dict) -> str:
    s = report["num_stages"]
    lines = [f"run {report['name']}  config {report['config_hash']}  seed {report['seed']}  "
             f"version {report['code_version']}", ""]
    for m in METRICS:
        lines.append(f"{m} (%)  rows: after stage t, columns: test stage i")
        lines.append("       " + " ".join(f"{'i=' + str(i):>6s}" for i in range(1, s + 1)))
        for t, row in enumerate(report["matrix"][m], start=1):
            lines.append(f"{'t=' + str(t):>6s} " + " ".join(_pct(v) for v in row))
        lines.append("")
    lines.append("final average: " + "  ".join(f"{m} {_pct(report['final_average'][m])}"
                                               for m in METRICS))
    af = report["average_forgetting"]
    lines.append("average forgetting: " + ("n/a (single stage)" if af is None else
                                           "  ".join(f"{m} {_pct(af[m])}" for m in METRICS)))
    return "\n".join(lines) + "\n"


def summarise_ablation(rows: list[dict]) -> list[dict]:
    """Collapse per-seed results to mean and spread per grid row.

    ``rows`` items hold ``label``, ``toggles`` and ``reports`` (one per seed).
    The spread is the population standard deviation over seeds.
    """
    out = []
    for row in rows:
        entry = {"label": row["label"], "toggles": row["toggles"],
                 "seeds": [r["seed"] for r in row["reports"]]}
        for m in METRICS:
            fa = [r["final_average"][m] for r in row["reports"]]
            entry[f"{m}_mean"], entry[f"{m}_std"] = float(np.mean(fa)), float(np.std(fa))
            af = [r["average_forgetting"][m] for r in row["reports"]
                  if r["average_forgetting"] is not None]
            entry[f"AF_{m}_mean"] = float(np.mean(af)) if af else None
            entry[f"AF_{m}_std"] = float(np.std(af)) if af else None
        out.append(entry)
    return out


def ablation_table(summary: list[dict]) -> str:
    head = f"{'row':<16s} {'MCP':>4s} {'MSP':>4s} {'CKA':>4s} {'EMA':>4s}"
    cols = ["mAP", "R1", "AF_mAP", "AF_R1"]
    lines = [head + "".join(f" {c + ' (%)':>16s}" for c in cols)]
    for e in summary:
        t = e["toggles"]
        flags = " ".join(f"{'x' if t[k] else '-':>4s}" for k in ("mcp", "msp", "cka", "ema"))
        cells = []
        for c in cols:
            mean, std = e[f"{c}_mean"], e[f"{c}_std"]
            cells.append("n/a" if mean is None else f"{100 * mean:.2f} ± {100 * std:.2f}")
        lines.append(f"{e['label']:<16s} {flags}" + "".join(f" {c:>16s}" for c in cells))
    return "\n".join(lines) + "\n"
