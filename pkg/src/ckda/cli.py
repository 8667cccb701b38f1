"""Command line entry point: ``run``, ``ablate``, ``eval-only`` and ``report-heatmaps``."""
from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import logging
import os
import sys
import traceback

import torch
import yaml

from . import __version__
from .checkpoint import load_checkpoint
from .config import ExperimentConfig, Toggles, load_config
from .errors import ConfigError, StateError
from .evaluation import METRICS, evaluate_stage
from .heatmaps import report_heatmaps
from .report import ablation_table, dumps, metrics_report, metrics_table, summarise_ablation
from .synth_data import make_stream
from .trainer import run_stream

log = logging.getLogger("ckda")

# (label, mcp, msp, cka); the stage EMA stays on in every row
MODULE_GRID = [
    ("base", False, False, False),
    ("base+mcp", True, False, False),
    ("base+mcp+msp", True, True, False),
    ("base+cka", False, False, True),
    ("full", True, True, True),
]


def grid_rows(preset: str, cfg: ExperimentConfig) -> list[tuple[str, Toggles]]:
    if preset == "modules":
        return [(label, Toggles(mcp, msp, cka, True)) for label, mcp, msp, cka in MODULE_GRID]
    if preset == "full":
        rows = []
        for mcp, msp, cka in itertools.product((False, True), repeat=3):
            on = [n for n, v in (("mcp", mcp), ("msp", msp), ("cka", cka)) if v]
            rows.append(("+".join(["base"] + on), Toggles(mcp, msp, cka, True)))
        return rows
    if preset == "ordering":
        return [("full", Toggles()), ("base+cka", Toggles(False, False, True, True)),
                ("base", Toggles(False, False, False, True)),
                ("base+mcp+msp", Toggles(True, True, False, True)),
                ("sft", Toggles(False, False, False, False))]
    if preset == "config":
        if not cfg.ablation.grid:
            raise ConfigError("empty grid", "ablation.grid")
        rows = []
        for k, row in enumerate(cfg.ablation.grid):
            row = dict(row)
            label = str(row.pop("label", f"row{k}"))
            unknown = set(row) - {"mcp", "msp", "cka", "ema"}
            if unknown:
                raise ConfigError(f"unknown toggles {sorted(unknown)}", f"ablation.grid[{k}]")
            rows.append((label, dataclasses.replace(cfg.train.toggles, **row)))
        return rows
    raise ConfigError(f"unknown grid {preset!r}", "--grid")


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    return dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, master_seed=seed),
                               train=dataclasses.replace(cfg.train, seed=seed))


def with_toggles(cfg: ExperimentConfig, toggles: Toggles) -> ExperimentConfig:
    train = dataclasses.replace(cfg.train, toggles=toggles)
    if not toggles.ema:
        # plain fine-tuning: nothing of the old model survives
        train = dataclasses.replace(train, ema_lambda=0.0)
    return dataclasses.replace(cfg, train=train)


def stream_for(cfg: ExperimentConfig):
    d = cfg.data
    return make_stream(d.num_stages, d.stage_config(cfg.model.patch_size), d.master_seed)


def execute(cfg: ExperimentConfig, run_dir: str, raw_text: str | None = None) -> dict:
    """Train one stream into an existing, empty ``run_dir``; returns the metrics report.

    A failure part-way leaves a ``FAILED`` marker holding the traceback.
    """
    try:
        if raw_text is not None:
            with open(os.path.join(run_dir, "config.yaml"), "w") as fh:
                fh.write(raw_text)
        with open(os.path.join(run_dir, "config.resolved.yaml"), "w") as fh:
            yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)
        result = run_stream(
            stream_for(cfg), cfg.train, cfg.model,
            checkpoint_dir=os.path.join(run_dir, "checkpoints") if cfg.checkpoints else None,
            config_hash=cfg.hash(), log_path=os.path.join(run_dir, "train_log.jsonl"))
        report = metrics_report(result.metrics, cfg)
        if "json" in cfg.report_formats:
            with open(os.path.join(run_dir, "metrics.json"), "w") as fh:
                fh.write(dumps(report))
        if "table" in cfg.report_formats:
            with open(os.path.join(run_dir, "metrics.txt"), "w") as fh:
                fh.write(metrics_table(report))
        return report
    except BaseException:
        with open(os.path.join(run_dir, "FAILED"), "w") as fh:
            fh.write(traceback.format_exc())
        raise


def fresh_dir(path: str) -> str:
    if os.path.exists(path):
        raise FileExistsError(f"{path} already exists; refusing to overwrite it")
    os.makedirs(path)
    return path


def cmd_run(args) -> int:
    cfg, text = load_config(args.config, args.set)
    run_dir = fresh_dir(os.path.join(cfg.output_dir, cfg.name))
    report = execute(cfg, run_dir, text)
    print(metrics_table(report), end="")
    print(f"outputs in {run_dir}")
    return 0


def cmd_ablate(args) -> int:
    cfg, text = load_config(args.config, args.set)
    rows = grid_rows(args.grid, cfg)
    seeds = list(args.seeds) if args.seeds else list(cfg.ablation.seeds)
    root = fresh_dir(os.path.join(cfg.output_dir, cfg.name))
    with open(os.path.join(root, "config.yaml"), "w") as fh:
        fh.write(text)
    results, failed = [], []
    for label, toggles in rows:
        reports = []
        for seed in seeds:
            run_cfg = with_seed(with_toggles(cfg, toggles), seed)
            run_dir = fresh_dir(os.path.join(root, label, f"seed{seed}"))
            log.info("ablation row %s, seed %d", label, seed)
            try:
                reports.append(execute(run_cfg, run_dir))
            except Exception as err:
                log.error("row %s seed %d failed: %s", label, seed, err)
                failed.append(f"{label}/seed{seed}")
        if reports:
            results.append({"label": label, "toggles": dataclasses.asdict(toggles),
                            "reports": reports})
    summary = summarise_ablation(results)
    with open(os.path.join(root, "ablation.json"), "w") as fh:
        fh.write(dumps({"config_hash": cfg.hash(), "code_version": __version__, "seeds": seeds,
                        "rows": summary, "failed": failed}))
    table = ablation_table(summary)
    with open(os.path.join(root, "ablation.txt"), "w") as fh:
        fh.write(table)
    print(table, end="")
    if failed:
        print(f"{len(failed)} run(s) failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def _checked_checkpoint(args):
    cfg, _ = load_config(args.config, args.set)
    model, bank, meta = load_checkpoint(args.checkpoint)
    if meta["config_hash"] != cfg.hash():
        raise StateError(f"checkpoint was trained under config {meta['config_hash']}, "
                         f"this config hashes to {cfg.hash()}")
    if tuple(meta["image_shape"]) != tuple(cfg.data.stage_config(cfg.model.patch_size).shape):
        raise StateError("checkpoint image shape does not match the configured data")
    return cfg, model, meta


def cmd_eval(args) -> int:
    cfg, model, meta = _checked_checkpoint(args)
    stream = stream_for(cfg)
    done = meta["stage_index"]
    rows = {m: [] for m in METRICS}
    for stage in stream[:done]:
        res = evaluate_stage(model, stage)
        for m in METRICS:
            rows[m].append(res[m])
    out = {"checkpoint": os.path.basename(args.checkpoint), "after_stage": done,
           "config_hash": meta["config_hash"], "code_version": __version__, "row": rows}
    text = dumps(out)
    if args.out:
        with open(args.out, "x") as fh:
            fh.write(text)
    print(text, end="")
    return 0


def cmd_heatmaps(args) -> int:
    cfg, model, meta = _checked_checkpoint(args)
    stream = stream_for(cfg)
    stage_no = args.stage or meta["stage_index"]
    if not 1 <= stage_no <= len(stream):
        raise ConfigError(f"stage {stage_no} outside 1..{len(stream)}", "--stage")
    stage = stream[stage_no - 1]
    # one query and one gallery image per identity, so both modalities appear
    first = {}
    for s in list(stage.query) + list(stage.gallery):
        first.setdefault((s.identity, s.modality), s)
    pairs = [first[(pid, m)] for pid in stage.identity_ids for m in sorted({k[1] for k in first})
             if (pid, m) in first][:args.samples]
    masks = [stage.mask_for(s.identity) for s in pairs]
    out = args.out or os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(
        args.checkpoint))), "heatmaps", f"stage{stage_no}")
    summary = report_heatmaps(model, pairs, masks, fresh_dir(out))
    print(json.dumps(summary, indent=2, sort_keys=True))
    print(f"heatmaps in {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ckda", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="YAML experiment config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. train.epochs=5 (repeatable)")

    p = sub.add_parser("run", help="train one stream and report metrics")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run a toggle grid over several seeds")
    common(p)
    p.add_argument("--grid", default="modules", choices=["modules", "full", "ordering", "config"])
    p.add_argument("--seeds", type=int, nargs="+")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval-only", help="re-evaluate a checkpoint on the stages it has seen")
    common(p, config_required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="also write the report here (must not exist)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report-heatmaps", help="prompt magnitude maps for a checkpoint")
    common(p, config_required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stage", type=int, help="stage whose test images are used (default: last trained)")
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--out", help="output directory (must not exist)")
    p.set_defaults(func=cmd_heatmaps)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (StateError, FileExistsError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:
        print(f"run failed: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
