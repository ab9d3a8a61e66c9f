"""Command-line entry points: ``wildvqa {extract,train,eval,score,sweep,synth}``.

Every command accepts ``--config FILE`` (JSON); explicit flags override the
file. The resolved configuration and a verbatim copy of the config file are
written to the output directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .cache import FeatureCache
from .data import (SYNTHETIC_TAG, SplitPlan, SyntheticSpec, load_features, load_manifest, synthesize_dataset,
                   synthesize_videos, write_synthetic)
from .decode import open_video
from .errors import (CacheCorruptionError, CacheNotFoundError, CheckpointError, ConfigurationError, DecodeError,
                     DomainError, NumericError, TrainingError, ValidationError)
from .features import extract_video_features, load_backbone
from .metrics import EvalReport
from .model import load_checkpoint
from .pooling import PoolingConfig, pool
from .sweep import build_cells, run_sweep, write_sweep
from .training import TrainConfig, evaluate_model, run_protocol

log = logging.getLogger("wildvqa")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_EXTRACTION = 3
EXIT_TRAINING = 4
EXIT_IO = 5


class CommandFailed(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


# -- config handling -------------------------------------------------------------

COMMAND_KEYS = {
    "extract": {"manifest", "backbone", "cache_dir", "jobs", "out", "mos_range", "seed"},
    "train": {"manifest", "backbone", "cache_dir", "out", "seed", "runs", "epochs", "lr", "batch_size",
              "patience", "tau", "gamma", "memory", "no_std", "no_recurrent", "average_pooling",
              "no_temporal", "jobs", "mos_range", "clip_norm", "zero_head_bias"},
    "eval": {"runs_dir", "checkpoint", "split", "manifest", "backbone", "cache_dir", "out", "seed", "mos_range"},
    "score": {"video", "checkpoint", "backbone", "curve", "out", "seed", "cache_dir"},
    "sweep": {"manifest", "backbone", "cache_dir", "out", "seed", "runs", "epochs", "lr", "batch_size",
              "patience", "axis", "values", "toggles", "jobs", "mos_range", "clip_norm", "zero_head_bias"},
    "synth": {"out", "cache_dir", "seed", "videos", "frames", "dim", "noise", "tau", "gamma", "as_videos",
              "min_frames", "backbone", "content_rank"},
}

DEFAULTS = {
    "backbone": "resnet50",
    "cache_dir": "cache",
    "seed": 0,
    "runs": 10,
    "epochs": 200,
    "lr": 1e-5,
    "batch_size": 16,
    "patience": 50,
    "tau": 12,
    "gamma": 0.5,
    "memory": "min",
    "jobs": 1,
    "clip_norm": 10.0,
    "videos": 60,
    "frames": 30,
    "dim": 16,
    "noise": 0.0,
}


def resolve_config(args: argparse.Namespace) -> dict:
    keys = COMMAND_KEYS[args.command]
    file_cfg = {}
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise CommandFailed(f"cannot read config {args.config}: {exc}", EXIT_VALIDATION) from exc
        if not isinstance(file_cfg, dict):
            raise CommandFailed("config file must hold a JSON object", EXIT_VALIDATION)
        unknown = set(file_cfg) - keys
        if unknown:
            raise CommandFailed(f"unknown config keys for {args.command}: {sorted(unknown)}", EXIT_VALIDATION)
    cfg = {k: v for k, v in DEFAULTS.items() if k in keys}
    if args.command in ("eval", "score"):
        # the checkpoint records its own backbone tag
        cfg.pop("backbone", None)
    cfg.update(file_cfg)
    for k in keys:
        v = getattr(args, k, None)
        if v is not None and v is not False:
            cfg[k] = v
    if args.command == "extract" and "jobs" not in file_cfg and args.jobs is None:
        cfg["jobs"] = os.cpu_count() or 1
    return cfg


def echo_config(out_dir, args, cfg: dict):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"command": args.command, "version": __version__, "config": cfg,
                "config_file": args.config}
    (out_dir / "command.json").write_text(json.dumps(manifest, indent=2, default=str), encoding="utf-8")
    if args.config:
        shutil.copyfile(args.config, out_dir / "config.json")


def _require(cfg, *names):
    missing = [n for n in names if not cfg.get(n)]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise CommandFailed(f"missing required option(s): {flags}", EXIT_VALIDATION)


def _manifest(cfg, check_files=False):
    mos_range = tuple(cfg["mos_range"]) if cfg.get("mos_range") else None
    return load_manifest(cfg["manifest"], mos_range=mos_range, check_files=check_files)


def _train_config(cfg) -> TrainConfig:
    pooling = None
    if not (cfg.get("average_pooling") or cfg.get("no_temporal")):
        pooling = PoolingConfig(tau=int(cfg["tau"]), gamma=float(cfg["gamma"]), memory=cfg["memory"])
    return TrainConfig(learning_rate=float(cfg["lr"]), batch_size=int(cfg["batch_size"]),
                       max_epochs=int(cfg["epochs"]), patience=int(cfg["patience"]), seed=int(cfg["seed"]),
                       runs=int(cfg["runs"]), pooling=pooling,
                       recurrent=not (cfg.get("no_recurrent") or cfg.get("no_temporal")),
                       use_std=not cfg.get("no_std"), clip_norm=float(cfg["clip_norm"]),
                       init_head_bias=not cfg.get("zero_head_bias"))


def _print(obj):
    print(json.dumps(obj, indent=2, default=str))


# -- extract ------------------------------------------------------------------------

_worker_backbone = None


def _init_worker(tag):
    global _worker_backbone
    torch.set_num_threads(1)
    _worker_backbone = load_backbone(tag)


def _extract_one(job):
    sid, path, cache_dir = job
    try:
        record = extract_video_features(open_video(path, sid), _worker_backbone)
        FeatureCache(cache_dir).store(record)
        return sid, None
    except (DecodeError, OSError, ValueError) as exc:
        return sid, str(exc)


def cmd_extract(args, cfg):
    _require(cfg, "manifest")
    manifest = _manifest(cfg, check_files=False)
    backbone = load_backbone(cfg["backbone"])
    cache = FeatureCache(cfg["cache_dir"])
    todo = [(e.source_id, e.video_path, cfg["cache_dir"]) for e in manifest.entries
            if not cache.exists(e.source_id, backbone.tag)]
    cached = len(manifest) - len(todo)
    failures = {}
    jobs = max(1, int(cfg["jobs"]))
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(cfg["backbone"],)) as ex:
            outcomes = list(ex.map(_extract_one, todo))
    else:
        global _worker_backbone
        _worker_backbone = backbone
        outcomes = [_extract_one(j) for j in todo]
    for sid, err in outcomes:
        if err is not None:
            failures[sid] = err
            log.error("extraction failed for %s: %s", sid, err)
    summary = {"manifest": str(cfg["manifest"]), "backbone": backbone.tag, "cache_dir": str(cfg["cache_dir"]),
               "videos": len(manifest), "already_cached": cached, "extracted": len(todo) - len(failures),
               "failed": len(failures), "failures": failures}
    if cfg.get("out"):
        echo_config(cfg["out"], args, cfg)
        (Path(cfg["out"]) / "extract_summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    _print(summary)
    return EXIT_EXTRACTION if failures else EXIT_OK


# -- train ----------------------------------------------------------------------------

def cmd_train(args, cfg):
    _require(cfg, "manifest", "out")
    train_cfg = _train_config(cfg)
    manifest = _manifest(cfg)
    dataset = load_features(manifest, cfg["cache_dir"], load_backbone_tag(cfg["backbone"]))
    out = Path(cfg["out"]) / manifest.name
    echo_config(out, args, cfg)
    report = run_protocol(dataset, train_cfg, out_dir=out, jobs=int(cfg["jobs"]))
    _print({"report": str(out / "report.json"), "complete": report.complete, "aggregate": report.aggregate})
    return EXIT_OK if report.complete else EXIT_TRAINING


def load_backbone_tag(spec) -> str:
    """Cache tag for a backbone spec without instantiating its weights."""
    from .features import resolve_manifest

    if spec == SYNTHETIC_TAG:
        return spec
    return resolve_manifest(spec).tag


# -- eval -------------------------------------------------------------------------------

def _eval_targets(cfg):
    if cfg.get("runs_dir"):
        root = Path(cfg["runs_dir"])
        runs = sorted((p for p in root.glob("run_*") if p.is_dir()), key=lambda p: int(p.name.split("_")[1]))
        if not runs:
            raise CommandFailed(f"no run_* checkpoints under {root}", EXIT_IO)
        return [(p, p / "split.json") for p in runs], root
    _require(cfg, "checkpoint")
    ckpt = Path(cfg["checkpoint"])
    split = Path(cfg["split"]) if cfg.get("split") else ckpt / "split.json"
    return [(ckpt, split)], ckpt


def cmd_eval(args, cfg):
    _require(cfg, "manifest")
    manifest = _manifest(cfg)
    targets, default_out = _eval_targets(cfg)
    report = EvalReport(expected_runs=len(targets), dataset=manifest.name, config=cfg)
    datasets = {}
    for ckpt_dir, split_path in targets:
        model, meta = load_checkpoint(ckpt_dir)
        if not split_path.is_file():
            raise CommandFailed(f"split plan {split_path} not found", EXIT_IO)
        split = SplitPlan.from_dict(json.loads(split_path.read_text(encoding="utf-8")))
        tag = cfg.get("backbone") or meta.get("backbone_tag")
        if tag not in datasets:
            datasets[tag] = load_features(manifest, cfg["cache_dir"], tag)
        train_cfg = TrainConfig(use_std=meta.get("use_std", True), pooling=model.cfg.pooling)
        metrics = evaluate_model(model, datasets[tag], split.test, train_cfg)
        metrics.pop("predictions")
        report.runs.append({"run_index": split.run_index, "checkpoint": str(ckpt_dir), "status": "ok", **metrics})
    out = Path(cfg.get("out") or default_out)
    echo_config(out, args, cfg)
    (out / "eval_report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "eval_report.csv").write_text(report.to_csv(), encoding="utf-8")
    _print({"report": str(out / "eval_report.json"), "aggregate": report.aggregate})
    return EXIT_OK


# -- score -------------------------------------------------------------------------------

def cmd_score(args, cfg):
    _require(cfg, "video", "checkpoint")
    model, meta = load_checkpoint(cfg["checkpoint"])
    backbone = load_backbone(cfg.get("backbone") or meta.get("backbone_tag") or DEFAULTS["backbone"])
    record = extract_video_features(open_video(cfg["video"]), backbone)
    feats = record.payload
    if not meta.get("use_std", True):
        feats = feats[:, : feats.shape[1] // 2]
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        q = model.frame_scores(torch.as_tensor(feats).to(dtype))
        if model.cfg.pooling is None:
            approx, Q = q, q.mean()
        else:
            pooled = pool(q, model.cfg.pooling)
            approx, Q = pooled.approx_scores, pooled.Q
    lo, hi = meta.get("mos_range", (0.0, 100.0))

    def native(x):
        return lo + np.asarray(x, dtype=np.float64) * ((hi - lo) / 100.0)

    score = float(native(float(Q)))
    if cfg.get("curve"):
        with open(cfg["curve"], "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["frame", "q", "q_approx"])
            for t, (a, b) in enumerate(zip(native(q.double().numpy()), native(approx.double().numpy()))):
                writer.writerow([t, repr(float(a)), repr(float(b))])
    if cfg.get("out"):
        echo_config(cfg["out"], args, cfg)
    print(repr(score))
    return EXIT_OK


# -- sweep -------------------------------------------------------------------------------

def cmd_sweep(args, cfg):
    _require(cfg, "manifest", "out")
    base_cfg = {**cfg, "tau": DEFAULTS["tau"], "gamma": DEFAULTS["gamma"], "memory": "min"}
    base = _train_config(base_cfg)
    axes = cfg.get("axis") or ["gamma", "tau", "toggles"]
    cells = build_cells(base, axes, values=cfg.get("values"), toggles=cfg.get("toggles"))
    manifest = _manifest(cfg)
    dataset = load_features(manifest, cfg["cache_dir"], load_backbone_tag(cfg["backbone"]))
    out = Path(cfg["out"]) / manifest.name
    echo_config(out, args, cfg)
    results = run_sweep(dataset, cells, out_dir=out / "cells", jobs=int(cfg["jobs"]))
    summary = write_sweep(results, out)
    _print({"table": summary["table"], "plots": summary["plots"], "cells": len(results)})
    return EXIT_OK


# -- synth --------------------------------------------------------------------------------

def cmd_synth(args, cfg):
    _require(cfg, "out")
    pooling = PoolingConfig(tau=int(cfg.get("tau", 12)), gamma=float(cfg.get("gamma", 0.5)))
    out = Path(cfg["out"])
    if cfg.get("as_videos"):
        csv_path, mos = synthesize_videos(out, n_videos=int(cfg["videos"]), n_frames=int(cfg["frames"]),
                                          seed=int(cfg["seed"]), pooling=pooling)
        _print({"manifest": str(csv_path), "videos": len(mos)})
        return EXIT_OK
    spec = SyntheticSpec(n_videos=int(cfg["videos"]), n_frames=int(cfg["frames"]), feature_dim=int(cfg["dim"]),
                         noise=float(cfg["noise"]), seed=int(cfg["seed"]), pooling=pooling,
                         min_frames=cfg.get("min_frames"), content_rank=int(cfg.get("content_rank") or 0))
    dataset = synthesize_dataset(spec)
    cache_dir = cfg.get("cache_dir") if cfg.get("cache_dir") != DEFAULTS["cache_dir"] else None
    csv_path = write_synthetic(dataset, out, cache_dir=cache_dir or out / "cache")
    _print({"manifest": str(csv_path), "cache_dir": str(cache_dir or out / "cache"),
            "backbone": SYNTHETIC_TAG, "videos": len(dataset.records)})
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------

def _shared(p, out_required=False):
    p.add_argument("--config", help="JSON file with option values; flags override it")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="base random seed")
    p.add_argument("--cache-dir", dest="cache_dir", help="feature cache root")
    p.add_argument("--backbone", help="backbone tag or manifest JSON path")


def _training_flags(p):
    p.add_argument("--manifest", help="dataset CSV (source_id,video_path,mos)")
    p.add_argument("--mos-range", dest="mos_range", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--runs", type=int, help="number of split repetitions")
    p.add_argument("--epochs", type=int, help="maximum epochs per run")
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--patience", type=int, help="early-stop patience on validation SROCC")
    p.add_argument("--clip-norm", dest="clip_norm", type=float)
    p.add_argument("--zero-head-bias", dest="zero_head_bias", action="store_true",
                   help="start the score-head bias at 0 instead of the mean training MOS")
    p.add_argument("--jobs", type=int, help="parallel runs (processes)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wildvqa", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="extract and cache frame features for a manifest")
    _shared(p)
    p.add_argument("--manifest")
    p.add_argument("--mos-range", dest="mos_range", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--jobs", type=int, help="worker processes (default: CPU count)")

    p = sub.add_parser("train", help="run the multi-split training protocol")
    _shared(p)
    _training_flags(p)
    p.add_argument("--tau", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--memory", choices=["min", "mean"])
    p.add_argument("--no-std", dest="no_std", action="store_true", help="use only mean-pooled features")
    p.add_argument("--no-recurrent", dest="no_recurrent", action="store_true")
    p.add_argument("--average-pooling", dest="average_pooling", action="store_true")
    p.add_argument("--no-temporal", dest="no_temporal", action="store_true",
                   help="drop GRU and hysteresis pooling (frame-mean of affine scores)")

    p = sub.add_parser("eval", help="evaluate saved checkpoints on their test splits")
    _shared(p)
    p.add_argument("--manifest")
    p.add_argument("--mos-range", dest="mos_range", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--runs-dir", dest="runs_dir", help="directory holding run_* checkpoints")
    p.add_argument("--checkpoint", help="single checkpoint directory")
    p.add_argument("--split", help="split plan JSON for --checkpoint")

    p = sub.add_parser("score", help="score one video with a checkpoint")
    _shared(p)
    p.add_argument("video")
    p.add_argument("--checkpoint")
    p.add_argument("--curve", help="write per-frame scores to this CSV")

    p = sub.add_parser("sweep", help="pooling hyper-parameter sweeps and ablations")
    _shared(p)
    _training_flags(p)
    p.add_argument("--axis", action="append", choices=["gamma", "tau", "toggles"])
    p.add_argument("--values", type=float, nargs="+", help="restrict gamma/tau grid values")
    p.add_argument("--toggles", nargs="+", help="ablation toggles to run")

    p = sub.add_parser("synth", help="write a synthetic planted-model dataset")
    _shared(p)
    p.add_argument("--videos", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--min-frames", dest="min_frames", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--content-rank", dest="content_rank", type=int,
                   help="directions of per-video content variation unrelated to quality")
    p.add_argument("--tau", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--as-videos", dest="as_videos", action="store_true",
                   help="write .npz videos for the stub backbone instead of cached features")
    return parser


COMMANDS = {"extract": cmd_extract, "train": cmd_train, "eval": cmd_eval, "score": cmd_score,
            "sweep": cmd_sweep, "synth": cmd_synth}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except CommandFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ValidationError, DomainError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except DecodeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EXTRACTION
    except (TrainingError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (CacheNotFoundError, CacheCorruptionError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
