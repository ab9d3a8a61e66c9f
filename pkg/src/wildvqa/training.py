"""End-to-end training with L1 loss, Adam, validation-SROCC model selection."""

from __future__ import annotations

import copy
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import FeatureDataset, SplitPlan, make_splits
from .errors import DomainError, NumericError, ShapeError, TrainingError, UndefinedCorrelationError
from .features import FeatureCacheRecord
from .metrics import EvalReport, evaluate, srocc
from .model import ModelConfig, QualityModel, save_checkpoint
from .pooling import PoolingConfig

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 16
    max_epochs: int = 200
    patience: int = 50
    seed: int = 0
    runs: int = 10
    pooling: PoolingConfig | None = field(default_factory=PoolingConfig)
    recurrent: bool = True
    use_std: bool = True
    reduced_dim: int = 128
    hidden_dim: int = 32
    clip_norm: float = 10.0
    # start the score-head bias at the mean training target instead of 0
    init_head_bias: bool = True

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size < 1 or self.max_epochs < 1 or self.runs < 1:
            raise DomainError("learning rate must be >= 0; batch size, epochs and runs >= 1")
        if self.patience < 1 or self.clip_norm <= 0:
            raise DomainError("patience and clip_norm must be positive")
        if isinstance(self.pooling, dict):
            self.pooling = PoolingConfig(**self.pooling)

    def model_config(self, feature_dim: int) -> ModelConfig:
        return ModelConfig(feature_dim=feature_dim if self.use_std else feature_dim // 2,
                           reduced_dim=self.reduced_dim, hidden_dim=self.hidden_dim,
                           recurrent=self.recurrent, pooling=self.pooling)

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["pooling"] = None if self.pooling is None else self.pooling.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DomainError(f"unknown training options: {sorted(unknown)}")
        if d.get("pooling") is not None:
            d["pooling"] = PoolingConfig(**d["pooling"])
        return cls(**d)


@dataclass
class RunResult:
    run_index: int
    best_epoch: int
    best_val_srocc: float
    history: list
    test: dict
    clipped_steps: int = 0
    checkpoint: str | None = None
    state: dict | None = field(default=None, repr=False)

    def summary(self) -> dict:
        return {"run_index": self.run_index, "best_epoch": self.best_epoch,
                "best_val_srocc": self.best_val_srocc, "clipped_steps": self.clipped_steps,
                "checkpoint": self.checkpoint, **self.test}


def batch_assemble(records) -> tuple[torch.Tensor, list]:
    """Zero-pad feature matrices to a common length; returns ``(batch, lengths)``."""
    mats = [r.payload if isinstance(r, FeatureCacheRecord) else r for r in records]
    if not mats:
        raise ShapeError("cannot assemble an empty batch")
    mats = [torch.as_tensor(np.asarray(m)) for m in mats]
    dims = {m.shape[1] for m in mats}
    if len(dims) != 1:
        raise ShapeError(f"feature widths differ within batch: {sorted(dims)}")
    lengths = [m.shape[0] for m in mats]
    return torch.nn.utils.rnn.pad_sequence(mats, batch_first=True), lengths


def _inputs(mats, cfg: TrainConfig):
    if cfg.use_std:
        return mats
    return [m[:, : m.shape[1] // 2] for m in mats]


def predict(model: QualityModel, mats, batch_size: int = 64) -> np.ndarray:
    """Video scores on the model's own (training) scale, in eval mode."""
    was_training = model.training
    model.eval()
    out = []
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        for i in range(0, len(mats), batch_size):
            batch, lengths = batch_assemble(mats[i:i + batch_size])
            Q, _ = model(batch.to(dtype), lengths)
            out.append(Q.double().numpy())
    model.train(was_training)
    return np.concatenate(out)


def _safe_srocc(pred, target) -> float:
    try:
        return srocc(pred, target)
    except UndefinedCorrelationError:
        return float("nan")


def _param_norms(model):
    return {name: float(p.detach().norm()) for name, p in model.named_parameters()}


def evaluate_model(model: QualityModel, dataset: FeatureDataset, ids, cfg: TrainConfig | None = None) -> dict:
    cfg = cfg or TrainConfig()
    pred = dataset.manifest.to_native(predict(model, _inputs(dataset.select(ids), cfg)))
    metrics = evaluate(pred, dataset.targets(ids))
    metrics["predictions"] = dict(zip(ids, pred.tolist()))
    return metrics


def train_one_run(dataset: FeatureDataset, split: SplitPlan, cfg: TrainConfig, out_dir=None) -> RunResult:
    """Train one model on ``split.train``, keeping the epoch with the best validation SROCC."""
    seed = cfg.seed + split.run_index
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    manifest = dataset.manifest

    train_x = _inputs(dataset.select(split.train), cfg)
    train_y = manifest.to_unit(dataset.targets(split.train))
    val_x = _inputs(dataset.select(split.val), cfg)
    val_y = dataset.targets(split.val)

    model = QualityModel(cfg.model_config(dataset.dim), seed=seed)
    if cfg.init_head_bias:
        with torch.no_grad():
            model.head_bias.fill_(float(train_y.mean()))
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)

    history, clipped = [], 0
    best_epoch, best_val, best_state = 0, -math.inf, None
    since_best = 0
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        order = rng.permutation(len(train_x))
        total, count = 0.0, 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            batch, lengths = batch_assemble([train_x[i] for i in idx])
            target = torch.as_tensor(train_y[idx], dtype=batch.dtype)
            try:
                Q, _ = model(batch, lengths)
            except NumericError as exc:
                raise TrainingError(f"non-finite forward pass at epoch {epoch}, batch {b}: {exc}",
                                    {"epoch": epoch, "batch": b, "frame_index": exc.frame_index,
                                     "parameter_norms": _param_norms(model)}) from exc
            loss = torch.mean(torch.abs(Q - target))
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}",
                                    {"epoch": epoch, "batch": b, "parameter_norms": _param_norms(model)})
            optimizer.zero_grad()
            loss.backward()
            norm = torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
            if float(norm) > cfg.clip_norm:
                clipped += 1
            optimizer.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)

        val_pred = manifest.to_native(predict(model, val_x))
        val_srocc = _safe_srocc(val_pred, val_y)
        history.append({"epoch": epoch, "loss": total / count, "val_srocc": val_srocc})
        if best_state is None or (math.isfinite(val_srocc) and val_srocc > best_val):
            best_epoch, best_state = epoch, copy.deepcopy(model.state_dict())
            best_val = val_srocc if math.isfinite(val_srocc) else -math.inf
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break

    model.load_state_dict(best_state)
    test = evaluate_model(model, dataset, split.test, cfg)
    result = RunResult(run_index=split.run_index, best_epoch=best_epoch,
                       best_val_srocc=best_val if math.isfinite(best_val) else float("nan"),
                       history=history, test=test, clipped_steps=clipped, state=best_state)
    if out_dir is not None:
        result.checkpoint = str(write_run(out_dir, result, split, cfg, dataset))
    return result


def write_run(out_dir, result: RunResult, split: SplitPlan, cfg: TrainConfig, dataset: FeatureDataset) -> Path:
    run_dir = Path(out_dir) / f"run_{split.run_index}"
    model = QualityModel(cfg.model_config(dataset.dim))
    model.load_state_dict(result.state)
    save_checkpoint(run_dir, model, backbone_tag=dataset.backbone_tag, dataset=dataset.name,
                    mos_range=list(dataset.manifest.mos_range), use_std=cfg.use_std,
                    pooling=None if cfg.pooling is None else cfg.pooling.to_dict(),
                    seed=cfg.seed + split.run_index, epoch=result.best_epoch,
                    val_srocc=result.best_val_srocc, train_config=cfg.to_dict())
    (run_dir / "split.json").write_text(json.dumps(split.to_dict(), indent=2), encoding="utf-8")
    with open(run_dir / "train_log.jsonl", "w", encoding="utf-8") as fh:
        for row in result.history:
            fh.write(json.dumps({k: (None if isinstance(v, float) and not math.isfinite(v) else v)
                                 for k, v in row.items()}) + "\n")
    test = {k: v for k, v in result.test.items() if k != "predictions"}
    (run_dir / "test_metrics.json").write_text(
        json.dumps({**test, "predictions": result.test.get("predictions", {})}, indent=2, default=str),
        encoding="utf-8")
    return run_dir


def _run_job(args):
    dataset, split, cfg, out_dir = args
    return train_one_run(dataset, split, cfg, out_dir)


def run_protocol(dataset: FeatureDataset, cfg: TrainConfig, out_dir=None, jobs: int = 1,
                 splits=None) -> EvalReport:
    """Train and test on every split plan; aggregate test metrics over runs."""
    splits = splits if splits is not None else make_splits(dataset.manifest, cfg.seed, cfg.runs)
    run_root = None if out_dir is None else Path(out_dir)
    report = EvalReport(expected_runs=len(splits), mapping="test-fit", dataset=dataset.name,
                        config=cfg.to_dict())
    jobs_args = [(dataset, s, cfg, run_root) for s in splits]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_job, a) for a in jobs_args]
            outcomes = []
            for s, f in zip(splits, futures):
                try:
                    outcomes.append((s, f.result(), None))
                except Exception as exc:  # noqa: BLE001 - record and continue
                    outcomes.append((s, None, exc))
    else:
        outcomes = []
        for a in jobs_args:
            try:
                outcomes.append((a[1], _run_job(a), None))
            except (TrainingError, NumericError) as exc:
                outcomes.append((a[1], None, exc))
    for split, result, exc in outcomes:
        if result is None:
            log.error("run %d failed: %s", split.run_index, exc)
            report.runs.append({"run_index": split.run_index, "status": "failed", "error": str(exc)})
            continue
        row = {k: v for k, v in result.summary().items() if k != "predictions"}
        row["status"] = "ok"
        report.runs.append(row)
        log.info("run %d: test SROCC %.4f (best epoch %d)", split.run_index, row["srocc"], result.best_epoch)
    if run_root is not None:
        run_root.mkdir(parents=True, exist_ok=True)
        (run_root / "report.json").write_text(report.to_json(), encoding="utf-8")
        (run_root / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    return report
