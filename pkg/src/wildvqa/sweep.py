"""Hyper-parameter sweeps and ablation toggles over the training protocol."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import FeatureDataset
from .errors import DomainError
from .metrics import METRICS, EvalReport, rows_to_csv
from .pooling import PoolingConfig
from .training import TrainConfig, run_protocol

GAMMA_GRID = tuple(round(0.1 * k, 1) for k in range(1, 10))
TAU_GRID = (6, 12, 18, 24, 30)
GAMMA_AXIS_TAU = 12
TAU_AXIS_GAMMA = 0.5


def _pooling(cfg: TrainConfig) -> PoolingConfig:
    return cfg.pooling if cfg.pooling is not None else PoolingConfig()


def _full(cfg):
    return replace(cfg, pooling=_pooling(cfg), recurrent=True, use_std=True)


def _no_std(cfg):
    return replace(_full(cfg), use_std=False)


def _no_temporal(cfg):
    # affine frame scores averaged over time: no GRU, no hysteresis pooling
    return replace(cfg, recurrent=False, pooling=None, use_std=True)


def _no_recurrent(cfg):
    return replace(_full(cfg), recurrent=False)


def _average_pooling(cfg):
    return replace(_full(cfg), pooling=None)


def _average_memory(cfg):
    return replace(_full(cfg), pooling=replace(_pooling(cfg), memory="mean"))


TOGGLES = {
    "full": _full,
    "no-std-pooling": _no_std,
    "no-temporal-module": _no_temporal,
    "no-recurrent": _no_recurrent,
    "average-pooling": _average_pooling,
    "average-memory": _average_memory,
}
DEFAULT_TOGGLES = ("full", "no-std-pooling", "no-temporal-module", "average-memory")


@dataclass(frozen=True)
class Cell:
    axis: str
    label: str
    value: object
    config: TrainConfig


def build_cells(base: TrainConfig, axes, values=None, toggles=None) -> list:
    cells = []
    for axis in axes:
        if axis == "gamma":
            for g in values or GAMMA_GRID:
                pooling = replace(_pooling(base), tau=GAMMA_AXIS_TAU, gamma=float(g))
                cells.append(Cell("gamma", f"gamma={g}", float(g), replace(base, pooling=pooling)))
        elif axis == "tau":
            for t in values or TAU_GRID:
                if float(t) != int(t):
                    raise DomainError(f"tau values must be integers, got {t}")
                pooling = replace(_pooling(base), tau=int(t), gamma=TAU_AXIS_GAMMA)
                cells.append(Cell("tau", f"tau={int(t)}", int(t), replace(base, pooling=pooling)))
        elif axis == "toggles":
            for name in toggles or DEFAULT_TOGGLES:
                if name not in TOGGLES:
                    raise DomainError(f"unknown toggle {name!r}; choose from {sorted(TOGGLES)}")
                cells.append(Cell("toggles", name, name, TOGGLES[name](base)))
        else:
            raise DomainError(f"unknown sweep axis {axis!r}")
    return cells


def run_sweep(dataset: FeatureDataset, cells, out_dir=None, jobs: int = 1) -> list:
    """Run the full protocol per cell; returns ``[(cell, EvalReport)]``."""
    results = []
    for cell in cells:
        sub = None if out_dir is None else Path(out_dir) / cell.axis / cell.label.replace("=", "_")
        results.append((cell, run_protocol(dataset, cell.config, out_dir=sub, jobs=jobs)))
    return results


def results_table(results) -> list:
    rows = []
    for cell, report in results:
        agg = report.aggregate
        row = {"axis": cell.axis, "cell": cell.label, "value": cell.value, "runs": len(report.runs)}
        for k in METRICS:
            row[k.upper()] = f"{agg[k]['mean']:.3f} (± {agg[k]['std']:.3f})"
        for k in METRICS:
            row[f"{k}_mean"] = agg[k]["mean"]
            row[f"{k}_std"] = agg[k]["std"]
        rows.append(row)
    return rows


def plot_axis(results, axis: str, out_dir) -> list:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    subset = [(c, r) for c, r in results if c.axis == axis]
    if not subset:
        return []
    labels = [c.label for c, _ in subset]
    per_run = [[v for v in r.per_run("srocc") if v is not None and np.isfinite(v)] for _, r in subset]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.boxplot(per_run)
    ax.set_xticks(range(1, len(labels) + 1), labels, rotation=30, ha="right")
    ax.set_ylabel("test SROCC")
    ax.set_title(f"{axis}: per-run SROCC")
    fig.tight_layout()
    paths.append(out_dir / f"sweep_{axis}_box.png")
    fig.savefig(paths[-1], dpi=100)
    plt.close(fig)

    if axis in ("gamma", "tau"):
        xs = [c.value for c, _ in subset]
        means = [np.mean(v) if v else np.nan for v in per_run]
        stds = [np.std(v) if v else np.nan for v in per_run]
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.errorbar(xs, means, yerr=stds, marker="o", capsize=3)
        ax.set_xlabel(axis)
        ax.set_ylabel("test SROCC")
        ax.set_title(f"SROCC vs {axis}")
        fig.tight_layout()
        paths.append(out_dir / f"sweep_{axis}_line.png")
        fig.savefig(paths[-1], dpi=100)
        plt.close(fig)
    return paths


def write_sweep(results, out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = results_table(results)
    (out_dir / "sweep_results.csv").write_text(rows_to_csv(rows), encoding="utf-8")
    payload = [{"axis": c.axis, "cell": c.label, "value": c.value, "report": r.to_dict()} for c, r in results]
    (out_dir / "sweep_results.json").write_text(json.dumps(payload, indent=2), encoding="utf-8")
    plots = []
    for axis in dict.fromkeys(c.axis for c, _ in results):
        plots.extend(plot_axis(results, axis, out_dir))
    return {"table": str(out_dir / "sweep_results.csv"), "plots": [str(p) for p in plots], "rows": rows}


def load_sweep(path) -> list:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return [(d["axis"], d["cell"], EvalReport.from_dict(d["report"])) for d in data]
