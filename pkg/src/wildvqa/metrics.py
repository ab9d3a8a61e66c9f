"""Correlation metrics, logistic score calibration and run aggregation."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from .errors import DomainError, FitError, UndefinedCorrelationError

METRICS = ("srocc", "krocc", "plcc", "rmse")


def _pair(o, s, min_n: int = 2) -> tuple[np.ndarray, np.ndarray]:
    o = np.asarray(o, dtype=np.float64).ravel()
    s = np.asarray(s, dtype=np.float64).ravel()
    if o.shape != s.shape:
        raise DomainError(f"length mismatch: {o.size} objective vs {s.size} subjective scores")
    if o.size < min_n:
        if min_n == 2:
            raise UndefinedCorrelationError("correlation needs at least two score pairs")
        raise DomainError("no score pairs given")
    return o, s


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation undefined for a constant vector")
    r = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def pearson(o, s) -> float:
    return _pearson(*_pair(o, s))


def srocc(o, s) -> float:
    """Spearman correlation with average ranks for ties."""
    o, s = _pair(o, s)
    return _pearson(rankdata(o), rankdata(s))


def krocc(o, s) -> float:
    """Kendall tau-b over all pairs."""
    o, s = _pair(o, s)
    iu = np.triu_indices(o.size, k=1)
    so = np.sign(o[:, None] - o[None, :])[iu]
    ss = np.sign(s[:, None] - s[None, :])[iu]
    n0 = so.size
    untied_o = n0 - int(np.count_nonzero(so == 0))
    untied_s = n0 - int(np.count_nonzero(ss == 0))
    if untied_o == 0 or untied_s == 0:
        raise UndefinedCorrelationError("Kendall tau undefined when one vector is all ties")
    r = float(np.dot(so, ss)) / math.sqrt(float(untied_o) * float(untied_s))
    return min(1.0, max(-1.0, r))


def rmse(o, s) -> float:
    o, s = _pair(o, s, min_n=1)
    return math.sqrt(float(np.mean((o - s) ** 2)))


# -- four-parameter logistic mapping ---------------------------------------

@dataclass(frozen=True)
class LogisticParams:
    tau1: float
    tau2: float
    tau3: float
    tau4: float

    def as_array(self) -> np.ndarray:
        return np.array([self.tau1, self.tau2, self.tau3, self.tau4], dtype=np.float64)

    def to_dict(self):
        return {"tau1": self.tau1, "tau2": self.tau2, "tau3": self.tau3, "tau4": self.tau4}


@dataclass
class LogisticFit:
    params: LogisticParams
    sse: float
    iterations: int
    converged: bool
    max_abs_residual: float
    history: list = field(default_factory=list)


def logistic(o, params) -> np.ndarray:
    t1, t2, t3, t4 = params.as_array() if isinstance(params, LogisticParams) else params
    return (t1 - t2) * expit((np.asarray(o, dtype=np.float64) - t3) / t4) + t2


def _jacobian(o: np.ndarray, p: np.ndarray) -> np.ndarray:
    t1, t2, t3, t4 = p
    u = (o - t3) / t4
    g = expit(u)
    dg = (t1 - t2) * g * (1.0 - g)
    return np.column_stack([g, 1.0 - g, -dg / t4, -dg * u / t4])


def initial_logistic_params(o, s) -> LogisticParams:
    o, s = _pair(o, s)
    return LogisticParams(float(s.max()), float(s.min()), float(o.mean()), float(o.std()) / 4.0)


def fit_logistic(o, s, max_iter: int = 2000, rtol: float = 1e-10) -> LogisticFit:
    """Damped least-squares fit of the monotone logistic mapping ``o -> s``.

    Each accepted step strictly lowers the sum of squared residuals; the
    objective after every accepted step is kept in ``history``.
    """
    o, s = _pair(o, s)
    if o.size < 5:
        raise DomainError(f"logistic fit needs at least 5 pairs, got {o.size}")
    if np.ptp(o) == 0.0:
        raise DomainError("logistic fit needs non-constant objective scores")

    p = initial_logistic_params(o, s).as_array()
    r = logistic(o, p) - s
    sse = float(r @ r)
    history = [sse]
    scale_floor = 1e-30 * max(1.0, float(s @ s))
    # fits whose optimum lies at tau4 -> inf (near-linear data) creep forever;
    # stop once an accepted step moves no fitted value by more than this
    xtol = 1e-8 * max(float(s.std()), 1e-300)
    lam = 1e-3
    converged = sse <= scale_floor

    it = 0
    while not converged and it < max_iter:
        it += 1
        J = _jacobian(o, p)
        JtJ = J.T @ J
        g = J.T @ r
        damping = np.diag(np.maximum(np.diag(JtJ), 1e-12))
        try:
            step = np.linalg.solve(JtJ + lam * damping, -g)
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        trial = p + step
        if trial[3] == 0.0 or not np.all(np.isfinite(trial)):
            lam *= 10.0
            continue
        r_trial = logistic(o, trial) - s
        sse_trial = float(r_trial @ r_trial)
        if np.isfinite(sse_trial) and sse_trial < sse:
            rel = (sse - sse_trial) / max(sse, 1e-300)
            moved = float(np.abs(r_trial - r).max())
            p, r, sse = trial, r_trial, sse_trial
            history.append(sse)
            lam = max(lam / 10.0, 1e-12)
            if rel < rtol or sse <= scale_floor or moved < xtol:
                converged = True
        else:
            lam *= 10.0
            if lam > 1e16:
                # no descent direction left at working precision
                converged = True

    params = LogisticParams(*map(float, p))
    if not converged:
        raise FitError(f"logistic fit did not converge in {max_iter} iterations", params=params, residual=sse)
    return LogisticFit(params=params, sse=sse, iterations=it, converged=True,
                       max_abs_residual=float(np.abs(r).max()), history=history)


def plcc_rmse(o, s, use_mapping: bool = True, params: LogisticParams | None = None) -> tuple[float, float]:
    """PLCC and RMSE between (optionally logistic-mapped) predictions and MOS.

    With ``use_mapping`` and no ``params``, the mapping is fitted on these
    pairs; pass ``params`` to reuse a mapping fitted elsewhere.
    """
    o, s = _pair(o, s)
    if use_mapping:
        if params is None:
            params = fit_logistic(o, s).params
        o = logistic(o, params)
    return _pearson(o, s), math.sqrt(float(np.mean((o - s) ** 2)))


def weighted_overall(per_db: Iterable[tuple[float, float]]) -> float:
    per_db = list(per_db)
    if not per_db:
        raise DomainError("no databases to aggregate")
    sizes = np.array([n for _, n in per_db], dtype=np.float64)
    if np.any(sizes <= 0):
        raise DomainError("database sizes must be positive")
    values = np.array([v for v, _ in per_db], dtype=np.float64)
    return float(np.dot(sizes, values) / sizes.sum())


# -- evaluation of one prediction set ---------------------------------------

def evaluate(pred, mos, mapping_params: LogisticParams | None = None) -> dict:
    """All four criteria for one test set.

    ``plcc``/``rmse`` use the logistic mapping (fitted on these pairs unless
    ``mapping_params`` is given); ``plcc_raw``/``rmse_raw`` skip it.
    """
    pred, mos = _pair(pred, mos, min_n=1)
    out = {"n": int(pred.size)}
    for name, fn in (("srocc", srocc), ("krocc", krocc)):
        try:
            out[name] = fn(pred, mos)
        except UndefinedCorrelationError:
            out[name] = float("nan")
    try:
        out["plcc_raw"], out["rmse_raw"] = plcc_rmse(pred, mos, use_mapping=False)
    except UndefinedCorrelationError:
        out["plcc_raw"], out["rmse_raw"] = float("nan"), rmse(pred, mos)

    out["mapping"] = "given" if mapping_params is not None else "test-fit"
    out["mapping_converged"] = True
    params = mapping_params
    try:
        if params is None:
            params = fit_logistic(pred, mos).params
    except FitError as exc:
        params = exc.params
        out["mapping_converged"] = False
    except DomainError:
        params = None
    if params is None:
        out["plcc"], out["rmse"] = out["plcc_raw"], out["rmse_raw"]
        out["mapping"] = "none"
    else:
        try:
            out["plcc"], out["rmse"] = plcc_rmse(pred, mos, use_mapping=True, params=params)
        except UndefinedCorrelationError:
            out["plcc"], out["rmse"] = float("nan"), rmse(logistic(pred, params), mos)
        out["logistic"] = params.to_dict()
    return out


# -- reports -----------------------------------------------------------------

def _clean(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return _clean(x.item())
    return x


def aggregate(values: Sequence[float]) -> dict:
    """Mean and population std of finite values; std is 0.0 for a single run."""
    arr = np.array([v for v in values if v is not None and math.isfinite(v)], dtype=np.float64)
    if arr.size == 0:
        return {"mean": float("nan"), "std": float("nan"), "n": 0}
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": int(arr.size)}


@dataclass
class EvalReport:
    runs: list = field(default_factory=list)
    expected_runs: int | None = None
    mapping: str = "test-fit"
    dataset: str = ""
    config: dict = field(default_factory=dict)
    weighted: dict | None = None

    @property
    def complete(self) -> bool:
        n = self.expected_runs if self.expected_runs is not None else len(self.runs)
        ok = [r for r in self.runs if r.get("status", "ok") == "ok"]
        return len(ok) == n

    @property
    def aggregate(self) -> dict:
        keys = list(METRICS) + ["plcc_raw", "rmse_raw"]
        ok = [r for r in self.runs if r.get("status", "ok") == "ok"]
        return {k: aggregate([r.get(k, float("nan")) for r in ok]) for k in keys}

    def per_run(self, metric: str) -> list:
        return [r.get(metric) for r in self.runs]

    def to_dict(self) -> dict:
        return _clean({
            "dataset": self.dataset,
            "mapping": self.mapping,
            "complete": self.complete,
            "expected_runs": self.expected_runs,
            "runs": self.runs,
            "aggregate": self.aggregate,
            "weighted_overall": self.weighted,
            "config": self.config,
        })

    def to_json(self, indent=2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        runs = [{k: (float("nan") if v is None and k in METRICS else v) for k, v in r.items()} for r in d["runs"]]
        return cls(runs=runs, expected_runs=d.get("expected_runs"), mapping=d.get("mapping", "test-fit"),
                   dataset=d.get("dataset", ""), config=d.get("config", {}), weighted=d.get("weighted_overall"))

    def table_row(self, label: str | None = None) -> dict:
        agg = self.aggregate
        row = {"method": label or self.dataset}
        for k in METRICS:
            row[k.upper()] = f"{agg[k]['mean']:.3f} (± {agg[k]['std']:.3f})"
        return row

    def to_csv(self, label: str | None = None) -> str:
        return rows_to_csv([self.table_row(label)])


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
