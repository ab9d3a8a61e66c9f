import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wildvqa.errors import DomainError, FitError, UndefinedCorrelationError
from wildvqa.metrics import (EvalReport, LogisticParams, aggregate, evaluate, fit_logistic, initial_logistic_params,
                             krocc, logistic, plcc_rmse, rmse, srocc, weighted_overall)


# -- brute-force oracles ------------------------------------------------------------

def oracle_ranks(x):
    """Average ranks by counting: rank = #smaller + (#equal + 1) / 2."""
    x = list(x)
    return [sum(v < xi for v in x) + (sum(v == xi for v in x) + 1) / 2 for xi in x]


def oracle_pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def oracle_kendall_b(x, y):
    conc = disc = tx = ty = 0
    for i, j in itertools.combinations(range(len(x)), 2):
        dx, dy = x[i] - x[j], y[i] - y[j]
        if dx == 0 and dy == 0:
            tx += 1
            ty += 1
        elif dx == 0:
            tx += 1
        elif dy == 0:
            ty += 1
        elif dx * dy > 0:
            conc += 1
        else:
            disc += 1
    n0 = len(x) * (len(x) - 1) // 2
    return (conc - disc) / math.sqrt((n0 - tx) * (n0 - ty))


def random_instances(count=100, seed=0):
    rng = np.random.default_rng(seed)
    for k in range(count):
        n = int(rng.integers(5, 101))
        if k % 3 == 0:
            # integer-valued draws give plenty of ties
            o = rng.integers(0, 8, size=n).astype(float)
            s = rng.integers(0, 8, size=n).astype(float)
        else:
            o = rng.normal(size=n)
            s = 0.5 * o + rng.normal(size=n)
        if np.ptp(o) == 0 or np.ptp(s) == 0:
            continue
        yield o, s


def test_srocc_examples():
    assert srocc([1, 2, 3], [10, 20, 30]) == 1.0
    assert srocc([1, 2, 3], [30, 20, 10]) == -1.0
    o, s = [1, 2, 2, 3], [1, 2, 3, 4]
    assert srocc(o, s) == pytest.approx(oracle_pearson(oracle_ranks(o), oracle_ranks(s)), abs=1e-12)


def test_krocc_examples():
    assert krocc([1, 2, 3], [1, 3, 2]) == 1 / 3
    v = np.random.default_rng(0).normal(size=20)
    assert krocc(v, v) == 1.0


def test_oracle_agreement_on_random_instances():
    count = 0
    for o, s in random_instances():
        count += 1
        assert abs(srocc(o, s) - oracle_pearson(oracle_ranks(o), oracle_ranks(s))) < 1e-10
        assert abs(krocc(o, s) - oracle_kendall_b(list(o), list(s))) < 1e-10
        p, r = plcc_rmse(o, s, use_mapping=False)
        assert abs(p - oracle_pearson(list(o), list(s))) < 1e-10
        assert abs(r - math.sqrt(sum((a - b) ** 2 for a, b in zip(o, s)) / len(o))) < 1e-10
    assert count >= 95


def test_mapped_plcc_rmse_match_oracle():
    rng = np.random.default_rng(4)
    o = rng.uniform(0, 10, size=60)
    s = logistic(o, LogisticParams(80, 20, 5, 1.5)) + rng.normal(0, 2, size=60)
    fit = fit_logistic(o, s)
    mapped = logistic(o, fit.params)
    p, r = plcc_rmse(o, s, use_mapping=True)
    assert abs(p - oracle_pearson(list(mapped), list(s))) < 1e-10
    assert abs(r - math.sqrt(sum((a - b) ** 2 for a, b in zip(mapped, s)) / 60)) < 1e-10


def test_undefined_correlations():
    with pytest.raises(UndefinedCorrelationError):
        srocc([1, 1, 1], [1, 2, 3])
    with pytest.raises(UndefinedCorrelationError):
        krocc([1, 2, 3], [4, 4, 4])
    with pytest.raises(UndefinedCorrelationError):
        srocc([1], [2])
    with pytest.raises(DomainError):
        rmse([1, 2], [1, 2, 3])


def test_plcc_without_mapping():
    v = np.arange(10.0)
    assert plcc_rmse(v, v, use_mapping=False) == (1.0, 0.0)
    assert plcc_rmse(v, -3 * v + 2, use_mapping=False)[0] == -1.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-1000, 1000), min_size=3, max_size=40, unique=True),
       st.integers(0, 10_000))
def test_rank_metrics_invariant_to_monotone_transform(o, seed):
    rng = np.random.default_rng(seed)
    o = np.array(o, dtype=float)
    s = rng.permutation(len(o)).astype(float)
    warped = np.arctan(o / 100.0) * 7 + 1
    assert srocc(warped, s) == pytest.approx(srocc(o, s), abs=1e-12)
    assert krocc(warped, np.exp(s / 10)) == pytest.approx(krocc(o, s), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10)), min_size=2, max_size=30))
def test_correlations_bounded_and_symmetric(pairs):
    o = np.array([p[0] for p in pairs])
    s = np.array([p[1] for p in pairs])
    for fn in (srocc, krocc):
        try:
            v = fn(o, s)
        except UndefinedCorrelationError:
            continue
        assert -1.0 <= v <= 1.0
        assert fn(s, o) == pytest.approx(v, abs=1e-12)


# -- logistic mapping ------------------------------------------------------------------

def test_logistic_self_consistency():
    o = np.linspace(-5, 5, 41)
    s = logistic(o, LogisticParams(5.0, 1.0, 0.0, 1.0))
    fit = fit_logistic(o, s)
    assert fit.converged
    assert fit.max_abs_residual < 1e-6
    assert np.abs(logistic(o, fit.params) - s).max() < 1e-6


def test_identity_data_fits_closely():
    o = np.linspace(0, 100, 50)
    fit = fit_logistic(o, o.copy())
    assert math.sqrt(np.mean((logistic(o, fit.params) - o) ** 2)) < 1e-3


def test_initialisation_rule():
    o = np.array([1.0, 2.0, 3.0, 4.0, 10.0])
    s = np.array([3.0, 1.0, 4.0, 1.0, 5.0])
    p = initial_logistic_params(o, s)
    assert (p.tau1, p.tau2, p.tau3) == (5.0, 1.0, 4.0)
    assert p.tau4 == pytest.approx(np.sqrt(np.mean((o - 4.0) ** 2)) / 4)


def test_fit_preconditions():
    with pytest.raises(DomainError):
        fit_logistic([1, 2, 3, 4], [1, 2, 3, 4])
    with pytest.raises(DomainError):
        fit_logistic([2, 2, 2, 2, 2], [1, 2, 3, 4, 5])


def test_objective_decreases_per_accepted_step():
    rng = np.random.default_rng(7)
    for _ in range(20):
        o = rng.uniform(0, 1, 40)
        s = logistic(o, LogisticParams(4, 1, 0.5, 0.1)) + rng.normal(0, 0.2, 40)
        try:
            fit = fit_logistic(o, s)
        except FitError:
            continue
        h = np.array(fit.history)
        assert np.all(np.diff(h) < 0)


def test_fit_error_carries_best_params():
    o = np.linspace(0, 1, 20)
    s = np.sin(9 * o)
    with pytest.raises(FitError) as err:
        fit_logistic(o, s, max_iter=2)
    assert isinstance(err.value.params, LogisticParams)
    assert err.value.residual is not None


# -- aggregation and reports ---------------------------------------------------------------

def test_weighted_overall():
    assert round(weighted_overall([(0.755, 1200), (0.737, 208), (0.880, 234)]), 3) == 0.771
    assert weighted_overall([(0.42, 17)]) == 0.42
    assert weighted_overall([(0.6, 3), (0.6, 100)]) == pytest.approx(0.6, abs=1e-15)
    with pytest.raises(DomainError):
        weighted_overall([])


def test_evaluate_fields():
    rng = np.random.default_rng(0)
    mos = rng.uniform(1, 5, 30)
    pred = mos + rng.normal(0, 0.3, 30)
    out = evaluate(pred, mos)
    assert out["n"] == 30
    assert out["mapping"] == "test-fit"
    assert {"srocc", "krocc", "plcc", "rmse", "plcc_raw", "rmse_raw", "logistic"} <= set(out)
    assert out["rmse"] >= 0 and -1 <= out["plcc"] <= 1
    given_params = LogisticParams(**out["logistic"])
    again = evaluate(pred, mos, mapping_params=given_params)
    assert again["mapping"] == "given"
    assert again["plcc"] == pytest.approx(out["plcc"], abs=1e-12)


def test_evaluate_small_sets_degrade_gracefully():
    out = evaluate([3.0], [2.0])
    assert math.isnan(out["srocc"]) and out["rmse"] == 1.0 and out["mapping"] == "none"


def test_report_aggregates_match_hand_computation():
    rng = np.random.default_rng(1)
    rows = [{"run_index": k, "srocc": float(v), "krocc": float(v) - 0.1, "plcc": 0.9, "rmse": 1.0 + k,
             "plcc_raw": 0.9, "rmse_raw": 2.0} for k, v in enumerate(rng.uniform(0.7, 0.9, 10))]
    report = EvalReport(runs=rows, expected_runs=10)
    vals = np.array([r["srocc"] for r in rows])
    assert report.aggregate["srocc"]["mean"] == pytest.approx(vals.mean(), abs=1e-15)
    assert report.aggregate["srocc"]["std"] == pytest.approx(np.sqrt(np.mean((vals - vals.mean()) ** 2)), abs=1e-15)
    assert report.complete
    back = EvalReport.from_dict(json.loads(report.to_json()))
    assert back.aggregate == report.aggregate
    assert report.to_csv("ours").splitlines()[0] == "method,SROCC,KROCC,PLCC,RMSE"


def test_single_run_std_is_zero_and_incomplete_flag():
    assert aggregate([0.8]) == {"mean": 0.8, "std": 0.0, "n": 1}
    report = EvalReport(runs=[{"run_index": 0, "srocc": 0.5}, {"run_index": 1, "status": "failed"}],
                        expected_runs=2)
    assert not report.complete
    assert report.aggregate["srocc"]["n"] == 1
