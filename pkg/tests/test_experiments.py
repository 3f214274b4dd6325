import numpy as np
import pytest

from mcpanel.dgp import DgpConfig
from mcpanel.experiments import (
    RUN_COLUMNS,
    VARIANTS,
    RunSettings,
    evaluate_run,
    plan_replication,
    rejection_rates,
    run_seed,
    scaled_runs,
    simulate,
    summarize,
    worker_count,
)
from mcpanel.selection import GridSpec

FAST = RunSettings(folds=3, grid=GridSpec(n_points=2, min_ratio=0.05))
SMALL = DgpConfig(N=12, T=10, p=4, q=3, B=5, h_prob=0.3, b_prob=0.3, exact_count_bernoulli=True, seed=3)


@pytest.fixture(scope="module")
def rows():
    return evaluate_run(SMALL, FAST)


def test_evaluate_run_rows(rows):
    assert [r["variant"] for r in rows] == list(VARIANTS)
    assert all(set(RUN_COLUMNS) <= set(r) for r in rows)
    by = {r["variant"]: r for r in rows}
    assert by["imp0"]["indexed_sq_error"] == pytest.approx(1.0)
    assert by["no_reg"]["lambda_H"] == 0 and by["no_reg"]["lambda_beta"] == 0
    assert np.isnan(by["not0"]["p_value"]) and 0 < by["imp0"]["p_value"] <= 1
    assert by["imp0_rot"]["p_value"] == by["imp0"]["p_value"]
    assert by["imp0_rot"]["tau_hat"] > by["imp0"]["tau_hat"] or by["imp0"]["tau_hat"] <= 0
    assert by["imp0_post"]["size_H"] <= by["imp0"]["size_H"]
    assert by["imp0"]["true_size_H"] == round(12 * 0.3)


def test_evaluate_run_is_deterministic(rows):
    again = evaluate_run(SMALL, FAST)
    assert again == rows or all(
        (a[k] == b[k]) or (isinstance(a[k], float) and np.isnan(a[k]) and np.isnan(b[k]))
        for a, b in zip(rows, again) for k in a)


def test_seeds_are_distinct():
    seeds = {run_seed(0, s, r) for s in range(3) for r in range(50)}
    assert len(seeds) == 150
    assert run_seed(5, 1, 2) == run_seed(5, 1, 2)


def test_simulate_and_rates():
    out = simulate(SMALL.replace(tau=0.0), 2, FAST, seed=1, workers=1)
    assert len(out) == 2 * len(VARIANTS) and {r["run"] for r in out} == {0, 1}
    rates = rejection_rates(out, alphas=(0.1,))
    assert {r["variant"] for r in rates} == {"imp0", "imp0_rot", "imp0_post", "imp0_1se"}


def test_summarize(rows):
    table = summarize(rows, ("tau_hat", "size_ratio_H"), "x")
    assert len(table) == 2 * len(VARIANTS)
    r = table[0]
    assert r["min"] <= r["q25"] <= r["median"] <= r["q75"] <= r["max"]


def test_plan_scaling():
    plan = plan_replication("fig5", 0.2)
    assert plan.runs == scaled_runs(700, 0.2) == 6
    assert [c.T for c in plan.configs] == [4, 8, 16, 32, 64, 128]
    assert all(c.N == 20 and c.p == 10 and c.q == 4 and c.B == 40 for c in plan.configs)
    assert all(c.rank_L <= min(c.N, c.T) for c in plan.configs)
    snr = plan_replication("fig10", 0.25, runs=3)
    assert snr.runs == 3 and len({c.sigma_eps for c in snr.configs}) == 5
    assert plan_replication("fig3", 1.0).runs == 700
    with pytest.raises(ValueError):
        plan_replication("fig6")
    with pytest.raises(ValueError):
        plan_replication("fig3", 0.0)


def test_worker_count(monkeypatch):
    monkeypatch.delenv("MCPANEL_WORKERS", raising=False)
    assert worker_count() == 1
    monkeypatch.setenv("MCPANEL_WORKERS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("MCPANEL_WORKERS", "many")
    with pytest.raises(ValueError):
        worker_count()


def test_parallel_matches_serial():
    a = simulate(SMALL, 2, FAST, seed=4, workers=1)
    b = simulate(SMALL, 2, FAST, seed=4, workers=2)
    assert [r["tau_hat"] for r in a] == [r["tau_hat"] for r in b]
