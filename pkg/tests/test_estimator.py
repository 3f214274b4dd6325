import warnings

import numpy as np
import pytest

import mcpanel.estimator as est
from mcpanel.dgp import DgpConfig, generate
from mcpanel.estimator import (
    ConvergenceWarning,
    Design,
    EmptyControlSetError,
    Mode,
    PenaltyConfig,
    fit,
    fit_design,
    fit_post,
    kkt_violations,
    lambda_max,
    lambda_max_design,
)
from mcpanel.panel import PanelData, predict_y0

TIGHT = dict(max_iterations=20000, rel_tolerance=1e-14)


def objective(panel, params, mask, lam):
    R = np.where(mask, panel.Y - predict_y0(panel, params), 0.0)
    return (np.sum(R ** 2) / mask.sum() + lam[0] * np.linalg.svd(params.L, compute_uv=False).sum())


def test_mode_parse():
    assert Mode.parse("imposed-null") is Mode.IMPOSED_NULL
    assert Mode.parse("control_only") is Mode.CONTROL_ONLY
    with pytest.raises(ValueError):
        Mode.parse("both")


def test_penalty_config_validation():
    with pytest.raises(ValueError):
        PenaltyConfig(-1.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        PenaltyConfig(0.0, 0.0, 0.0, max_iterations=0)
    p = PenaltyConfig(1, 2, 3)
    assert p.triple == (1.0, 2.0, 3.0) and type(p.lambda_L) is float
    assert p.with_lambdas(0, 0, 0).max_iterations == p.max_iterations


def test_design_row_layout(small_panel):
    panel, _, _ = small_panel
    d = Design.build(panel, standardize=False)
    N, T = panel.shape
    np.testing.assert_allclose(d.D[1 * panel.Q + 2].reshape(N, T), np.outer(panel.X[:, 1], panel.Z[2]))
    np.testing.assert_allclose(d.D[d.n_H + 3].reshape(N, T), panel.V[:, :, 3])


@pytest.mark.parametrize("mode", ["imposed_null", "control_only"])
def test_kkt_at_convergence(small_panel, mode):
    panel, _, _ = small_panel
    design = Design.build(panel)
    lm = lambda_max_design(design, design.mask_for(Mode.parse(mode)))
    res = fit_design(design, PenaltyConfig(0.2 * lm.L, 0.1 * lm.H, 0.1 * lm.beta, **TIGHT), mode)
    assert res.converged
    assert max(kkt_violations(design, res).values()) < 1e-6


def test_objective_trace_nonincreasing(small_panel):
    panel, _, _ = small_panel
    res = fit(panel, PenaltyConfig(0.05, 0.01, 0.01, **TIGHT), "imposed_null")
    tr = res.objective_trace
    assert np.all(np.diff(tr) <= 1e-12 * np.abs(tr[:-1]) + 1e-15)


def test_gram_and_residual_paths_agree(small_panel, monkeypatch):
    panel, _, _ = small_panel
    pen = PenaltyConfig(0.1, 0.02, 0.02, **TIGHT)
    a = fit(panel, pen, "control_only")
    monkeypatch.setattr(est, "GRAM_MAX_FEATURES", 0)
    b = fit(panel, pen, "control_only")
    assert abs(a.objective - b.objective) < 1e-7 * abs(a.objective)
    np.testing.assert_allclose(predict_y0(panel, a.params), predict_y0(panel, b.params), atol=1e-4)


def test_lambda_max_gives_null_solution(small_panel):
    panel, _, _ = small_panel
    for mode in ("imposed_null", "control_only"):
        lm = lambda_max(panel, mode)
        res = fit(panel, PenaltyConfig(*lm.astuple()), mode)
        assert res.rank_L == 0 and not res.support_H and not res.support_beta
        below = fit(panel, PenaltyConfig(lm.L, 0.5 * lm.H, 0.5 * lm.beta), mode)
        assert below.support_H or below.support_beta


def test_lambda_max_matches_definition(rng):
    N, T = 8, 7
    Y = rng.standard_normal((N, T))
    panel = PanelData(Y, np.zeros((N, T)))
    lm = lambda_max(panel, "imposed_null")
    R = Y - Y.mean(1, keepdims=True) - Y.mean(0) + Y.mean()
    assert lm.L == pytest.approx(2 / (N * T) * np.linalg.norm(R, 2))


def test_zero_penalty_no_covariates_is_exact(rng):
    # lambda_L = 0 on the full panel: L absorbs everything, residual zero
    Y = rng.standard_normal((5, 6))
    res = fit(PanelData(Y, np.zeros((5, 6))), PenaltyConfig(0, 0, 0), "imposed_null")
    np.testing.assert_allclose(predict_y0(PanelData(Y, np.zeros((5, 6))), res.params), Y, atol=1e-8)


def test_control_only_ignores_treated_outcomes(small_panel):
    panel, _, _ = small_panel
    pen = PenaltyConfig(0.1, 0.05, 0.05, **TIGHT)
    a = fit(panel, pen, "control_only")
    Y2 = panel.Y + 100.0 * panel.W
    b = fit(PanelData(Y2, panel.W, panel.X, panel.Z, panel.V), pen, "control_only")
    np.testing.assert_allclose(predict_y0(panel, a.params), predict_y0(panel, b.params), atol=1e-6)


def test_empty_control_set():
    panel = PanelData(np.ones((3, 3)), np.ones((3, 3)))
    with pytest.raises(EmptyControlSetError):
        fit(panel, PenaltyConfig(1, 0, 0), "control_only")


def test_nonconvergence_warns(small_panel):
    panel, _, _ = small_panel
    with pytest.warns(ConvergenceWarning):
        res = fit(panel, PenaltyConfig(0.001, 0.001, 0.001, max_iterations=1, rel_tolerance=1e-15), "imposed_null")
    assert not res.converged and res.n_iterations == 1


def test_post_fit_keeps_support_and_lowers_loss(small_panel):
    panel, _, _ = small_panel
    first = fit(panel, PenaltyConfig(0.1, 0.03, 0.03, **TIGHT), "imposed_null")
    post = fit_post(panel, first)
    assert post.post and post.support_H <= first.support_H and post.support_beta <= first.support_beta
    assert post.rank_L <= first.rank_L
    mask = np.ones(panel.shape, bool)
    zero = (0.0, 0.0, 0.0)
    assert objective(panel, post.params, mask, zero) <= objective(panel, first.params, mask, zero) + 1e-12


def test_warm_start_reaches_same_solution(small_panel):
    panel, _, _ = small_panel
    pen = PenaltyConfig(0.1, 0.03, 0.03, **TIGHT)
    cold = fit(panel, pen, "imposed_null")
    other = fit(panel, PenaltyConfig(0.3, 0.1, 0.1), "imposed_null")
    warm = fit(panel, pen, "imposed_null", warm_start=other)
    assert warm.objective == pytest.approx(cold.objective, rel=1e-8)


def test_no_fixed_effects_option(small_panel):
    panel, _, _ = small_panel
    res = fit(panel, PenaltyConfig(0.1, 0.05, 0.05), "imposed_null", fixed_effects=False)
    assert not res.params.Gamma.any() and not res.params.Delta.any()


def test_recovers_strong_signal():
    panel, truth, _ = generate(DgpConfig(N=40, T=30, p=4, q=3, B=4, h_prob=0.5, b_prob=0.5, sigma_eps=0.1,
                                         h_size=4, b_size=4, exact_count_bernoulli=True, seed=3))
    lm = lambda_max(panel, "control_only")
    res = fit(panel, PenaltyConfig(0.1 * lm.L, 0.01 * lm.H, 0.01 * lm.beta), "control_only")
    big = {tuple(k) for k in np.argwhere(np.abs(truth.H) > 0.5)}
    assert big and res.support_H >= big
    np.testing.assert_allclose(res.params.H, truth.H, atol=0.2)
    np.testing.assert_allclose(res.params.beta, truth.beta, atol=0.1)
