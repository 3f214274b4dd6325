import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mcpanel.prox import (
    hard_rank_projection,
    nuclear_norm,
    numerical_rank,
    soft_threshold,
    svt,
    svt_factors,
    thin_svd,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
matrices = st.tuples(st.integers(1, 6), st.integers(1, 6)).flatmap(lambda s: arrays(float, s, elements=finite))


def prox_objective(A, B, t):
    return 0.5 * np.sum((A - B) ** 2) + t * nuclear_norm(B)


def test_soft_threshold_scalar_values():
    assert soft_threshold(3.0, 1.0) == 2.0
    assert soft_threshold(-3.0, 1.0) == -2.0
    assert soft_threshold(0.5, 1.0) == 0.0
    assert isinstance(soft_threshold(0.5, 1.0), float)


def test_soft_threshold_rejects_negative_threshold():
    with pytest.raises(ValueError):
        soft_threshold(1.0, -0.1)
    with pytest.raises(ValueError):
        svt(np.eye(2), -1.0)


@given(st.lists(finite, min_size=1, max_size=20), st.floats(0, 20))
def test_soft_threshold_is_scalar_lasso_prox(xs, t):
    x = np.array(xs)
    y = soft_threshold(x, t)
    # shrinks toward zero by at most t and never flips sign
    assert np.all(np.abs(y) <= np.abs(x) + 1e-12)
    assert np.all(np.abs(x - y) <= t + 1e-9)
    assert np.all(y * x >= 0)
    # it beats small perturbations of itself on the scalar lasso objective
    obj = lambda z: 0.5 * (x - z) ** 2 + t * np.abs(z)
    for d in (1e-3, -1e-3):
        assert np.all(obj(y) <= obj(y + d) + 1e-9)


@settings(max_examples=60, deadline=None)
@given(matrices, st.floats(0, 30))
def test_svt_beats_perturbations(A, t):
    B = svt(A, t)
    base = prox_objective(A, B, t)
    rng = np.random.default_rng(0)
    for _ in range(5):
        P = rng.standard_normal(A.shape) * 1e-3
        assert base <= prox_objective(A, B + P, t) + 1e-9


@settings(max_examples=60, deadline=None)
@given(matrices, st.floats(0, 30))
def test_svt_shrinks_singular_values(A, t):
    s = np.linalg.svd(A, compute_uv=False)
    s_out = np.linalg.svd(svt(A, t), compute_uv=False)
    np.testing.assert_allclose(np.sort(s_out)[::-1], np.maximum(s - t, 0), atol=1e-8 * (1 + s.max(initial=0)))


def test_svt_edge_thresholds(rng):
    A = rng.standard_normal((5, 4))
    np.testing.assert_allclose(svt(A, 0.0), A, atol=1e-12)
    assert not svt(A, np.linalg.norm(A, 2)).any()
    assert nuclear_norm(svt(A, 1e6)) == 0.0


def test_thin_svd_contract(rng):
    A = rng.standard_normal((7, 3))
    f = thin_svd(A)
    assert f.left_vectors.shape == (7, 3) and f.right_vectors.shape == (3, 3)
    assert np.all(np.diff(f.singular_values) <= 0)
    np.testing.assert_allclose(f.reconstruct(), A, atol=1e-12)


def test_numerical_rank():
    assert numerical_rank(np.array([3.0, 1.0, 1e-14])) == 2
    assert numerical_rank(np.array([3.0, 1.0, 0.5]), atol=0.7) == 2
    assert numerical_rank(np.zeros(3)) == 0
    assert numerical_rank(np.array([])) == 0


def test_hard_rank_projection_is_best_low_rank(rng):
    A = rng.standard_normal((6, 5))
    B = hard_rank_projection(A, 2).reconstruct()
    s = np.linalg.svd(A, compute_uv=False)
    assert np.linalg.matrix_rank(B) == 2
    # Eckart-Young: the error equals the discarded spectrum
    np.testing.assert_allclose(np.linalg.norm(A - B) ** 2, np.sum(s[2:] ** 2))


def test_svt_factors_rank(rng):
    A = rng.standard_normal((6, 5))
    s = np.linalg.svd(A, compute_uv=False)
    f = svt_factors(A, (s[1] + s[2]) / 2)
    assert f.rank() == 2
