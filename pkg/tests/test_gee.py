import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lcmm_subtypes.gee import GeeBoundaryError, GeeError, RankDeficientError, gee_fit


def _ols_hc0(X, y):
    XtX_inv = np.linalg.inv(X.T @ X)
    b = XtX_inv @ X.T @ y
    e = y - X @ b
    meat = (X * e[:, None] ** 2).T @ X
    return b, np.sqrt(np.diag(XtX_inv @ meat @ XtX_inv))


@pytest.mark.parametrize("seed", range(5))
def test_singleton_independence_is_ols_hc0(seed):
    rng = np.random.default_rng(seed)
    n, p = rng.integers(15, 60), rng.integers(2, 5)
    X = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
    y = X @ rng.normal(size=p) + rng.normal(size=n) * (1 + np.abs(X[:, 1]))
    res = gee_fit(y, X, np.arange(n), "gaussian", "independence")
    b, se = _ols_hc0(X, y)
    np.testing.assert_allclose(res.coef, b, rtol=1e-8, atol=1e-12)
    np.testing.assert_allclose(res.se, se, rtol=1e-8)


def _paired(n_subj, alpha, seed, beta=(1.0, 0.5)):
    rng = np.random.default_rng(seed)
    groups = np.repeat(np.arange(n_subj), 2)
    x = rng.normal(size=2 * n_subj)
    shared = rng.normal(size=n_subj)[groups]
    e = np.sqrt(alpha) * shared + np.sqrt(1 - alpha) * rng.normal(size=2 * n_subj)
    X = np.column_stack([np.ones_like(x), x])
    return X @ np.array(beta) + e, X, groups


def test_exchangeable_alpha_recovery():
    y, X, g = _paired(500, 0.5, 11)
    res = gee_fit(y, X, g, "gaussian", "exchangeable")
    assert abs(res.alpha - 0.5) < 0.1
    assert res.n_clusters == 500 and res.n_units == 1000


def test_against_statsmodels():
    sm = pytest.importorskip("statsmodels.api")
    rng = np.random.default_rng(4)
    y, X, g = _paired(150, 0.4, 4)
    sizes = rng.integers(1, 4, 150)
    keep = np.concatenate([np.arange(2 * s, 2 * s + min(k, 2)) for s, k in enumerate(sizes)])
    y, X, g = y[keep], X[keep], g[keep]
    ours = gee_fit(y, X, g, "gaussian", "exchangeable")
    ref = sm.GEE(y, X, groups=g, family=sm.families.Gaussian(), cov_struct=sm.cov_struct.Exchangeable()).fit()
    np.testing.assert_allclose(ours.coef, ref.params, rtol=1e-6)
    np.testing.assert_allclose(ours.se, ref.bse, rtol=1e-6)
    yb = (y > 1.0).astype(float)
    ours = gee_fit(yb, X, g, "binomial", "exchangeable")
    ref = sm.GEE(yb, X, groups=g, family=sm.families.Binomial(), cov_struct=sm.cov_struct.Exchangeable()).fit()
    np.testing.assert_allclose(ours.coef, ref.params, rtol=1e-6)
    np.testing.assert_allclose(ours.se, ref.bse, rtol=1e-6)
    assert ours.alpha == pytest.approx(ref.cov_struct.dep_params, rel=1e-6)


def test_constant_binary_outcome():
    X = np.column_stack([np.ones(10), np.arange(10.0)])
    with pytest.raises(GeeBoundaryError):
        gee_fit(np.zeros(10), X, np.arange(10) // 2, "binomial")


def test_separation_flagged():
    x = np.arange(20.0)
    X = np.column_stack([np.ones(20), x])
    with pytest.raises(GeeBoundaryError):
        gee_fit((x > 9.5).astype(float), X, np.arange(20), "binomial")


def test_rank_deficiency_lists_columns():
    rng = np.random.default_rng(0)
    x = rng.normal(size=12)
    X = np.column_stack([np.ones(12), x, 2 * x])
    with pytest.raises(RankDeficientError) as err:
        gee_fit(rng.normal(size=12), X, np.arange(12), names=("c", "x", "x2"))
    assert err.value.columns == ["x2"]


def test_single_cluster_error():
    with pytest.raises(GeeError):
        gee_fit(np.arange(5.0), np.column_stack([np.ones(5), np.arange(5.0) ** 2]), np.zeros(5))


def test_zero_alpha_data_matches_independence():
    y, X, g = _paired(200, 0.0, 8)
    single = np.arange(len(y))
    ex = gee_fit(y, X, single, "gaussian", "exchangeable")
    ind = gee_fit(y, X, single, "gaussian", "independence")
    assert ex.alpha == 0.0
    np.testing.assert_allclose(ex.coef, ind.coef, rtol=1e-12)
    np.testing.assert_allclose(ex.robust_cov, ind.robust_cov, rtol=1e-12)
    # balanced pairs with a cluster-constant covariate: GLS and OLS coincide for any alpha
    xs = np.repeat(np.random.default_rng(1).normal(size=200), 2)
    Xc = np.column_stack([np.ones_like(xs), xs])
    a = gee_fit(y, Xc, g, "gaussian", "exchangeable")
    b = gee_fit(y, Xc, g, "gaussian", "independence")
    np.testing.assert_allclose(a.coef, b.coef, rtol=1e-10, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_complement_gives_reciprocal_odds(seed):
    rng = np.random.default_rng(seed)
    n = 120
    g = np.arange(n) // 2
    x = (rng.random(n) < 0.4).astype(float)
    y = (rng.random(n) < 0.3 + 0.3 * x).astype(float)
    if len(set(zip(x, y))) < 4:
        return
    a = gee_fit(y, np.column_stack([np.ones(n), x]), g, "binomial")
    b = gee_fit(y, np.column_stack([np.ones(n), 1 - x]), g, "binomial")
    assert np.exp(a.coef[1]) * np.exp(b.coef[1]) == pytest.approx(1.0, abs=1e-9)
    assert a.se[1] == pytest.approx(b.se[1], rel=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_robust_cov_psd_and_pvalues(seed):
    y, X, g = _paired(60, 0.3, seed)
    res = gee_fit(y, X, g)
    C = res.robust_cov
    assert np.allclose(C, C.T)
    assert np.linalg.eigvalsh(C).min() >= -1e-14
    assert np.all((res.p_values >= 0) & (res.p_values <= 1))
    stat, df, p = res.wald_test(["x1"])
    assert df == 1 and stat == pytest.approx(res.z[1] ** 2) and 0 <= p <= 1
