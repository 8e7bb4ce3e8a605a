import math
import warnings

import numpy as np
import pytest

from extrapaudit.econometrics import (
    DECAY_GRID,
    CoefTable,
    EstimationError,
    RankDeficiencyError,
    _decay_sse,
    _decay_weight_grad,
    decay_weights,
    decompose_forecast,
    degree_of_extrapolation,
    fama_macbeth,
    fit_decay,
    format_decay,
    format_table,
    ols_cluster,
    percentile_regression,
    profile_lambda1,
    regress_lags,
    sign_split_regress,
    stars,
    table_csv,
)
from extrapaudit.calibration import historical_stats
from extrapaudit.panel import ContestPanel, SynthConfig, build_lag_matrix, synth_contests
from extrapaudit.prompts import DistributionForecast

# Fixed 3-cluster, 9-observation dataset.
Y9 = np.array([1.2, 0.7, 2.9, 3.1, 1.8, 4.4, 0.2, 2.6, 3.3])
X9 = np.column_stack([np.ones(9), [0.5, -1.0, 1.5, 2.0, 0.1, 2.5, -0.7, 1.1, 1.9], [3, 1, 4, 1, 5, 9, 2, 6, 5]])
G9 = np.array(["a", "a", "a", "b", "b", "b", "c", "c", "c"])


def sandwich_by_hand(y, X, groups, cr1=True):
    n, k = X.shape
    bread = np.linalg.inv(X.T @ X)
    beta = bread @ X.T @ y
    e = y - X @ beta
    meat = np.zeros((k, k))
    labels = list(dict.fromkeys(groups))
    for g in labels:
        s = np.zeros(k)
        for i in range(n):
            if groups[i] == g:
                s += X[i] * e[i]
        meat += np.outer(s, s)
    cov = bread @ meat @ bread
    G = len(labels)
    if cr1:
        cov *= G / (G - 1) * (n - 1) / (n - k)
    return beta, np.sqrt(np.diag(cov))


def test_perfect_fit_example():
    t = ols_cluster([1, 2, 3], [[1, 0], [1, 1], [1, 2]], [0, 1, 2])
    np.testing.assert_allclose(t.beta, [1, 1])
    np.testing.assert_allclose(t.residuals, 0, atol=1e-12)
    assert t.r2 == pytest.approx(1.0)


def test_sandwich_matches_hand_computation():
    t = ols_cluster(Y9, X9, G9)
    beta, se = sandwich_by_hand(Y9, X9, G9)
    np.testing.assert_allclose(t.beta, beta, rtol=1e-12)
    np.testing.assert_allclose(t.se, se, rtol=1e-10)
    np.testing.assert_allclose(t.t, t.beta / t.se, rtol=1e-14)
    assert (t.n_obs, t.n_clusters) == (9, 3)


def test_two_cluster_example():
    y, X, g = Y9[:6], X9[:6, :2], G9[:6]
    _, se = sandwich_by_hand(y, X, g)
    np.testing.assert_allclose(ols_cluster(y, X, g).se, se, rtol=1e-10)


def test_singleton_clusters_equal_hc0():
    t = ols_cluster(Y9, X9, np.arange(9), small_sample=False)
    bread = np.linalg.inv(X9.T @ X9)
    e = Y9 - X9 @ (bread @ X9.T @ Y9)
    hc0 = bread @ (X9.T * e ** 2) @ X9 @ bread
    np.testing.assert_allclose(t.se, np.sqrt(np.diag(hc0)), rtol=1e-12)


def test_matches_statsmodels_cluster():
    sm = pytest.importorskip("statsmodels.api")
    codes = np.unique(G9, return_inverse=True)[1]
    res = sm.OLS(Y9, X9).fit(cov_type="cluster", cov_kwds={"groups": codes})
    t = ols_cluster(Y9, X9, G9)
    np.testing.assert_allclose(t.se, res.bse, rtol=1e-10)
    assert t.r2 == pytest.approx(res.rsquared, rel=1e-12)


def test_fixed_effects_equal_dummy_regression():
    rng = np.random.default_rng(0)
    n, groups = 60, 6
    fe = np.repeat(np.arange(groups), n // groups)
    x = rng.normal(size=(n, 2))
    y = 1.5 * x[:, 0] - 0.5 * x[:, 1] + fe * 0.7 + rng.normal(size=n)
    clusters = np.tile(np.arange(10), n // 10)
    within = ols_cluster(y, x, clusters, fixed_effect_ids=fe)
    dummies = (fe[:, None] == np.arange(groups)).astype(float)
    lsdv = ols_cluster(y, np.hstack([x, dummies]), clusters)
    np.testing.assert_allclose(within.beta, lsdv.beta[:2], rtol=1e-10)
    np.testing.assert_allclose(within.se, lsdv.se[:2], rtol=1e-10)
    assert within.r2 == pytest.approx(lsdv.r2, rel=1e-12)
    assert 0 < within.within_r2 < within.r2


def test_group_constant_y_gives_zero_slopes():
    fe = np.repeat(np.arange(4), 5)
    y = fe * 2.0 + 1
    x = np.random.default_rng(1).normal(size=(20, 2))
    t = ols_cluster(y, x, fe, fixed_effect_ids=fe)
    np.testing.assert_allclose(t.beta, 0, atol=1e-12)


def test_rank_deficiency_reported():
    X = np.column_stack([X9, 2 * X9[:, 1]])
    with pytest.raises(RankDeficiencyError) as err:
        ols_cluster(Y9, X, G9, names=["const", "a", "b", "a2"])
    assert err.value.columns == ["a2"]
    t = ols_cluster(Y9, X, G9, names=["const", "a", "b", "a2"], drop_collinear=True)
    assert t.dropped == ("a2",) and t.names == ("const", "a", "b")


def test_needs_two_clusters():
    with pytest.raises(EstimationError):
        ols_cluster(Y9, X9, np.zeros(9))


def test_sign_split_planted_coefficient():
    panels = synth_contests(SynthConfig(n_contests=60, seed=2, with_ohlc=False))
    lm = build_lag_matrix(panels, "realized_return", "signed_returns")
    y = 2.0 * lm.x[:, 1]
    t = sign_split_regress(build_lag_matrix(panels, "llm_rank", "signed_returns",
                                            y_values={p.contest_id: y[10 * k:10 * k + 10]
                                                      for k, p in enumerate(panels)}))
    assert t.coef("Return+_t") == pytest.approx(2.0, abs=1e-10)
    others = [b for n, b in zip(t.names, t.beta) if n != "Return+_t"]
    np.testing.assert_allclose(others, 0, atol=1e-10)


def test_sign_split_drops_empty_half():
    rng = np.random.default_rng(3)
    panels = [ContestPanel(f"c{k}", tuple(f"s{k}_{i}" for i in range(10)), rng.uniform(0.001, 0.05, (10, 12)),
                           rng.normal(size=10)) for k in range(20)]
    t = sign_split_regress(build_lag_matrix(panels, "realized_return", "signed_returns"))
    assert len(t.dropped) == 12 and all(n.startswith("Return-") for n in t.dropped)
    text = format_table([t])
    assert "Dropped as collinear" in text


# --------------------------------------------------------------------------- decay


def test_decay_weights_properties():
    for l2 in (1e-9, 0.1, 0.28, 0.5, 0.99, 1.0):
        for L in (12, 24):
            w = decay_weights(l2, L)
            assert abs(w.sum() - 1) < 1e-12
            assert np.all(np.diff(w) <= 1e-15)
    np.testing.assert_allclose(decay_weights(1.0, 12), 1 / 12)
    w0 = decay_weights(1e-12, 12)
    assert w0[0] == pytest.approx(1.0) and np.all(w0[1:] < 1e-11)


def test_decay_weight_gradient():
    for l2 in (0.2, 0.6, 0.95):
        h = 1e-6
        fd = (decay_weights(l2 + h, 12) - decay_weights(l2 - h, 12)) / (2 * h)
        np.testing.assert_allclose(_decay_weight_grad(l2, 12), fd, atol=1e-7)


def test_degree_formula():
    assert degree_of_extrapolation(16.98, 0.28) == pytest.approx(12.2256)
    assert degree_of_extrapolation(40.72, 0.07) == pytest.approx(37.8696)
    assert degree_of_extrapolation(5.0, 1.0) == 0.0
    assert degree_of_extrapolation(0.0, 0.4) == 0.0


def _decay_data(l1, l2, noise, seed, n_contests=300):
    panels = synth_contests(SynthConfig(n_contests=n_contests, seed=seed, with_ohlc=False))
    lm = build_lag_matrix(panels, "realized_return", "returns")
    rng = np.random.default_rng(seed + 1)
    y = 5.5 + l1 * (lm.lags @ decay_weights(l2, 12)) + noise * rng.standard_normal(lm.y.size)
    return y, lm


def test_decay_exact_recovery():
    y, lm = _decay_data(10.0, 0.5, 0.0, 0)
    fit = fit_decay(y=y, lags=lm.lags, cluster_ids=lm.cluster_id)
    assert fit.converged
    assert fit.lambda1 == pytest.approx(10.0, abs=1e-6)
    assert fit.lambda2 == pytest.approx(0.5, abs=1e-6)
    assert fit.degree == fit.lambda1 * (1 - fit.lambda2)
    assert abs(fit.weights.sum() - 1) < 1e-12


def test_decay_objective_below_grid():
    y, lm = _decay_data(16.98, 0.28, 0.5, 4)
    fit = fit_decay(y=y, lags=lm.lags, cluster_ids=lm.cluster_id)
    assert set(fit.grid) == set(DECAY_GRID)
    assert all(fit.objective <= sse + 1e-9 for _, sse in fit.grid.values())
    assert fit.se_lambda1 > 0 and fit.se_lambda2 > 0


def test_profile_lambda1_is_through_origin_slope():
    y, lm = _decay_data(7.0, 0.3, 0.4, 5, 50)
    z = lm.lags @ decay_weights(0.6, 12)
    assert profile_lambda1(y, lm.lags, 0.6) == pytest.approx(np.dot(z, y - 5.5) / np.dot(z, z), rel=1e-12)


def test_decay_boundary_flag():
    y, lm = _decay_data(12.0, 1.0, 0.0, 6, 50)
    fit = fit_decay(y=y, lags=lm.lags, cluster_ids=lm.cluster_id)
    assert fit.lambda2 == pytest.approx(1.0, abs=1e-6)
    assert fit.at_boundary


def test_decay_rejects_signed_design(synth_panels):
    with pytest.raises(EstimationError):
        fit_decay(build_lag_matrix(synth_panels, "realized_return", "signed_returns"))


def test_decay_sse_helper_consistent():
    y, lm = _decay_data(3.0, 0.4, 0.2, 7, 30)
    fit = fit_decay(y=y, lags=lm.lags)
    assert fit.objective == pytest.approx(_decay_sse(y, lm.lags, fit.lambda1, fit.lambda2), rel=1e-10)


# --------------------------------------------------------------------------- decomposition and FM


def test_decomposition_identities(synth_panels):
    lm = build_lag_matrix(synth_panels, "realized_return", "returns")
    scores = np.random.default_rng(0).normal(5.5, 2, lm.y.size)
    pred, resid = decompose_forecast(scores, lm)
    np.testing.assert_allclose(pred + resid, scores, rtol=1e-12)
    assert np.max(np.abs(lm.x.T @ resid)) < 1e-10
    assert np.var(scores) == pytest.approx(np.var(pred) + np.var(resid), abs=1e-10)


def test_decomposition_linear_scores(synth_panels):
    lm = build_lag_matrix(synth_panels, "realized_return", "returns")
    scores = lm.x @ np.linspace(1, 2, 13)
    _, resid = decompose_forecast(scores, lm)
    assert np.max(np.abs(resid)) < 1e-10


def test_fama_macbeth_two_periods():
    x = np.tile([0.0, 1.0, 2.0, 3.0], 2)
    y = np.concatenate([1.0 * x[:4], 3.0 * x[4:]])
    fm = fama_macbeth(y, np.column_stack([np.ones(8), x]), [0] * 4 + [1] * 4, ["const", "x"])
    assert fm.coef("x") == pytest.approx(2.0)
    assert fm.fm_se[1] == pytest.approx(1.0)
    assert fm.tstat("x") == pytest.approx(2.0)
    assert fm.T == 2


def test_fama_macbeth_drops_degenerate_period():
    rng = np.random.default_rng(1)
    x = rng.normal(size=30)
    x[20:] = 1.0
    y = rng.normal(size=30)
    periods = np.repeat([0, 1, 2], 10)
    with pytest.warns(RuntimeWarning, match="dropped 1"):
        fm = fama_macbeth(y, np.column_stack([np.ones(30), x]), periods, ["const", "x"])
    assert fm.T == 2 and fm.dropped_periods == (2,)


def test_fama_macbeth_mean_of_period_slopes():
    rng = np.random.default_rng(2)
    periods = np.repeat(np.arange(7), 12)
    X = np.column_stack([np.ones(84), rng.normal(size=(84, 2))])
    y = rng.normal(size=84)
    fm = fama_macbeth(y, X, periods)
    slopes = [np.linalg.lstsq(X[periods == p], y[periods == p], rcond=None)[0] for p in range(7)]
    np.testing.assert_allclose(fm.mean_coef, np.mean(slopes, axis=0), rtol=1e-12)
    np.testing.assert_allclose(fm.fm_se, np.std(slopes, axis=0, ddof=1) / math.sqrt(7), rtol=1e-12)


def test_fama_macbeth_needs_periods():
    with pytest.raises(EstimationError):
        fama_macbeth(np.arange(5.0), np.column_stack([np.ones(5), np.arange(5.0)]), [0] * 5)


# --------------------------------------------------------------------------- percentile regression


def _historical(n=200, seed=0):
    rng = np.random.default_rng(seed)
    hist = [historical_stats(rng.normal(0.01, rng.uniform(0.05, 0.15), 120)) for _ in range(n)]
    months = [f"2000-{1 + k % 12:02d}" for k in range(n)]
    return hist, months


def test_percentile_identity_plant():
    hist, months = _historical()
    forecasts = [DistributionForecast(h.p10, 0.5 * h.p10 + 0.5 * h.p90, h.p90) for h in hist]
    fits = percentile_regression(forecasts, hist, months)
    low, exp = fits["low"], fits["expected"]
    assert low.coef("P10") == pytest.approx(1.0, abs=1e-8)
    np.testing.assert_allclose([b for n, b in zip(low.names, low.beta) if n != "P10"], 0, atol=1e-8)
    assert low.r2 == pytest.approx(1.0)
    assert exp.coef("P10") == pytest.approx(0.5, abs=1e-8) and exp.coef("P90") == pytest.approx(0.5, abs=1e-8)


# --------------------------------------------------------------------------- tables


def test_stars_thresholds():
    assert stars(1.6) == "" and stars(1.7) == "*" and stars(-2.0) == "**" and stars(2.6) == "***"
    assert stars(float("nan")) == ""


def test_table_layout():
    t = ols_cluster(Y9, X9, G9, names=["const", "Return_t", "Return_t-1"])
    text = format_table([t, t], ["Forcerank", "LLM"], title="Table")
    lines = text.splitlines()
    assert lines[0] == "Table"
    row = next(k for k, line in enumerate(lines) if line.startswith("Return_t "))
    coef_cell = f"{t.coef('Return_t'):.2f}{stars(t.tstat('Return_t'))}"
    assert coef_cell in lines[row]
    assert f"({t.tstat('Return_t'):.2f})" in lines[row + 1]
    assert "Observations" in text and "R-squared" in text
    assert "t-statistics in parentheses" in text
    se_text = format_table([t], paren="se")
    assert f"({t.stderr('Return_t'):.2f})" in se_text


def test_table_columns_widen_for_large_cells():
    t = ols_cluster(Y9, X9, G9)
    big = CoefTable(t.names, t.beta * 1e9, t.se, t.t * 1e9, t.n_obs, t.n_clusters, t.r2, t.residuals, t.fitted)
    lines = format_table([big, big]).splitlines()
    row = lines[3].split()
    assert len(row) == 3


def test_table_csv_and_decay_format():
    t = ols_cluster(Y9, X9, G9, label="m")
    rows = table_csv([t]).splitlines()
    assert rows[0] == "model,term,coef,se,t,n_obs,n_clusters,r2" and len(rows) == 4
    y, lm = _decay_data(10.0, 0.5, 0.1, 9, 40)
    text = format_decay([fit_decay(y=y, lags=lm.lags, cluster_ids=lm.cluster_id)], ["LLM"])
    assert "lambda1" in text and "l1(1 - l2)" in text


def test_regress_lags_clusters_by_contest(synth_panels):
    t = regress_lags(build_lag_matrix(synth_panels, "realized_return", "returns"))
    assert t.n_clusters == 40 and t.n_obs == 400
