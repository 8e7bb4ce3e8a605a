"""Acceptance suite. Each test prints one ``criterion N: PASS|FAIL`` line."""
import csv
import json
import time

import numpy as np
import pytest

from conftest import FIXTURES, GOLDEN, grid_panel
from extrapaudit import prompts as P
from extrapaudit.calibration import coverage_stats, historical_stats
from extrapaudit.cli import main
from extrapaudit.econometrics import (
    decay_weights,
    decompose_forecast,
    degree_of_extrapolation,
    fit_decay,
    ols_cluster,
    percentile_regression,
    regress_lags,
    sign_split_regress,
)
from extrapaudit.forecasters import Forecaster, ForecasterConfig, extrapolator_rank
from extrapaudit.panel import (
    ContestPanel,
    MonthlySeries,
    MonthlySynthConfig,
    SynthConfig,
    build_lag_matrix,
    month_stamps,
    synth_contests,
    synth_stock_months,
)
from extrapaudit.prompts import DistributionForecast


@pytest.fixture
def verdict(capsys):
    def report(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return report


def test_criterion_1_decay_recovery(verdict):
    start = time.perf_counter()
    panels = synth_contests(SynthConfig(n_contests=1000, reversal_coeff=-0.3, seed=0, with_ohlc=False))
    fits = {}
    for noise in (0.5, 0.0):
        scores = {p.contest_id: extrapolator_rank(p, 16.98, 0.28, noise, seed=k).scores
                  for k, p in enumerate(panels)}
        fits[noise] = fit_decay(build_lag_matrix(panels, "llm_rank", "returns", 12, scores))
    elapsed = time.perf_counter() - start
    noisy, exact = fits[0.5], fits[0.0]
    ok = (abs(noisy.lambda1 / 16.98 - 1) <= 0.05 and abs(noisy.lambda2 - 0.28) <= 0.03
          and abs(exact.lambda1 - 16.98) <= 1e-6 and abs(exact.lambda2 - 0.28) <= 1e-6 and elapsed < 60)
    verdict(1, ok, f"noise 0.5: l1={noisy.lambda1:.3f} l2={noisy.lambda2:.4f}; "
                   f"noise 0: |dl1|={abs(exact.lambda1 - 16.98):.1e} |dl2|={abs(exact.lambda2 - 0.28):.1e}; "
                   f"{elapsed:.1f}s")


def test_criterion_2_degree_formula(verdict):
    printed = [(16.98, 0.28, 12.19), (40.72, 0.07, 38.03), (45.68, 0.27, 33.21)]
    gaps = [abs(degree_of_extrapolation(l1, l2) - d) for l1, l2, d in printed]
    verdict(2, max(gaps) <= 0.25, "max gap to printed degree " + f"{max(gaps):.3f}")


def _sandwich(y, X, groups):
    n, k = X.shape
    bread = np.linalg.inv(X.T @ X)
    e = y - X @ (bread @ X.T @ y)
    labels = sorted(set(groups))
    meat = np.zeros((k, k))
    for g in labels:
        s = sum(X[i] * e[i] for i in range(n) if groups[i] == g)
        meat += np.outer(s, s)
    G = len(labels)
    return np.sqrt(np.diag(bread @ meat @ bread * G / (G - 1) * (n - 1) / (n - k)))


def test_criterion_3_clustered_ols_oracle(verdict):
    y = np.array([1.2, 0.7, 2.9, 3.1, 1.8, 4.4, 0.2, 2.6, 3.3])
    X = np.column_stack([np.ones(9), [0.5, -1.0, 1.5, 2.0, 0.1, 2.5, -0.7, 1.1, 1.9], [3, 1, 4, 1, 5, 9, 2, 6, 5]])
    g = [0, 0, 0, 1, 1, 1, 2, 2, 2]
    rel = np.max(np.abs(ols_cluster(y, X, g).se / _sandwich(y, X, g) - 1))
    bread = np.linalg.inv(X.T @ X)
    e = y - X @ (bread @ X.T @ y)
    hc0 = np.sqrt(np.diag(bread @ (X.T * e ** 2) @ X @ bread))
    cr0 = ols_cluster(y, X, np.arange(9), small_sample=False).se
    hc_gap = np.max(np.abs(cr0 / hc0 - 1))
    verdict(3, rel <= 1e-10 and hc_gap <= 1e-12, f"CR1 max rel diff {rel:.1e}; CR0 vs HC0 {hc_gap:.1e}")


def _covered(table, planted, names):
    return [abs(table.coef(n) - b) <= 2 * table.stderr(n) for n, b in zip(names, planted)]


def test_criterion_4_planted_recovery(verdict):
    beta1 = np.concatenate([[5.5], 16.98 * decay_weights(0.28, 12)])
    beta_pos = 41.11 * 0.6 ** np.arange(12)
    beta_neg = 36.07 * 0.5 ** np.arange(12)
    beta5 = np.linspace(-0.2, 0.5, 11)
    hits = {"eq1": [], "eq2": [], "eq5": []}
    for seed in range(100):
        rng = np.random.default_rng(10_000 + seed)
        panels = synth_contests(SynthConfig(n_contests=300, seed=seed, with_ohlc=False))
        contest_shock = np.repeat(rng.normal(0, 0.5, len(panels)), 10)

        lm = build_lag_matrix(panels, "realized_return", "returns")
        y = lm.x @ beta1 + contest_shock + rng.normal(0, 2.0, lm.y.size)
        values = {p.contest_id: y[10 * k:10 * k + 10] for k, p in enumerate(panels)}
        t1 = regress_lags(build_lag_matrix(panels, "llm_rank", "returns", 12, values))
        hits["eq1"] += _covered(t1, beta1, t1.names)

        sm = build_lag_matrix(panels, "realized_return", "signed_returns")
        planted2 = np.concatenate([[5.5], beta_pos, beta_neg])
        y2 = sm.x @ planted2 + contest_shock + rng.normal(0, 2.0, sm.y.size)
        values2 = {p.contest_id: y2[10 * k:10 * k + 10] for k, p in enumerate(panels)}
        t2 = sign_split_regress(build_lag_matrix(panels, "llm_rank", "signed_returns", 12, values2))
        hits["eq2"] += _covered(t2, planted2, t2.names)

        months = synth_stock_months(MonthlySynthConfig(n_series=600, n_year_months=60, seed=seed))
        hist = [historical_stats(m.series) for m in months]
        ym = [m.year_month for m in months]
        X5 = np.array([h.as_row() for h in hist])
        fe = {m: v for m, v in zip(sorted(set(ym)), rng.normal(0, 1.0, len(set(ym))))}
        shock = np.array([fe[m] for m in ym])
        y5 = X5 @ beta5 + shock + rng.normal(0, 1.0, len(months))
        forecasts = [DistributionForecast(v, v, v) for v in y5]
        t5 = percentile_regression(forecasts, hist, ym)["low"]
        hits["eq5"] += _covered(t5, beta5, t5.names)
    rates = {k: 100 * np.mean(v) for k, v in hits.items()}
    pooled = 100 * np.mean(sum(hits.values(), []))
    detail = "; ".join(f"{k} {v:.2f}%" for k, v in rates.items()) + f"; pooled {pooled:.2f}% within 2 SE"
    verdict(4, pooled >= 95.0, detail)


def test_criterion_5_reversal_sign(tmp_path, verdict):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({
        "experiment": "rank_contest", "seed": 0,
        "data": {"source": "synth", "synth": {"n_contests": 1000, "reversal_coeff": -0.3}},
        "analyses": {"eq2": False, "eq3": False, "ranks": False},
    }))
    out = tmp_path / "run"
    for stage in ("simulate", "prompts", "query", "estimate"):
        assert main([stage, "--config", str(config), "--out", str(out)]) == 0
    fm = {r["term"]: r for r in csv.DictReader((out / "estimate" / "fm.csv").open())}
    eq1 = [r for r in csv.DictReader((out / "estimate" / "eq1.csv").open())
           if r["model"] == "Realized return (%)" and r["term"] == "Return_t"][0]
    tables = (out / "estimate" / "tables.txt").read_text()
    stock_days = "50,000 stock-days" in tables
    coef, t = float(fm["Predicted"]["coef"]), float(fm["Predicted"]["t"])
    ok = coef < 0 and abs(t) > 2 and float(eq1["coef"]) < 0 and stock_days
    verdict(5, ok, f"FM Predicted {coef:.4f} (t {t:.2f}) over 50,000 stock-days={stock_days}; "
                   f"realized Eq1 most recent lag {float(eq1['coef']):.2f} (t {float(eq1['t']):.2f})")


def test_criterion_6_calibration_coverage(verdict):
    months = synth_stock_months(MonthlySynthConfig(n_series=10_000, seed=0))
    fc = Forecaster(ForecasterConfig(backend="percentile_oracle"))
    forecasts = []
    for m in months:
        raw = fc.query(P.build_distribution_prompt(m.series))
        forecasts.append(P.parse_distribution_response(raw))
    cov, _ = coverage_stats(forecasts, [100 * m.realized for m in months])
    total = sum(cov.counts)
    ok = abs(cov.inside - 80.0) <= 1.2 and total == cov.n and cov.below + cov.inside + cov.above == 100.0
    verdict(6, ok, f"inside {cov.inside:.2f}% below {cov.below:.2f}% above {cov.above:.2f}% "
                   f"(n={cov.n}, counts sum {total})")


def _random_forecast(rng):
    kind = rng.integers(3)
    if kind == 0:
        perm = rng.permutation(10) + 1
        f = P.RankForecast({f"stock {k + 1}": int(r) for k, r in enumerate(perm)}, float(rng.uniform()))
        chart = bool(rng.integers(2))
        back = P.parse_rank_response(P.render_rank_response(f, chart=chart))
        return back.ranking == f.ranking and back.confidence == (None if chart else f.confidence)
    if kind == 1:
        f = P.SentimentForecast(int(rng.integers(-1, 2)), float(rng.uniform()))
        return P.parse_sentiment_response(P.render_sentiment_response(f)) == f
    low, exp, high = np.sort(rng.normal(0, 10 ** rng.uniform(-3, 4), 3))
    f = P.DistributionForecast(float(low), float(exp), float(high))
    return P.parse_distribution_response(P.render_distribution_response(f)) == f


def test_criterion_7_protocol_exactness(verdict):
    market = MonthlySeries("market", month_stamps("2001-01", 12), np.array([0.01 * (m - 6) for m in range(12)]))
    history = MonthlySeries("PERMNO10001", month_stamps("1990-01", 120), np.full(120, 0.01))
    chart_panel = synth_contests(SynthConfig(n_contests=1, seed=0))[0]
    goldens = {
        "rank_prompt_12w.txt": P.build_rank_prompt(grid_panel(12), 12).text,
        "rank_prompt_24w.txt": P.build_rank_prompt(grid_panel(24), 24).text,
        "sentiment_prompt.txt": P.build_sentiment_prompt(market).text,
        "distribution_prompt.txt": P.build_distribution_prompt(history).text,
        "chart_prompt_12w.txt": P.build_chart_prompt(chart_panel, 12).text,
    }
    golden_ok = all(text.encode() == (GOLDEN / name).read_bytes() for name, text in goldens.items())

    rng = np.random.default_rng(0)
    round_trips = sum(_random_forecast(rng) for _ in range(10_000))

    manifest = json.loads((FIXTURES / "malformed" / "manifest.json").read_text())
    designated = 0
    for case in manifest:
        try:
            P.parse_response(case["schema"], (FIXTURES / "malformed" / case["file"]).read_text())
        except P.ResponseError as exc:
            designated += type(exc).__name__ == case["error"]
    ok = golden_ok and round_trips == 10_000 and designated == len(manifest) == 10
    verdict(7, ok, f"goldens {'match' if golden_ok else 'differ'}; round-trips {round_trips}/10000; "
                   f"malformed {designated}/{len(manifest)}")


def test_criterion_8_decomposition_identity(verdict):
    worst_sum = worst_orth = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        panels = [ContestPanel(f"c{k}", tuple(f"s{k}_{i}" for i in range(10)), rng.normal(0, 0.05, (10, 12)),
                               rng.normal(0, 0.05, 10)) for k in range(50)]
        lm = build_lag_matrix(panels, "realized_return", "returns")
        scores = rng.normal(5.5, 3.0, lm.y.size)
        pred, resid = decompose_forecast(scores, lm)
        worst_sum = max(worst_sum, float(np.max(np.abs(pred + resid - scores))))
        worst_orth = max(worst_orth, float(np.max(np.abs(lm.x.T @ resid))))
    verdict(8, worst_sum <= 1e-10 and worst_orth <= 1e-10,
            f"max |pred + resid - scores| {worst_sum:.1e}; max |X'resid| {worst_orth:.1e}")


def test_criterion_9_end_to_end_determinism(tmp_path, verdict):
    setups = {
        "rank_contest": ({"n_contests": 60}, ("simulate", "prompts", "query", "estimate", "report")),
        "distribution": ({"n_series": 200, "n_year_months": 20},
                         ("simulate", "prompts", "query", "estimate", "calibrate", "report")),
    }
    same = []
    for experiment, (synth, stages) in setups.items():
        reports = []
        for attempt in ("a", "b"):
            base = tmp_path / experiment / attempt
            base.mkdir(parents=True)
            config = base / "config.json"
            config.write_text(json.dumps({"experiment": experiment, "seed": 42,
                                          "data": {"source": "synth", "synth": synth}}))
            out = base / "run"
            for stage in stages:
                assert main([stage, "--config", str(config), "--out", str(out)]) == 0
            reports.append({p.relative_to(out): p.read_bytes()
                            for d in ("estimate", "report") for p in sorted((out / d).rglob("*"))
                            if p.is_file() and p.name != "stage.json"})
        same.append(reports[0] == reports[1] and bool(reports[0]))
    verdict(9, all(same), "byte-identical estimate/report trees: "
                          + ", ".join(f"{e}={s}" for e, s in zip(setups, same)) + " (same platform)")
