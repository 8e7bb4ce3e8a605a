"""Bias and interval-coverage statistics for distribution forecasts.

Everything here works in percent units. Percentiles use linear
interpolation between order statistics (numpy's default ``linear`` method),
the one convention shared by the oracle forecaster, the percentile
regressors and the historical benchmark.
"""
from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

DECILES = tuple(range(10, 100, 10))


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class HistoricalDistribution:
    min: float
    deciles: tuple[float, ...]  # p10, p20, ..., p90
    max: float
    mean: float
    n_months: int

    @property
    def p10(self) -> float:
        return self.deciles[0]

    @property
    def p90(self) -> float:
        return self.deciles[-1]

    def as_row(self) -> tuple[float, ...]:
        return (self.min, *self.deciles, self.max)


def percentile(values, q: float) -> float:
    """Linear-interpolation percentile, ``q`` in [0, 100]."""
    return float(np.percentile(np.asarray(values, dtype=float), q, method="linear"))


def historical_stats(window, scale: float = 100.0) -> HistoricalDistribution:
    """Min, deciles, max and mean of a return window.

    ``window`` is a MonthlySeries or array of decimal returns; ``scale``
    converts to percent.
    """
    values = np.asarray(getattr(window, "returns", window), dtype=float) * scale
    if values.size == 0:
        raise CalibrationError("empty window")
    qs = np.percentile(values, DECILES, method="linear")
    qs = np.maximum.accumulate(qs)  # guard the monotonicity invariant against rounding
    return HistoricalDistribution(
        min=float(values.min()),
        deciles=tuple(float(q) for q in qs),
        max=float(values.max()),
        mean=float(values.mean()),
        n_months=int(values.size),
    )


@dataclass(frozen=True)
class PairedTest:
    name: str
    mean_a: float
    mean_b: float
    mean_diff: float
    t: float
    p_value: float
    n: int


def paired_test(a, b, name: str = "") -> PairedTest:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise CalibrationError("paired samples differ in length")
    n = a.size
    if n < 2:
        raise CalibrationError("paired test needs n >= 2")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0:
        t = 0.0 if mean == 0 else math.copysign(math.inf, mean)
        p = 1.0 if mean == 0 else 0.0
    else:
        t = mean / (sd / math.sqrt(n))
        p = float(2 * stats.t.sf(abs(t), df=n - 1))
    return PairedTest(name, float(a.mean()), float(b.mean()), mean, t, p, n)


def bias_tests(forecasts, historical: Sequence[HistoricalDistribution], realized) -> list[PairedTest]:
    """Expected vs historical mean, expected vs realized, low vs p10, high vs p90.

    ``realized`` is in percent.
    """
    exp = [f.expected for f in forecasts]
    return [
        paired_test(exp, [h.mean for h in historical], "Expected forecast = Historical mean"),
        paired_test(exp, realized, "Expected forecast = Realized return"),
        paired_test([f.low for f in forecasts], [h.p10 for h in historical], "Low forecast = Historical 10%"),
        paired_test([f.high for f in forecasts], [h.p90 for h in historical], "High forecast = Historical 90%"),
    ]


@dataclass(frozen=True)
class Coverage:
    below: float
    inside: float
    above: float
    n: int
    counts: tuple[int, int, int] = (0, 0, 0)  # below, inside, above


def coverage_counts(low, high, realized) -> Coverage:
    """Percent of realized values strictly below ``low``, inside [low, high]
    inclusive, and strictly above ``high``."""
    low = np.asarray(low, dtype=float)
    high = np.asarray(high, dtype=float)
    r = np.asarray(realized, dtype=float)
    n = r.size
    if n == 0:
        raise CalibrationError("no observations")
    below = int(np.sum(r < low))
    above = int(np.sum(r > high))
    inside = n - below - above
    return Coverage(100.0 * below / n, 100.0 * inside / n, 100.0 * above / n, n, (below, inside, above))


def coverage_stats(forecasts, realized, historical: Sequence[HistoricalDistribution] | None = None
                   ) -> tuple[Coverage, Coverage | None]:
    """Coverage of the forecast interval and, if given, of the historical p10/p90 band."""
    fc = coverage_counts([f.low for f in forecasts], [f.high for f in forecasts], realized)
    hc = None
    if historical is not None:
        hc = coverage_counts([h.p10 for h in historical], [h.p90 for h in historical], realized)
    return fc, hc


def expected_order_stat_coverage(n: int, lo: float = 0.1, hi: float = 0.9) -> float:
    """Expected coverage of a [lo, hi] linear-interpolation percentile band
    estimated from ``n`` iid continuous draws: (hi - lo)(n - 1)/(n + 1)."""
    return (hi - lo) * (n - 1) / (n + 1)


@dataclass(frozen=True)
class Histogram:
    name: str
    edges: np.ndarray
    counts: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_low", "bin_high", "count"])
        for k, c in enumerate(self.counts):
            w.writerow([f"{self.edges[k]:.4f}", f"{self.edges[k + 1]:.4f}", int(c)])
        return buf.getvalue()


def histogram(values, width: float = 0.5, name: str = "") -> Histogram:
    """Fixed-width bins anchored at multiples of ``width``; a value on an
    edge falls in the bin above it."""
    v = np.asarray(values, dtype=float)
    if width <= 0:
        raise CalibrationError("bin width must be positive")
    if v.size == 0:
        return Histogram(name, np.array([0.0, width]), np.zeros(1, dtype=int))
    idx = np.floor(np.round(v / width, 9)).astype(np.int64)
    lo, hi = int(idx.min()), int(idx.max())
    counts = np.bincount(idx - lo, minlength=hi - lo + 1)
    edges = np.arange(lo, hi + 2) * width
    return Histogram(name, edges, counts)


@dataclass
class HistogramSet:
    differences: dict[str, Histogram]
    raw: dict[str, Histogram]
    share_expected_negative: float


def forecast_histograms(forecasts, historical: Sequence[HistoricalDistribution], width: float = 0.5) -> HistogramSet:
    low = np.array([f.low for f in forecasts])
    exp = np.array([f.expected for f in forecasts])
    high = np.array([f.high for f in forecasts])
    p10 = np.array([h.p10 for h in historical])
    mean = np.array([h.mean for h in historical])
    p90 = np.array([h.p90 for h in historical])
    diffs = {
        "low_minus_p10": histogram(low - p10, width, "Low - historical 10%"),
        "expected_minus_mean": histogram(exp - mean, width, "Expected - historical mean"),
        "high_minus_p90": histogram(high - p90, width, "High - historical 90%"),
    }
    raw = {
        "forecast_low": histogram(low, width, "Low forecast"),
        "forecast_expected": histogram(exp, width, "Expected forecast"),
        "forecast_high": histogram(high, width, "High forecast"),
        "historical_p10": histogram(p10, width, "Historical 10%"),
        "historical_mean": histogram(mean, width, "Historical mean"),
        "historical_p90": histogram(p90, width, "Historical 90%"),
    }
    share = float(np.mean(exp < 0)) if exp.size else 0.0
    return HistogramSet(diffs, raw, share)


@dataclass
class CalibrationReport:
    descriptive: dict[str, dict[str, float]]
    bias: list[PairedTest]
    forecast_coverage: Coverage
    historical_coverage: Coverage
    mean_ci_width: float
    mean_historical_width: float
    n: int
    rejections: Counter = field(default_factory=Counter)


def _describe(values) -> dict[str, float]:
    v = np.asarray(values, dtype=float)
    out = {"obs": float(v.size), "mean": float(v.mean()), "std": float(v.std(ddof=1)) if v.size > 1 else 0.0}
    for q in (5, 25, 50, 75, 95):
        out[f"p{q}"] = percentile(v, q)
    return out


def calibration_report(forecasts, historical: Sequence[HistoricalDistribution], realized,
                       rejections: Counter | None = None) -> CalibrationReport:
    """Descriptive statistics, bias tests and coverage (all percent units)."""
    if not (len(forecasts) == len(historical) == len(realized)):
        raise CalibrationError("forecasts, historical and realized differ in length")
    realized = np.asarray(realized, dtype=float)
    low = np.array([f.low for f in forecasts])
    exp = np.array([f.expected for f in forecasts])
    high = np.array([f.high for f in forecasts])
    p10 = np.array([h.p10 for h in historical])
    p90 = np.array([h.p90 for h in historical])
    desc = {
        "Expected forecast": _describe(exp),
        "Historical mean": _describe([h.mean for h in historical]),
        "Realized returns": _describe(realized),
        "Low forecast": _describe(low),
        "Historical 10%": _describe(p10),
        "High forecast": _describe(high),
        "Historical 90%": _describe(p90),
        "Confidence interval %": _describe(high - low),
        "Historical 90% - 10%": _describe(p90 - p10),
    }
    fc, hc = coverage_stats(forecasts, realized, historical)
    return CalibrationReport(
        descriptive=desc,
        bias=bias_tests(forecasts, historical, realized),
        forecast_coverage=fc,
        historical_coverage=hc,
        mean_ci_width=float(np.mean(high - low)),
        mean_historical_width=float(np.mean(p90 - p10)),
        n=len(forecasts),
        rejections=Counter(rejections or {}),
    )


def format_calibration(report: CalibrationReport) -> str:
    lines = ["Panel A: Descriptive statistics", ""]
    cols = ("obs", "mean", "std", "p5", "p25", "p50", "p75", "p95")
    lines.append(f"{'Variable':<24}" + "".join(f"{c:>10}" for c in ("Obs.", "Mean", "Std.", "5%", "25%", "50%", "75%", "95%")))
    for name, d in report.descriptive.items():
        cells = [f"{int(d['obs']):,}"] + [f"{d[c]:.2f}" for c in cols[1:]]
        lines.append(f"{name:<24}" + "".join(f"{c:>10}" for c in cells))
    lines += ["", "Panel B: Forecast bias", ""]
    lines.append(f"{'Difference':<40}{'Mean Difference':>18}{'t':>10}{'p-Value':>10}")
    for b in report.bias:
        lines.append(f"{b.name:<40}{b.mean_diff:>18.2f}{b.t:>10.2f}{b.p_value:>10.3f}")
    fc, hc = report.forecast_coverage, report.historical_coverage
    lines += ["", "Panel C: Realized returns relative to historical and forecast intervals", ""]
    for label, value in (
        ("% of realized returns below low forecast", fc.below),
        ("% of realized returns in confidence interval", fc.inside),
        ("% of realized returns above high forecast", fc.above),
        ("% of realized returns below historical 10%", hc.below),
        ("% of realized returns in historical interval", hc.inside),
        ("% of realized returns above historical 90%", hc.above),
    ):
        lines.append(f"{label:<52}{value:>8.2f}")
    lines.append("")
    lines.append(f"Mean forecast interval width: {report.mean_ci_width:.2f}; "
                 f"mean historical 90%-10% width: {report.mean_historical_width:.2f}")
    rejected = sum(report.rejections.values())
    detail = ", ".join(f"{k}={v}" for k, v in sorted(report.rejections.items()))
    lines.append(f"Responses used: {report.n}; rejected: {rejected}" + (f" ({detail})" if detail else ""))
    return "\n".join(lines) + "\n"


def calibration_csv(report: CalibrationReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["panel", "item", "statistic", "value"])
    for name, d in report.descriptive.items():
        for k, v in d.items():
            w.writerow(["A", name, k, f"{v:.10g}"])
    for b in report.bias:
        w.writerow(["B", b.name, "mean_diff", f"{b.mean_diff:.10g}"])
        w.writerow(["B", b.name, "t", f"{b.t:.10g}"])
        w.writerow(["B", b.name, "p_value", f"{b.p_value:.10g}"])
    for tag, cov in (("forecast", report.forecast_coverage), ("historical", report.historical_coverage)):
        w.writerow(["C", tag, "below", f"{cov.below:.10g}"])
        w.writerow(["C", tag, "inside", f"{cov.inside:.10g}"])
        w.writerow(["C", tag, "above", f"{cov.above:.10g}"])
    for k, v in sorted(report.rejections.items()):
        w.writerow(["R", k, "count", v])
    return buf.getvalue()
