"""Estimators: cluster-robust OLS (optionally with absorbed fixed effects),
the exponential-decay extrapolation model, forecast decomposition,
Fama-MacBeth regressions and the historical-percentile regression.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize, stats

from .panel import LagMatrix

DECAY_INTERCEPT = 5.5
DECAY_GRID = tuple(round(0.05 * k, 2) for k in range(1, 20))
PERCENTILE_REGRESSORS = ("Minimum", "P10", "P20", "P30", "P40", "P50", "P60", "P70", "P80", "P90", "Maximum")


class EstimationError(ValueError):
    pass


class RankDeficiencyError(EstimationError):
    def __init__(self, columns: Sequence[str]):
        self.columns = list(columns)
        super().__init__(f"design is rank deficient; collinear columns: {', '.join(self.columns)}")


@dataclass
class CoefTable:
    names: tuple[str, ...]
    beta: np.ndarray
    se: np.ndarray
    t: np.ndarray
    n_obs: int
    n_clusters: int
    r2: float
    residuals: np.ndarray
    fitted: np.ndarray
    within_r2: float | None = None
    dropped: tuple[str, ...] = ()
    cov: np.ndarray | None = None
    label: str = ""

    def coef(self, name: str) -> float:
        return float(self.beta[self.names.index(name)])

    def stderr(self, name: str) -> float:
        return float(self.se[self.names.index(name)])

    def tstat(self, name: str) -> float:
        return float(self.t[self.names.index(name)])


def _group_codes(ids) -> tuple[np.ndarray, int]:
    _, codes = np.unique(np.asarray(ids), return_inverse=True)
    return codes, int(codes.max()) + 1 if codes.size else 0


def demean(a: np.ndarray, codes: np.ndarray, n_groups: int) -> np.ndarray:
    """Subtract group means (within transformation) from each column of ``a``."""
    a = np.asarray(a, dtype=float)
    counts = np.bincount(codes, minlength=n_groups).astype(float)
    if a.ndim == 1:
        return a - (np.bincount(codes, weights=a, minlength=n_groups) / counts)[codes]
    out = np.empty_like(a)
    for j in range(a.shape[1]):
        out[:, j] = a[:, j] - (np.bincount(codes, weights=a[:, j], minlength=n_groups) / counts)[codes]
    return out


def collinear_columns(X: np.ndarray, tol: float = 1e-10) -> list[int]:
    """Indices of columns that are (numerically) spanned by earlier columns."""
    kept: list[int] = []
    bad: list[int] = []
    Q = np.empty((X.shape[0], 0))
    for j in range(X.shape[1]):
        col = X[:, j]
        norm = np.linalg.norm(col)
        if norm == 0:
            bad.append(j)
            continue
        resid = col - Q @ (Q.T @ col)
        resid = resid - Q @ (Q.T @ resid)
        rn = np.linalg.norm(resid)
        if rn <= tol * norm:
            bad.append(j)
        else:
            kept.append(j)
            Q = np.column_stack([Q, resid / rn])
    return bad


def cluster_meat(scores: np.ndarray, codes: np.ndarray, n_groups: int) -> np.ndarray:
    """Sum over clusters of outer products of within-cluster score sums."""
    sums = np.zeros((n_groups, scores.shape[1]))
    np.add.at(sums, codes, scores)
    return sums.T @ sums


def _spans_constant(X: np.ndarray) -> bool:
    ones = np.ones(X.shape[0])
    coef = np.linalg.lstsq(X, ones, rcond=None)[0]
    return bool(np.max(np.abs(X @ coef - ones)) < 1e-8)


def ols_cluster(
    y,
    X,
    cluster_ids,
    fixed_effect_ids=None,
    names: Sequence[str] | None = None,
    small_sample: bool = True,
    drop_collinear: bool = False,
    label: str = "",
) -> CoefTable:
    """OLS with Liang-Zeger cluster-robust covariance.

    With ``small_sample`` the sandwich is scaled by G/(G-1) * (N-1)/(N-K).
    When ``fixed_effect_ids`` is given, ``y`` and ``X`` are demeaned within
    groups first and K includes the absorbed effects; ``r2`` is then measured
    on the untransformed ``y`` and ``within_r2`` on the demeaned one.

    Collinear columns raise :class:`RankDeficiencyError` unless
    ``drop_collinear`` is set, in which case they are removed and listed in
    ``dropped``.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, k = X.shape
    if y.shape != (n,) or len(cluster_ids) != n:
        raise EstimationError("y, X and cluster_ids must have the same number of rows")
    names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(k))
    if len(names) != k:
        raise EstimationError("names must match the number of columns")
    ccodes, G = _group_codes(cluster_ids)
    if G < 2:
        raise EstimationError("need at least 2 clusters")

    n_fe = 0
    yw, Xw = y, X
    if fixed_effect_ids is not None:
        fcodes, n_fe = _group_codes(fixed_effect_ids)
        yw, Xw = demean(y, fcodes, n_fe), demean(X, fcodes, n_fe)

    bad = collinear_columns(Xw)
    if bad:
        if not drop_collinear:
            raise RankDeficiencyError([names[j] for j in bad])
        keep = [j for j in range(k) if j not in bad]
        Xw, X = Xw[:, keep], X[:, keep]
        dropped = tuple(names[j] for j in bad)
        names = tuple(names[j] for j in keep)
        k = len(keep)
    else:
        dropped = ()

    xtx_inv = np.linalg.inv(Xw.T @ Xw)
    beta = xtx_inv @ (Xw.T @ yw)
    resid = yw - Xw @ beta
    meat = cluster_meat(Xw * resid[:, None], ccodes, G)
    cov = xtx_inv @ meat @ xtx_inv
    K = k + n_fe
    if small_sample:
        if n - K <= 0:
            raise EstimationError("not enough observations for the small-sample correction")
        cov *= (G / (G - 1)) * ((n - 1) / (n - K))
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, beta / np.where(se > 0, se, 1.0), np.nan)

    ssr = float(resid @ resid)
    # A constant spanned by the columns (e.g. a full set of dummies) counts as an intercept.
    has_const = fixed_effect_ids is not None or _spans_constant(X)
    tss = float(((y - y.mean()) ** 2).sum()) if has_const else float(y @ y)
    r2 = 1.0 - ssr / tss if tss > 0 else 1.0
    within = None
    if fixed_effect_ids is not None:
        wtss = float(yw @ yw)
        within = 1.0 - ssr / wtss if wtss > 0 else 1.0
    return CoefTable(
        names=names, beta=beta, se=se, t=t, n_obs=n, n_clusters=G, r2=r2,
        residuals=resid, fitted=y - resid, within_r2=within, dropped=dropped, cov=cov, label=label,
    )


def regress_lags(lm: LagMatrix, label: str = "", drop_collinear: bool = False) -> CoefTable:
    """Lagged-return (or rank) regression clustered by contest."""
    return ols_cluster(lm.y, lm.x, lm.cluster_id, names=lm.names, drop_collinear=drop_collinear, label=label)


def sign_split_regress(lm: LagMatrix, label: str = "") -> CoefTable:
    """Regression on positive and negative return components.

    Components that never vary (for instance no negative returns at all) are
    dropped and listed in ``dropped``.
    """
    if not lm.signed:
        raise EstimationError("lag matrix was not built with signed returns")
    return ols_cluster(lm.y, lm.x, lm.cluster_id, names=lm.names, drop_collinear=True, label=label)


# --------------------------------------------------------------------------- decay model


@dataclass
class DecayFit:
    lambda1: float
    lambda2: float
    degree: float
    se_lambda1: float
    se_lambda2: float
    weights: np.ndarray
    n_lags: int
    converged: bool
    objective: float
    at_boundary: bool = False
    n_obs: int = 0
    n_clusters: int = 0
    grid: dict = field(default_factory=dict)

    @property
    def t_lambda1(self) -> float:
        return self.lambda1 / self.se_lambda1 if self.se_lambda1 > 0 else math.nan

    @property
    def t_lambda2(self) -> float:
        return self.lambda2 / self.se_lambda2 if self.se_lambda2 > 0 else math.nan


def decay_weights(lambda2: float, n_lags: int) -> np.ndarray:
    """w_s = lambda2**s / sum_j lambda2**j for s = 0..n_lags-1, with 0**0 = 1."""
    if not 0.0 <= lambda2 <= 1.0:
        raise EstimationError("lambda2 must lie in [0, 1]")
    powers = np.power(float(lambda2), np.arange(n_lags, dtype=float))
    return powers / powers.sum()


def _decay_weight_grad(lambda2: float, n_lags: int) -> np.ndarray:
    s = np.arange(n_lags, dtype=float)
    p = np.power(lambda2, s)
    dp = np.zeros(n_lags)
    dp[1:] = s[1:] * np.power(lambda2, s[1:] - 1)
    S, dS = p.sum(), dp.sum()
    return (dp * S - p * dS) / (S * S)


def degree_of_extrapolation(lambda1: float, lambda2: float) -> float:
    return lambda1 * (1.0 - lambda2)


def profile_lambda1(y: np.ndarray, lags: np.ndarray, lambda2: float) -> float:
    """Closed-form lambda1 for fixed lambda2 (regression through the origin)."""
    z = lags @ decay_weights(lambda2, lags.shape[1])
    zz = float(z @ z)
    return float(z @ (y - DECAY_INTERCEPT)) / zz if zz > 0 else 0.0


def _decay_sse(y, lags, l1, l2) -> float:
    r = y - DECAY_INTERCEPT - l1 * (lags @ decay_weights(l2, lags.shape[1]))
    return float(r @ r)


def fit_decay(lm: LagMatrix | None = None, n_lags: int | None = None, *, y=None, lags=None,
              cluster_ids=None, lower: float = 1e-6) -> DecayFit:
    """Fit Y = 5.5 + lambda1 * sum_s w_s R_{t-s} by bounded nonlinear least squares.

    A grid over lambda2 in {0.05, ..., 0.95} with lambda1 profiled out seeds a
    bounded scalar search, which is then polished jointly. Standard errors use
    the Gauss-Newton Jacobian in a CR1 cluster sandwich.
    """
    if lm is not None:
        if lm.signed:
            raise EstimationError("decay model needs unsigned lagged returns")
        n_lags = n_lags or lm.n_lags
        y, lags, cluster_ids = lm.y, lm.lags[:, :n_lags], lm.cluster_id
    y = np.asarray(y, dtype=float)
    lags = np.asarray(lags, dtype=float)
    n_lags = n_lags or lags.shape[1]
    lags = lags[:, :n_lags]
    if cluster_ids is None:
        cluster_ids = np.arange(y.size)

    grid = {}
    for g in DECAY_GRID:
        l1 = profile_lambda1(y, lags, g)
        grid[g] = (l1, _decay_sse(y, lags, l1, g))
    g_best = min(grid, key=lambda g: grid[g][1])
    best = (grid[g_best][0], g_best, grid[g_best][1])

    def profiled(l2):
        return _decay_sse(y, lags, profile_lambda1(y, lags, l2), l2)

    # Refine within one grid step of the best grid point.
    a, b = max(lower, g_best - 0.05), min(1.0, g_best + 0.05)
    res1 = optimize.minimize_scalar(profiled, bounds=(a, b), method="bounded",
                                    options={"xatol": 1e-12, "maxiter": 500})
    for l2_edge in (lower, 1.0):
        sse = profiled(l2_edge)
        if sse < best[2]:
            best = (profile_lambda1(y, lags, l2_edge), l2_edge, sse)
    if res1.success and res1.fun < best[2]:
        best = (profile_lambda1(y, lags, res1.x), float(res1.x), float(res1.fun))

    def resid(theta):
        return y - DECAY_INTERCEPT - theta[0] * (lags @ decay_weights(theta[1], n_lags))

    def jac(theta):
        z = lags @ decay_weights(theta[1], n_lags)
        dz = lags @ _decay_weight_grad(theta[1], n_lags)
        return -np.column_stack([z, theta[0] * dz])

    converged = bool(res1.success)
    try:
        res2 = optimize.least_squares(
            resid, x0=[best[0], min(max(best[1], lower), 1.0)], jac=jac,
            bounds=([-np.inf, lower], [np.inf, 1.0]), method="trf",
            xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000,
        )
        sse2 = float(res2.fun @ res2.fun)
        if res2.status > 0 and sse2 <= best[2]:
            best = (float(res2.x[0]), float(res2.x[1]), sse2)
        converged = converged or res2.status > 0
    except (ValueError, np.linalg.LinAlgError):
        pass

    l1, l2, sse = best
    if not converged:
        l1, l2, sse = grid[g_best][0], g_best, grid[g_best][1]

    e = resid(np.array([l1, l2]))
    J = -jac(np.array([l1, l2]))
    codes, G = _group_codes(cluster_ids)
    n = y.size
    se1 = se2 = math.nan
    try:
        bread = np.linalg.inv(J.T @ J)
        cov = bread @ cluster_meat(J * e[:, None], codes, G) @ bread
        if G > 1 and n > 2:
            cov *= (G / (G - 1)) * ((n - 1) / (n - 2))
        se1, se2 = np.sqrt(np.clip(np.diag(cov), 0, None))
    except np.linalg.LinAlgError:
        pass
    boundary = l2 >= 1.0 - 1e-9 or l2 <= lower * (1 + 1e-6)
    return DecayFit(
        lambda1=l1, lambda2=l2, degree=degree_of_extrapolation(l1, l2),
        se_lambda1=float(se1), se_lambda2=float(se2), weights=decay_weights(l2, n_lags),
        n_lags=n_lags, converged=converged, objective=sse, at_boundary=boundary,
        n_obs=n, n_clusters=G, grid=grid,
    )


# --------------------------------------------------------------------------- decomposition


def decompose_forecast(scores, lm: LagMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Split forecasts into the part linear in lagged returns and the rest."""
    scores = np.asarray(scores, dtype=float)
    fit = ols_cluster(scores, lm.x, lm.cluster_id, names=lm.names, drop_collinear=True)
    predicted = fit.fitted
    return predicted, scores - predicted


# --------------------------------------------------------------------------- Fama-MacBeth


@dataclass
class FMResult:
    names: tuple[str, ...]
    mean_coef: np.ndarray
    fm_se: np.ndarray
    t: np.ndarray
    T: int
    period_coefs: np.ndarray
    periods: tuple
    n_obs: int = 0
    dropped_periods: tuple = ()
    label: str = ""

    def coef(self, name: str) -> float:
        return float(self.mean_coef[self.names.index(name)])

    def tstat(self, name: str) -> float:
        return float(self.t[self.names.index(name)])


def fama_macbeth(y, X, period_ids, names: Sequence[str] | None = None, label: str = "") -> FMResult:
    """Period-by-period cross-sectional OLS; mean slope with std/sqrt(T) errors.

    Periods whose design is rank deficient, or that have no more rows than
    regressors, are dropped with a warning.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    k = X.shape[1]
    names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(k))
    period_ids = np.asarray(period_ids)
    order = np.unique(period_ids)
    coefs, kept, dropped = [], [], []
    n_obs = 0
    for p in order:
        rows = period_ids == p
        Xp, yp = X[rows], y[rows]
        if Xp.shape[0] <= k or collinear_columns(Xp):
            dropped.append(p)
            continue
        beta, *_ = np.linalg.lstsq(Xp, yp, rcond=None)
        coefs.append(beta)
        kept.append(p)
        n_obs += int(rows.sum())
    if dropped:
        warnings.warn(f"Fama-MacBeth dropped {len(dropped)} rank-deficient period(s)", RuntimeWarning, stacklevel=2)
    T = len(coefs)
    if T < 2:
        raise EstimationError("Fama-MacBeth needs at least 2 usable periods")
    coefs = np.array(coefs)
    mean = coefs.mean(axis=0)
    se = coefs.std(axis=0, ddof=1) / math.sqrt(T)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, mean / np.where(se > 0, se, 1.0), np.nan)
    return FMResult(names, mean, se, t, T, coefs, tuple(kept), n_obs, tuple(dropped), label)


# --------------------------------------------------------------------------- percentile regression


def percentile_design(historical) -> np.ndarray:
    """Rows of (min, p10..p90, max) from HistoricalDistribution objects."""
    return np.array([[h.min, *h.deciles, h.max] for h in historical], dtype=float)


def percentile_regression(forecasts, historical, year_month_ids, drop_collinear: bool = False) -> dict[str, CoefTable]:
    """Regress low/expected/high forecasts on the historical min, deciles and max.

    Year-month fixed effects are absorbed and errors clustered by year-month.
    ``forecasts`` is a sequence of DistributionForecast (percent units).
    """
    X = percentile_design(historical)
    out = {}
    for field_name in ("low", "expected", "high"):
        y = np.array([getattr(f, field_name) for f in forecasts], dtype=float)
        out[field_name] = ols_cluster(
            y, X, year_month_ids, fixed_effect_ids=year_month_ids,
            names=PERCENTILE_REGRESSORS, drop_collinear=drop_collinear, label=field_name,
        )
    return out


# --------------------------------------------------------------------------- tables


def stars(t: float) -> str:
    """Two-sided normal thresholds at 10/5/1%."""
    if not math.isfinite(t):
        return ""
    a = abs(t)
    for crit, mark in ((stats.norm.ppf(0.995), "***"), (stats.norm.ppf(0.975), "**"), (stats.norm.ppf(0.95), "*")):
        if a > crit:
            return mark
    return ""


def _num(x: float, digits: int) -> str:
    if not math.isfinite(x):
        return "."
    out = f"{x:.{digits}f}"
    return out[1:] if out.startswith("-") and float(out) == 0 else out


def format_table(tables: Sequence, headers: Sequence[str] | None = None, title: str = "",
                 paren: str = "t", digits: int = 2, row_order: Sequence[str] | None = None,
                 note: str = "") -> str:
    """Side-by-side regression table: coefficient with stars, then the
    t-statistic (or standard error with ``paren="se"``) in parentheses."""
    if paren not in ("t", "se"):
        raise ValueError("paren must be 't' or 'se'")
    headers = list(headers) if headers is not None else [tb.label or f"({k + 1})" for k, tb in enumerate(tables)]
    if row_order is None:
        row_order = []
        for tb in tables:
            for nm in tb.names:
                if nm not in row_order:
                    row_order.append(nm)

    def cell(tb, nm):
        if nm not in tb.names:
            return "", ""
        j = tb.names.index(nm)
        beta = tb.beta[j] if isinstance(tb, CoefTable) else tb.mean_coef[j]
        se = tb.se[j] if isinstance(tb, CoefTable) else tb.fm_se[j]
        t = tb.t[j]
        second = t if paren == "t" else se
        return f"{_num(beta, digits)}{stars(t)}", f"({_num(second, digits)})"

    cells = {nm: [cell(tb, nm) for tb in tables] for nm in row_order}
    label_w = max([len(r) for r in row_order] + [12])
    col_w = max([len(h) for h in headers] + [len(c) for row in cells.values() for pair in row for c in pair] + [12])
    lines = []
    if title:
        lines.append(title)
    lines.append(" " * label_w + "".join(f"{h:>{col_w + 2}}" for h in headers))
    lines.append(" " * label_w + "".join(f"{'(' + str(k + 1) + ')':>{col_w + 2}}" for k in range(len(tables))))
    lines.append("-" * (label_w + (col_w + 2) * len(tables)))
    for nm in row_order:
        firsts, seconds = zip(*cells[nm])
        lines.append(f"{nm:<{label_w}}" + "".join(f"{c:>{col_w + 2}}" for c in firsts))
        lines.append(" " * label_w + "".join(f"{c:>{col_w + 2}}" for c in seconds))
    lines.append("-" * (label_w + (col_w + 2) * len(tables)))
    obs = [f"{(tb.n_obs if isinstance(tb, CoefTable) else tb.n_obs):,}" for tb in tables]
    lines.append(f"{'Observations':<{label_w}}" + "".join(f"{o:>{col_w + 2}}" for o in obs))
    if all(isinstance(tb, CoefTable) for tb in tables):
        lines.append(f"{'R-squared':<{label_w}}" + "".join(f"{tb.r2:>{col_w + 2}.3f}" for tb in tables))
    else:
        lines.append(f"{'Periods':<{label_w}}" + "".join(f"{tb.T:>{col_w + 2},}" for tb in tables))
    dropped = [f"{h}: {', '.join(tb.dropped)}" for h, tb in zip(headers, tables)
               if isinstance(tb, CoefTable) and tb.dropped]
    if dropped:
        lines.append("Dropped as collinear: " + "; ".join(dropped))
    lines.append(f"{'t-statistics' if paren == 't' else 'Standard errors'} in parentheses; "
                 "*, **, *** denote significance at the 10%, 5%, and 1% levels.")
    if note:
        lines.append(note)
    return "\n".join(lines) + "\n"


def table_csv(tables: Sequence[CoefTable], headers: Sequence[str] | None = None) -> str:
    headers = list(headers) if headers is not None else [tb.label or f"({k + 1})" for k, tb in enumerate(tables)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "term", "coef", "se", "t", "n_obs", "n_clusters", "r2"])
    for h, tb in zip(headers, tables):
        for j, nm in enumerate(tb.names):
            w.writerow([h, nm, f"{tb.beta[j]:.10g}", f"{tb.se[j]:.10g}", f"{tb.t[j]:.10g}",
                        tb.n_obs, tb.n_clusters, f"{tb.r2:.10g}"])
    return buf.getvalue()


def format_decay(fits: Sequence[DecayFit], headers: Sequence[str], title: str = "") -> str:
    col_w = max([len(h) for h in headers] + [14])
    rows = []
    if title:
        rows.append(title)
    rows.append(" " * 14 + "".join(f"{h:>{col_w + 2}}" for h in headers))
    rows.append("-" * (14 + (col_w + 2) * len(fits)))
    for name, est, se_attr, t_attr in (("lambda1", "lambda1", "se_lambda1", "t_lambda1"),
                                       ("lambda2", "lambda2", "se_lambda2", "t_lambda2")):
        rows.append(f"{name:<14}" + "".join(
            f"{_num(getattr(f, est), 2) + stars(getattr(f, t_attr)):>{col_w + 2}}" for f in fits))
        rows.append(" " * 14 + "".join(f"{'(' + _num(getattr(f, t_attr), 2) + ')':>{col_w + 2}}" for f in fits))
    rows.append(f"{'l1(1 - l2)':<14}" + "".join(f"{_num(f.degree, 2):>{col_w + 2}}" for f in fits))
    rows.append(f"{'Observations':<14}" + "".join(f"{f.n_obs:>{col_w + 2},}" for f in fits))
    rows.append(f"{'Converged':<14}" + "".join(f"{str(f.converged):>{col_w + 2}}" for f in fits))
    rows.append("-" * (14 + (col_w + 2) * len(fits)))
    rows.append("t-statistics in parentheses (cluster-robust Gauss-Newton).")
    return "\n".join(rows) + "\n"
