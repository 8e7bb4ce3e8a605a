"""Return panels: contest grids, monthly series, ranks, lag matrices and the
synthetic generator used in place of vendor data.

All returns are simple decimal returns (0.02 == 2%).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

N_STOCKS = 10
ALLOWED_LAGS = (12, 24)
DAYS_PER_WEEK = 5

Y_KINDS = ("forcerank", "llm_rank", "realized_return", "realized_rank", "adjusted_return")
X_KINDS = ("returns", "ranks", "signed_returns", "adjusted_returns")


class PanelError(ValueError):
    """Invalid panel contents or configuration."""


class ParseError(PanelError):
    """Malformed data file. ``line`` is 1-based and counts the header."""

    def __init__(self, message: str, line: int | None = None, path: str | Path | None = None):
        self.line = line
        self.path = str(path) if path is not None else None
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class MalformedRowError(ParseError):
    pass


class NonNumericReturnError(ParseError):
    pass


class ContestSizeError(ParseError):
    pass


class DuplicateStockError(ParseError):
    pass


@dataclass(frozen=True, eq=False)
class DailyOHLC:
    """Daily bars for the ten contest stocks.

    ``prices`` has shape (10, n_days, 4) with columns open, high, low, close.
    """

    dates: np.ndarray  # datetime64[D], shape (n_days,)
    prices: np.ndarray

    def __post_init__(self):
        dates = np.asarray(self.dates, dtype="datetime64[D]")
        prices = np.asarray(self.prices, dtype=float)
        if prices.ndim != 3 or prices.shape[2] != 4 or prices.shape[1] != dates.shape[0]:
            raise PanelError("ohlc prices must have shape (stocks, days, 4) matching dates")
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "prices", prices)

    def n_weeks(self) -> int:
        return len(week_index(self.dates)[1])

    def __eq__(self, other):
        if not isinstance(other, DailyOHLC):
            return NotImplemented
        return np.array_equal(self.dates, other.dates) and np.array_equal(self.prices, other.prices)


@dataclass(frozen=True, eq=False)
class ContestPanel:
    """One contest: ten stocks, ``L`` weekly lags and the forecast-week returns.

    ``returns[:, s]`` holds the return ``L - 1 - s`` weeks before week t, so the
    last column is week t itself.
    """

    contest_id: str
    stocks: tuple[str, ...]
    returns: np.ndarray
    realized_next: np.ndarray
    daily_ohlc: DailyOHLC | None = None
    next_daily: np.ndarray | None = None  # (10, 5) daily returns of week t+1

    def __post_init__(self):
        stocks = tuple(str(s) for s in self.stocks)
        returns = np.array(self.returns, dtype=float)
        realized = np.array(self.realized_next, dtype=float)
        if len(stocks) != N_STOCKS:
            raise PanelError(f"contest {self.contest_id}: contest requires {N_STOCKS} stocks, got {len(stocks)}")
        if len(set(stocks)) != len(stocks):
            raise PanelError(f"contest {self.contest_id}: duplicate stock id")
        if returns.ndim != 2 or returns.shape[0] != N_STOCKS or returns.shape[1] not in ALLOWED_LAGS:
            raise PanelError(f"contest {self.contest_id}: returns must be 10 x L with L in {ALLOWED_LAGS}")
        if realized.shape != (N_STOCKS,):
            raise PanelError(f"contest {self.contest_id}: realized_next must hold 10 values")
        if not (np.all(np.isfinite(returns)) and np.all(np.isfinite(realized))):
            raise PanelError(f"contest {self.contest_id}: missing or non-finite return")
        returns.flags.writeable = False
        realized.flags.writeable = False
        object.__setattr__(self, "stocks", stocks)
        object.__setattr__(self, "returns", returns)
        object.__setattr__(self, "realized_next", realized)
        if self.next_daily is not None:
            nd = np.array(self.next_daily, dtype=float)
            if nd.ndim != 2 or nd.shape[0] != N_STOCKS:
                raise PanelError(f"contest {self.contest_id}: next_daily must be 10 x days")
            nd.flags.writeable = False
            object.__setattr__(self, "next_daily", nd)

    @property
    def n_lags(self) -> int:
        return self.returns.shape[1]

    def last(self, L: int) -> np.ndarray:
        """The most recent ``L`` weekly columns, oldest first."""
        if L > self.n_lags:
            raise PanelError(f"contest {self.contest_id} has {self.n_lags} lags, {L} requested")
        return self.returns[:, self.n_lags - L:]

    def __eq__(self, other):
        if not isinstance(other, ContestPanel):
            return NotImplemented
        return (
            self.contest_id == other.contest_id
            and self.stocks == other.stocks
            and np.array_equal(self.returns, other.returns)
            and np.array_equal(self.realized_next, other.realized_next)
            and self.daily_ohlc == other.daily_ohlc
            and _opt_equal(self.next_daily, other.next_daily)
        )


def _opt_equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


@dataclass(frozen=True, eq=False)
class MonthlySeries:
    label: str
    months: tuple[str, ...]
    returns: np.ndarray

    def __post_init__(self):
        months = tuple(self.months)
        returns = np.array(self.returns, dtype=float)
        if len(months) != returns.shape[0]:
            raise PanelError(f"series {self.label}: months and returns differ in length")
        idx = [_month_ordinal(m) for m in months]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise PanelError(f"series {self.label}: months must be strictly increasing")
        returns.flags.writeable = False
        object.__setattr__(self, "months", months)
        object.__setattr__(self, "returns", returns)

    def __len__(self):
        return len(self.months)

    def window(self, end: int, length: int) -> "MonthlySeries":
        """The ``length`` months ending just before position ``end``."""
        if end - length < 0 or end > len(self):
            raise PanelError(f"series {self.label}: window [{end - length}, {end}) out of range")
        sub = MonthlySeries(self.label, self.months[end - length:end], self.returns[end - length:end])
        if not sub.is_contiguous():
            raise PanelError(f"series {self.label}: gap inside window")
        return sub

    def is_contiguous(self) -> bool:
        idx = [_month_ordinal(m) for m in self.months]
        return all(b - a == 1 for a, b in zip(idx, idx[1:]))

    def __eq__(self, other):
        if not isinstance(other, MonthlySeries):
            return NotImplemented
        return (
            self.label == other.label
            and self.months == other.months
            and np.array_equal(self.returns, other.returns)
        )


def _month_ordinal(stamp: str) -> int:
    try:
        year, month = stamp.split("-")
        y, m = int(year), int(month)
    except ValueError:
        raise PanelError(f"bad month stamp {stamp!r}, expected YYYY-MM") from None
    if len(year) != 4 or len(month) != 2 or not 1 <= m <= 12:
        raise PanelError(f"bad month stamp {stamp!r}, expected YYYY-MM")
    return y * 12 + (m - 1)


def _month_stamp(ordinal: int) -> str:
    return f"{ordinal // 12:04d}-{ordinal % 12 + 1:02d}"


def month_stamps(start: str, n: int) -> tuple[str, ...]:
    base = _month_ordinal(start)
    return tuple(_month_stamp(base + k) for k in range(n))


@dataclass(frozen=True, eq=False)
class LagMatrix:
    """Stacked regression design: one row per contest-stock observation."""

    y: np.ndarray
    x: np.ndarray
    names: tuple[str, ...]
    cluster_id: np.ndarray
    stock_id: np.ndarray
    n_lags: int
    signed: bool = False

    @property
    def lags(self) -> np.ndarray:
        """Lag columns without the intercept (unsigned designs only)."""
        return self.x[:, 1:]


# --------------------------------------------------------------------------- ranks


def return_ranks(values: Sequence[float]) -> np.ndarray:
    """Rank values 1..n with n for the highest; ties go to the earlier position
    getting the lower rank."""
    v = np.asarray(values, dtype=float)
    if v.ndim != 1 or v.size < 2:
        raise PanelError("return_ranks needs at least two values")
    order = np.lexsort((np.arange(v.size), v))  # primary key: value, secondary: index
    ranks = np.empty(v.size, dtype=int)
    ranks[order] = np.arange(1, v.size + 1)
    return ranks


def lag_names(L: int, prefix: str = "Return") -> tuple[str, ...]:
    return tuple(f"{prefix}_t" if s == 0 else f"{prefix}_t-{s}" for s in range(L))


def build_lag_matrix(
    panels: Sequence[ContestPanel],
    y_kind: str,
    x_kind: str,
    L: int | None = None,
    y_values: Mapping[str, Sequence[float]] | None = None,
) -> LagMatrix:
    """Stack panels into a regression design.

    Lag columns are ordered most recent first (week t, t-1, ...), after a
    leading intercept. ``y_values`` maps contest id to ten dependent values
    in stock order and is required for the ``forcerank`` and ``llm_rank``
    dependents.
    """
    if y_kind not in Y_KINDS:
        raise PanelError(f"unknown y_kind {y_kind!r}")
    if x_kind not in X_KINDS:
        raise PanelError(f"unknown x_kind {x_kind!r}")
    if not panels:
        raise PanelError("no panels")
    if L is None:
        L = panels[0].n_lags

    ys, xs, clusters, stocks = [], [], [], []
    for p in panels:
        grid = p.last(L)[:, ::-1]  # column s is lag s
        if y_kind in ("forcerank", "llm_rank"):
            if y_values is None or p.contest_id not in y_values:
                raise PanelError(f"missing {y_kind} values for contest {p.contest_id}")
            y = np.asarray(y_values[p.contest_id], dtype=float)
            if y.shape != (N_STOCKS,):
                raise PanelError(f"contest {p.contest_id}: expected 10 {y_kind} values")
        elif y_kind == "realized_return":
            y = p.realized_next
        elif y_kind == "realized_rank":
            y = return_ranks(p.realized_next).astype(float)
        else:
            y = p.realized_next - p.realized_next.mean()

        if x_kind == "returns":
            x = grid
        elif x_kind == "adjusted_returns":
            x = grid - grid.mean(axis=0, keepdims=True)
        elif x_kind == "ranks":
            x = np.column_stack([return_ranks(grid[:, s]) for s in range(L)]).astype(float)
        else:
            x = np.hstack([np.maximum(grid, 0.0), np.minimum(grid, 0.0)])
        ys.append(y)
        xs.append(x)
        clusters.extend([p.contest_id] * N_STOCKS)
        stocks.extend(p.stocks)

    X = np.vstack(xs)
    X = np.hstack([np.ones((X.shape[0], 1)), X])
    if x_kind == "signed_returns":
        names = ("const",) + lag_names(L, "Return+") + lag_names(L, "Return-")
    elif x_kind == "ranks":
        names = ("const",) + lag_names(L, "Rank")
    elif x_kind == "adjusted_returns":
        names = ("const",) + lag_names(L, "AdjReturn")
    else:
        names = ("const",) + lag_names(L)
    return LagMatrix(
        y=np.concatenate(ys),
        x=X,
        names=names,
        cluster_id=np.asarray(clusters),
        stock_id=np.asarray(stocks),
        n_lags=L,
        signed=x_kind == "signed_returns",
    )


# --------------------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SynthConfig:
    n_contests: int = 500
    L: int = 12
    reversal_coeff: float = -0.3
    # Innovation sd giving a stationary weekly sd near 4.25%.
    noise_sd: float = 0.0405
    seed: int = 0
    with_ohlc: bool = True
    start_date: str = "2016-02-01"

    def validate(self) -> None:
        if self.n_contests < 1:
            raise PanelError("n_contests must be >= 1")
        if self.L not in ALLOWED_LAGS:
            raise PanelError(f"L must be one of {ALLOWED_LAGS}")
        if not (self.noise_sd >= 0 and math.isfinite(self.noise_sd)):
            raise PanelError("noise_sd must be >= 0")
        if not abs(self.reversal_coeff) < 1:
            raise PanelError("|reversal_coeff| must be < 1")
        if self.reversal_coeff > 0:
            raise PanelError("reversal_coeff must be <= 0")


def synth_contests(config: SynthConfig) -> list[ContestPanel]:
    """Contests whose weekly returns follow a Gaussian AR(1) per stock.

    Each stock's series starts from the stationary distribution and runs for
    L + 1 weeks; the final week is ``realized_next``. Daily bars (5 per week)
    compound exactly to the weekly returns, with each day opening at the
    previous close.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    rho, sd, L = config.reversal_coeff, config.noise_sd, config.L
    n = config.n_contests
    stat_sd = sd / math.sqrt(1.0 - rho * rho)

    series = np.empty((n, N_STOCKS, L + 1))
    series[:, :, 0] = rng.standard_normal((n, N_STOCKS)) * stat_sd
    shocks = rng.standard_normal((n, N_STOCKS, L)) * sd
    for k in range(1, L + 1):
        series[:, :, k] = rho * series[:, :, k - 1] + shocks[:, :, k - 1]

    panels = []
    start = np.datetime64(config.start_date, "D")
    for c in range(n):
        weekly = series[c]
        ohlc = next_daily = None
        if config.with_ohlc:
            if np.any(weekly <= -1.0):
                raise PanelError("synthetic weekly return <= -100%; lower noise_sd")
            week0 = start + np.timedelta64(7 * c, "D")
            daily = _split_weekly(weekly, rng)
            ohlc = _daily_bars(daily[:, : L * DAYS_PER_WEEK], week0, L, rng)
            next_daily = daily[:, L * DAYS_PER_WEEK:]
        panels.append(
            ContestPanel(
                contest_id=f"C{c + 1:05d}",
                stocks=tuple(f"S{c + 1:05d}_{k + 1:02d}" for k in range(N_STOCKS)),
                returns=weekly[:, :L],
                realized_next=weekly[:, L],
                daily_ohlc=ohlc,
                next_daily=next_daily,
            )
        )
    return panels


def _split_weekly(weekly: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Daily simple returns whose product over each week matches ``weekly``."""
    n_stocks, n_weeks = weekly.shape
    z = rng.standard_normal((n_stocks, n_weeks, DAYS_PER_WEEK)) * 0.01
    z -= z.mean(axis=2, keepdims=True)
    z += np.log1p(weekly)[:, :, None] / DAYS_PER_WEEK
    return np.expm1(z).reshape(n_stocks, n_weeks * DAYS_PER_WEEK)


def _daily_bars(daily: np.ndarray, week0: np.datetime64, L: int, rng: np.random.Generator) -> DailyOHLC:
    n_stocks, n_days = daily.shape
    closes = 100.0 * np.cumprod(1.0 + daily, axis=1)
    opens = np.concatenate([np.full((n_stocks, 1), 100.0), closes[:, :-1]], axis=1)
    wick_up = np.abs(rng.standard_normal((n_stocks, n_days))) * 0.004
    wick_dn = np.abs(rng.standard_normal((n_stocks, n_days))) * 0.004
    highs = np.maximum(opens, closes) * (1.0 + wick_up)
    lows = np.minimum(opens, closes) * (1.0 - wick_dn)
    dates = np.array(
        [week0 + np.timedelta64(7 * w + d, "D") for w in range(L) for d in range(DAYS_PER_WEEK)],
        dtype="datetime64[D]",
    )
    return DailyOHLC(dates=dates, prices=np.stack([opens, highs, lows, closes], axis=2))


def week_index(dates: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map each date to a 0-based week number (weeks start on Monday)."""
    d = np.asarray(dates, dtype="datetime64[D]").astype(np.int64)
    # 1970-01-01 was a Thursday; shift so weeks start on Monday.
    week = (d + 3) // 7
    uniq, inv = np.unique(week, return_inverse=True)
    return inv, uniq


def weekly_from_daily(ohlc: DailyOHLC) -> np.ndarray:
    """Compound open-to-close daily returns into weekly returns, shape (stocks, weeks)."""
    inv, uniq = week_index(ohlc.dates)
    oc = ohlc.prices[:, :, 3] / ohlc.prices[:, :, 0]
    out = np.ones((ohlc.prices.shape[0], uniq.size))
    for w in range(uniq.size):
        out[:, w] = np.prod(oc[:, inv == w], axis=1)
    return out - 1.0


@dataclass(frozen=True)
class MonthlySynthConfig:
    n_series: int = 1000
    history: int = 120
    n_year_months: int = 100
    mean_center: float = 0.01
    mean_spread: float = 0.005
    vol_low: float = 0.05
    vol_high: float = 0.15
    seed: int = 0


@dataclass(frozen=True, eq=False)
class StockMonth:
    """A monthly history with its next-month realized return."""

    series: MonthlySeries
    year_month: str
    realized: float


def synth_stock_months(config: MonthlySynthConfig) -> list[StockMonth]:
    """IID Gaussian monthly histories with heterogeneous means and volatilities."""
    if config.n_series < 1 or config.history < 1 or config.n_year_months < 1:
        raise PanelError("n_series, history and n_year_months must be >= 1")
    rng = np.random.default_rng(config.seed)
    out = []
    for k in range(config.n_series):
        mu = config.mean_center + config.mean_spread * rng.standard_normal()
        sigma = rng.uniform(config.vol_low, config.vol_high)
        draws = mu + sigma * rng.standard_normal(config.history + 1)
        # Year-months spaced nine months apart, starting 1935-01.
        realized_ord = _month_ordinal("1935-01") + 9 * (k % config.n_year_months)
        months = tuple(_month_stamp(o) for o in range(realized_ord - config.history, realized_ord + 1))
        series = MonthlySeries(f"M{k + 1:05d}", months[:-1], draws[:-1])
        out.append(StockMonth(series=series, year_month=months[-1], realized=float(draws[-1])))
    return out


def synth_market(n_months: int = 444, rho: float = 0.05, mean: float = 0.008, sd: float = 0.045,
                 seed: int = 0, start: str = "1987-07") -> MonthlySeries:
    """A monthly index return series from a Gaussian AR(1) around ``mean``."""
    if n_months < 2:
        raise PanelError("n_months must be >= 2")
    rng = np.random.default_rng(seed)
    r = np.empty(n_months)
    r[0] = mean + sd / math.sqrt(1 - rho * rho) * rng.standard_normal()
    for k in range(1, n_months):
        r[k] = mean + rho * (r[k - 1] - mean) + sd * rng.standard_normal()
    return MonthlySeries("market", month_stamps(start, n_months), r)


# --------------------------------------------------------------------------- CSV I/O


def _fmt(x: float) -> str:
    return repr(float(x))


def write_contest_panel(panels: Sequence[ContestPanel], path: str | Path) -> None:
    if not panels:
        raise PanelError("no panels to write")
    L = panels[0].n_lags
    if any(p.n_lags != L for p in panels):
        raise PanelError("all panels in one file must share L")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["contest_id", "stock_id", *[f"w{k + 1}" for k in range(L)], "realized_next"])
        for p in panels:
            for i, stock in enumerate(p.stocks):
                w.writerow([p.contest_id, stock, *map(_fmt, p.returns[i]), _fmt(p.realized_next[i])])


def _float(text: str, line: int, path, what: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise NonNumericReturnError(f"non-numeric {what} {text!r}", line, path) from None
    if not math.isfinite(value):
        raise NonNumericReturnError(f"non-finite {what} {text!r}", line, path)
    return value


def load_contest_panel(path: str | Path) -> list[ContestPanel]:
    """Read the contest CSV: ten consecutive rows per contest."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise MalformedRowError("empty file", 1, path)
    header = [h.strip() for h in rows[0]]
    L = len(header) - 3
    expected = ["contest_id", "stock_id", *[f"w{k + 1}" for k in range(L)], "realized_next"]
    if L not in ALLOWED_LAGS or header != expected:
        raise MalformedRowError("header must be contest_id,stock_id,w1..wL,realized_next with L in {12, 24}", 1, path)

    blocks: list[tuple[str, list[tuple[int, list[str]]]]] = []
    seen_ids: set[str] = set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise MalformedRowError(f"expected {len(header)} fields, got {len(row)}", lineno, path)
        cid = row[0].strip()
        if not blocks or blocks[-1][0] != cid:
            if cid in seen_ids:
                raise MalformedRowError(f"contest {cid} rows are not consecutive", lineno, path)
            seen_ids.add(cid)
            blocks.append((cid, []))
        blocks[-1][1].append((lineno, row))

    panels = []
    for cid, block in blocks:
        if len(block) != N_STOCKS:
            raise ContestSizeError(
                f"contest requires {N_STOCKS} stocks; contest {cid} has {len(block)}", block[-1][0], path
            )
        stocks, grid, nxt = [], [], []
        for lineno, row in block:
            sid = row[1].strip()
            if not sid:
                raise MalformedRowError("empty stock_id", lineno, path)
            if sid in stocks:
                raise DuplicateStockError(f"duplicate stock id {sid!r} in contest {cid}", lineno, path)
            stocks.append(sid)
            cells = row[2:]
            for k, cell in enumerate(cells):
                if not cell.strip():
                    raise MalformedRowError(f"missing value in column {header[k + 2]}", lineno, path)
            grid.append([_float(c, lineno, path, "return") for c in cells[:-1]])
            nxt.append(_float(cells[-1], lineno, path, "realized_next"))
        panels.append(ContestPanel(cid, tuple(stocks), np.array(grid), np.array(nxt)))
    return panels


def write_ohlc(panels: Sequence[ContestPanel], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["contest_id", "stock_id", "date", "open", "high", "low", "close"])
        for p in panels:
            if p.daily_ohlc is None:
                continue
            o = p.daily_ohlc
            for i, stock in enumerate(p.stocks):
                for d, date in enumerate(o.dates):
                    w.writerow([p.contest_id, stock, str(date), *map(_fmt, o.prices[i, d])])


def load_ohlc(path: str | Path) -> dict[str, tuple[tuple[str, ...], DailyOHLC]]:
    """Read the OHLC sidecar; returns contest id -> (stock order, bars)."""
    path = Path(path)
    data: dict[str, dict[str, list]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["contest_id", "stock_id", "date", "open", "high", "low", "close"]:
            raise MalformedRowError("bad OHLC header", 1, path)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 7:
                raise MalformedRowError("expected 7 fields", lineno, path)
            cid, sid, date = row[0], row[1], row[2]
            vals = [_float(v, lineno, path, "price") for v in row[3:]]
            data.setdefault(cid, {}).setdefault(sid, []).append((date, vals))
    out = {}
    for cid, per_stock in data.items():
        stocks = tuple(per_stock)
        dates = [d for d, _ in per_stock[stocks[0]]]
        for s in stocks:
            if [d for d, _ in per_stock[s]] != dates:
                raise ParseError(f"contest {cid}: stocks have different OHLC dates", None, path)
        prices = np.array([[v for _, v in per_stock[s]] for s in stocks])
        out[cid] = (stocks, DailyOHLC(np.array(dates, dtype="datetime64[D]"), prices))
    return out


def write_next_daily(panels: Sequence[ContestPanel], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["contest_id", "stock_id", "day", "return"])
        for p in panels:
            if p.next_daily is None:
                continue
            for i, stock in enumerate(p.stocks):
                for d, r in enumerate(p.next_daily[i]):
                    w.writerow([p.contest_id, stock, d + 1, _fmt(r)])


def load_next_daily(path: str | Path) -> dict[str, dict[str, np.ndarray]]:
    path = Path(path)
    out: dict[str, dict[str, list]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["contest_id", "stock_id", "day", "return"]:
            raise MalformedRowError("bad next-week daily header", 1, path)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise MalformedRowError("expected 4 fields", lineno, path)
            out.setdefault(row[0], {}).setdefault(row[1], []).append(_float(row[3], lineno, path, "return"))
    return {c: {s: np.array(v) for s, v in d.items()} for c, d in out.items()}


def attach_sidecars(panels: Sequence[ContestPanel], ohlc=None, next_daily=None) -> list[ContestPanel]:
    """Return panels with OHLC bars and next-week daily returns joined by contest/stock id."""
    out = []
    for p in panels:
        bars = nd = None
        if ohlc is not None and p.contest_id in ohlc:
            stocks, o = ohlc[p.contest_id]
            order = [stocks.index(s) for s in p.stocks]
            bars = DailyOHLC(o.dates, o.prices[order])
        if next_daily is not None and p.contest_id in next_daily:
            nd = np.array([next_daily[p.contest_id][s] for s in p.stocks])
        out.append(ContestPanel(p.contest_id, p.stocks, p.returns, p.realized_next, bars, nd))
    return out


def write_monthly(series: MonthlySeries, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["month", "return"])
        for m, r in zip(series.months, series.returns):
            w.writerow([m, _fmt(r)])


def load_monthly(path: str | Path, label: str | None = None) -> MonthlySeries:
    path = Path(path)
    months, returns = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["month", "return"]:
            raise MalformedRowError("header must be month,return", 1, path)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise MalformedRowError("expected 2 fields", lineno, path)
            try:
                _month_ordinal(row[0])
            except PanelError as exc:
                raise MalformedRowError(str(exc), lineno, path) from None
            months.append(row[0])
            returns.append(_float(row[1], lineno, path, "return"))
    try:
        return MonthlySeries(label or path.stem, tuple(months), np.array(returns))
    except PanelError as exc:
        raise ParseError(str(exc), None, path) from None


def write_stock_months(items: Sequence[StockMonth], path: str | Path) -> None:
    """Long format: history rows followed by one realized row per series."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series_id", "month", "return", "role"])
        for item in items:
            for m, r in zip(item.series.months, item.series.returns):
                w.writerow([item.series.label, m, _fmt(r), "history"])
            w.writerow([item.series.label, item.year_month, _fmt(item.realized), "realized"])


def load_stock_months(path: str | Path) -> list[StockMonth]:
    path = Path(path)
    history: dict[str, tuple[list, list]] = {}
    realized: dict[str, tuple[str, float]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["series_id", "month", "return", "role"]:
            raise MalformedRowError("header must be series_id,month,return,role", 1, path)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise MalformedRowError("expected 4 fields", lineno, path)
            sid, month, text, role = row
            try:
                _month_ordinal(month)
            except PanelError as exc:
                raise MalformedRowError(str(exc), lineno, path) from None
            value = _float(text, lineno, path, "return")
            if role == "history":
                if sid in realized:
                    raise MalformedRowError(f"series {sid}: history after realized row", lineno, path)
                months, values = history.setdefault(sid, ([], []))
                months.append(month)
                values.append(value)
            elif role == "realized":
                if sid in realized:
                    raise MalformedRowError(f"series {sid}: second realized row", lineno, path)
                realized[sid] = (month, value)
            else:
                raise MalformedRowError(f"unknown role {role!r}", lineno, path)
    out = []
    for sid, (months, values) in history.items():
        if sid not in realized:
            raise ParseError(f"series {sid}: no realized row", None, path)
        month, value = realized[sid]
        try:
            series = MonthlySeries(sid, tuple(months), np.array(values))
        except PanelError as exc:
            raise ParseError(str(exc), None, path) from None
        if _month_ordinal(month) != _month_ordinal(months[-1]) + 1:
            raise ParseError(f"series {sid}: realized month {month} does not follow its history", None, path)
        out.append(StockMonth(series, month, value))
    return out
