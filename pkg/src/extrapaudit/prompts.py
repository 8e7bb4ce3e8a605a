"""Prompt construction and response parsing for the four forecast tasks.

Rank responses arrive 1-is-best (key "1" is the highest return) and are
flipped on parse to the 10-is-best convention used everywhere else.
"""
from __future__ import annotations

import csv
import io
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .panel import ALLOWED_LAGS, ContestPanel, MonthlySeries, N_STOCKS, return_ranks

SCHEMAS = ("rank", "sentiment", "distribution")

MIN_DISTRIBUTION_MONTHS = 60
MAX_DISTRIBUTION_MONTHS = 120

RANK_TEMPLATE = (
    "The following is the return data for ten stocks from week t-{L} to week t-1:\n"
    "Based on the information, please rank the return of these ten stocks in week t. "
    "How confident are you about the ranking?\n"
    "Your output will be in JSON format with the following format:\n"
    "'{{\"rank\":{{\"1\":\"stock id\",\"2\":\"stock id\",..., \"10\":\"stock id\"}}, \"confidence\": }}'. "
    "1 stands for the highest return and 10 for the lowest returns. "
    "Confidence represents a probability that ranges from 0 to 1."
)

SENTIMENT_TEMPLATE = (
    "The csv data contain the monthly stock returns in months t-12 to t-1.\n"
    "Please answer the following questions:\n"
    "Do you feel the direction of the stock market over the next six months will be up (bullish), "
    "no change (neutral) or down (bearish)?\n"
    "How confident are you about this prediction?\n"
    "Your output will be in json format with the following format:\n"
    "'{\"prediction\":,\"confidence\":}'. 1 stands for bullish, 0 for neutral and -1 for bearish.\n"
    "Confidence represents a probability that ranges from 0 to 1."
)

DISTRIBUTION_TEMPLATE = (
    "Below are the monthly returns for a financial asset over the past {n} months.\n"
    "Please answer the following questions on next month's return\n"
    "There is a 1-in-10 chance the actual return will be less than a%.\n"
    "I expect the next month's return to be: b%.\n"
    "There is a 1-in-10 chance the actual return will be greater than c%.\n"
    "Please return a JSON object in the following format:\n"
    "'{{\"low\": a%,\"expected\": b%,\"high\": c%}}'."
)

CHART_TEMPLATE = (
    "The charts contain daily stock price data for ten stocks from the past {L} weeks.\n"
    "The file names of the images contain the stock id.\n"
    "Based on the information, please rank the returns of these ten stocks in the following week.\n"
    "Your output will be in json format with the following format:\n"
    "{{\"1\": \"stock id\", \"2\": \"stock id\", ..., \"10\": \"stock id\"}}. "
    "1 stands for the highest return and 10 for the lowest return."
)

DATE_PATTERN = re.compile(r"\b(1[89]|20)\d{2}[-/](0[1-9]|1[0-2])\b")


# --------------------------------------------------------------------------- errors


class AnonymizationError(ValueError):
    """A prompt or attachment carries identifying text."""


class PromptError(ValueError):
    """Input window does not fit the prompt's requirements."""


class ResponseError(ValueError):
    """Base class for unusable forecaster responses."""

    tag = "malformed"


class NoJSONError(ResponseError):
    tag = "no_json"


class SchemaError(ResponseError):
    tag = "schema"


class DuplicateStockIdError(ResponseError):
    tag = "duplicate_id"


class MissingStockIdError(ResponseError):
    tag = "missing_id"


class UnknownStockIdError(ResponseError):
    tag = "unknown_id"


class ConfidenceRangeError(ResponseError):
    tag = "confidence_range"


class PredictionValueError(ResponseError):
    tag = "prediction_value"


class NonNumericFieldError(ResponseError):
    tag = "non_numeric"


class IntervalOrderError(ResponseError):
    tag = "interval_order"


# --------------------------------------------------------------------------- types


@dataclass(frozen=True)
class PromptBundle:
    text: str
    attachments: tuple[tuple[str, bytes], ...]
    schema: str
    stock_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.text:
            raise PromptError("prompt text is empty")
        names = [n for n, _ in self.attachments]
        if len(set(names)) != len(names):
            raise PromptError("attachment names must be unique")
        if self.schema not in SCHEMAS:
            raise PromptError(f"unknown schema {self.schema!r}")


@dataclass(frozen=True)
class RankForecast:
    """``ranking`` maps stock label to rank, 10 = best.

    ``scores`` carries the latent scores when the forecast came from a
    synthetic agent; parsed responses leave it unset.
    """

    ranking: dict[str, int]
    confidence: float | None = None
    scores: np.ndarray | None = field(default=None, compare=False)

    def ranks_for(self, stock_ids: Sequence[str]) -> np.ndarray:
        return np.array([self.ranking[s] for s in stock_ids], dtype=int)


@dataclass(frozen=True)
class SentimentForecast:
    prediction: int
    confidence: float


@dataclass(frozen=True)
class DistributionForecast:
    """Next-month forecast in percent units: 10th pct, expected, 90th pct."""

    low: float
    expected: float
    high: float


# --------------------------------------------------------------------------- builders


def anonymous_ids(n: int = N_STOCKS) -> tuple[str, ...]:
    return tuple(f"stock {k}" for k in range(1, n + 1))


def check_anonymized(bundle: PromptBundle, deny_list: Iterable[str] = ()) -> None:
    """Raise if any deny-listed token or a calendar date appears in the bundle."""
    blobs = [("text", bundle.text)] + [
        (name, payload.decode("utf-8", errors="replace")) for name, payload in bundle.attachments
    ]
    tokens = sorted({t for t in deny_list if t}, key=len, reverse=True)
    if tokens:
        pat = re.compile(r"(?<![A-Za-z0-9])(?:" + "|".join(map(re.escape, tokens)) + r")(?![A-Za-z0-9])")
        for where, blob in blobs:
            if not any(t in blob or t in where for t in tokens):
                continue
            hit = pat.search(where) or pat.search(blob)
            if hit:
                raise AnonymizationError(f"identifier {hit.group(0)!r} found in {where}")
    for where, blob in blobs:
        if DATE_PATTERN.search(blob):
            raise AnonymizationError(f"calendar date found in {where}")


def _grid_csv(grid: np.ndarray, ids: Sequence[str], L: int) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stock id", *[f"week t-{L - s}" for s in range(L)]])
    for label, row in zip(ids, grid):
        w.writerow([label, *[f"{v:.6f}" for v in row]])
    return buf.getvalue().encode()


def build_rank_prompt(panel: ContestPanel, L: int, deny_list: Iterable[str] | None = None) -> PromptBundle:
    """Rank prompt with the 10 x L grid attached as CSV under anonymous ids."""
    if L not in ALLOWED_LAGS:
        raise PromptError(f"L must be one of {ALLOWED_LAGS}")
    ids = anonymous_ids()
    bundle = PromptBundle(
        text=RANK_TEMPLATE.format(L=L),
        attachments=((f"returns_{L}w.csv", _grid_csv(panel.last(L), ids, L)),),
        schema="rank",
        stock_ids=ids,
    )
    check_anonymized(bundle, list(panel.stocks) + list(deny_list or ()))
    return bundle


def build_chart_prompt(panel: ContestPanel, L: int, deny_list: Iterable[str] | None = None) -> PromptBundle:
    """Chart-rank prompt; one candlestick image per stock named by its anonymous id."""
    from .charts import chart_filename, render_candlesticks

    if panel.daily_ohlc is None:
        raise PromptError(f"contest {panel.contest_id} has no daily bars")
    ids = anonymous_ids()
    attachments = []
    for k, label in enumerate(ids):
        svg = render_candlesticks(panel.daily_ohlc, L, stock=k, label=label)
        attachments.append((chart_filename(k + 1, L), svg))
    bundle = PromptBundle(CHART_TEMPLATE.format(L=L), tuple(attachments), "rank", ids)
    check_anonymized(bundle, list(panel.stocks) + list(deny_list or ()))
    return bundle


def _monthly_csv(values: np.ndarray, scale: float, header: str) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["month", header])
    n = len(values)
    for k, v in enumerate(values):
        w.writerow([f"t-{n - k}", f"{v * scale:.6f}"])
    return buf.getvalue().encode()


def build_sentiment_prompt(series: MonthlySeries, deny_list: Iterable[str] | None = None) -> PromptBundle:
    if len(series) != 12:
        raise PromptError(f"sentiment prompt needs exactly 12 monthly returns, got {len(series)}")
    bundle = PromptBundle(
        SENTIMENT_TEMPLATE,
        (("market_returns.csv", _monthly_csv(series.returns, 1.0, "return")),),
        "sentiment",
    )
    check_anonymized(bundle, list(deny_list or ()))
    return bundle


def build_distribution_prompt(series: MonthlySeries, deny_list: Iterable[str] | None = None) -> PromptBundle:
    """Distribution prompt; the attachment lists returns in percent."""
    n = len(series)
    if n < MIN_DISTRIBUTION_MONTHS:
        raise PromptError(f"fewer than five years of monthly returns ({n} < {MIN_DISTRIBUTION_MONTHS})")
    if n > MAX_DISTRIBUTION_MONTHS:
        raise PromptError(f"more than ten years of monthly returns ({n} > {MAX_DISTRIBUTION_MONTHS})")
    bundle = PromptBundle(
        DISTRIBUTION_TEMPLATE.format(n=n),
        (("asset_returns.csv", _monthly_csv(series.returns, 100.0, "return_pct")),),
        "distribution",
    )
    check_anonymized(bundle, [series.label] + list(deny_list or ()))
    return bundle


def read_grid_attachment(payload: bytes) -> tuple[tuple[str, ...], np.ndarray]:
    """Inverse of the rank-prompt CSV: (ids, grid with oldest week first)."""
    rows = list(csv.reader(io.StringIO(payload.decode())))
    ids = tuple(r[0] for r in rows[1:])
    grid = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return ids, grid


def read_monthly_attachment(payload: bytes) -> tuple[np.ndarray, str]:
    """Values and unit header ("return" decimals or "return_pct" percent)."""
    rows = list(csv.reader(io.StringIO(payload.decode())))
    return np.array([float(r[1]) for r in rows[1:]]), rows[0][1]


# --------------------------------------------------------------------------- parsing


def extract_json_object(raw: str) -> dict:
    """Return the first balanced ``{...}`` object in ``raw`` that decodes.

    Bare percent signs after numbers (``"low": -10%``) are tolerated.
    """
    start = raw.find("{")
    while start != -1:
        depth = 0
        in_str = False
        esc = False
        for k in range(start, len(raw)):
            ch = raw[k]
            if in_str:
                if esc:
                    esc = False
                elif ch == "\\":
                    esc = True
                elif ch == '"':
                    in_str = False
                continue
            if ch == '"':
                in_str = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    candidate = raw[start:k + 1]
                    obj = _loads_lenient(candidate)
                    if isinstance(obj, dict):
                        return obj
                    break
        start = raw.find("{", start + 1)
    raise NoJSONError("no JSON object found in response")


_BARE_PERCENT = re.compile(r'(?<=[:\[,\s])\s*(-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?)\s*%')


def _loads_lenient(text: str):
    for attempt in (text, _BARE_PERCENT.sub(r"\1", text)):
        try:
            return json.loads(attempt)
        except json.JSONDecodeError:
            continue
    return None


def _number(value, name: str) -> float:
    if isinstance(value, bool):
        raise NonNumericFieldError(f"{name} must be numeric")
    if isinstance(value, (int, float)):
        out = float(value)
    elif isinstance(value, str):
        text = value.strip().rstrip("%").strip()
        try:
            out = float(text)
        except ValueError:
            raise NonNumericFieldError(f"{name} is not numeric: {value!r}") from None
    else:
        raise NonNumericFieldError(f"{name} is not numeric: {value!r}")
    if not math.isfinite(out):
        raise NonNumericFieldError(f"{name} is not finite")
    return out


def _confidence(obj: dict, required: bool) -> float | None:
    if "confidence" not in obj or obj["confidence"] in (None, ""):
        if required:
            raise SchemaError("missing confidence")
        return None
    c = _number(obj["confidence"], "confidence")
    if not 0.0 <= c <= 1.0:
        raise ConfidenceRangeError(f"confidence {c} outside [0, 1]")
    return c


def parse_rank_response(raw: str, stock_ids: Sequence[str] = anonymous_ids()) -> RankForecast:
    """Parse ``{"rank": {"1": id, ...}, "confidence": p}`` or the chart
    variant ``{"1": id, ...}`` into a 10-is-best ranking."""
    obj = extract_json_object(raw)
    chart_form = "rank" not in obj
    mapping = obj if chart_form else obj["rank"]
    if not isinstance(mapping, dict):
        raise SchemaError("rank must be an object")
    n = len(stock_ids)
    slots = {}
    for key, value in mapping.items():
        if chart_form and key == "confidence":
            continue
        try:
            pos = int(str(key).strip())
        except ValueError:
            raise SchemaError(f"rank key {key!r} is not a position") from None
        if not 1 <= pos <= n or pos in slots:
            raise SchemaError(f"rank position {key!r} invalid or repeated")
        slots[pos] = str(value).strip()
    known = set(stock_ids)
    seen: dict[str, int] = {}
    for pos in sorted(slots):
        sid = slots[pos]
        if sid not in known:
            raise UnknownStockIdError(f"unknown stock id {sid!r}")
        if sid in seen:
            raise DuplicateStockIdError(f"stock id {sid!r} listed twice")
        seen[sid] = n + 1 - pos
    missing = [s for s in stock_ids if s not in seen]
    if missing:
        raise MissingStockIdError(f"stock ids missing from ranking: {', '.join(missing)}")
    return RankForecast(ranking=seen, confidence=_confidence(obj, required=not chart_form))


def parse_sentiment_response(raw: str) -> SentimentForecast:
    obj = extract_json_object(raw)
    if "prediction" not in obj:
        raise SchemaError("missing prediction")
    p = _number(obj["prediction"], "prediction")
    if p not in (-1.0, 0.0, 1.0):
        raise PredictionValueError(f"prediction {obj['prediction']!r} not in {{-1, 0, 1}}")
    return SentimentForecast(prediction=int(p), confidence=_confidence(obj, required=True))


def parse_distribution_response(raw: str) -> DistributionForecast:
    obj = extract_json_object(raw)
    for key in ("low", "expected", "high"):
        if key not in obj:
            raise SchemaError(f"missing {key}")
    low, exp, high = (_number(obj[k], k) for k in ("low", "expected", "high"))
    if low > high:
        raise IntervalOrderError(f"low {low} exceeds high {high}")
    if not low <= exp <= high:
        raise IntervalOrderError(f"expected {exp} outside [{low}, {high}]")
    return DistributionForecast(low, exp, high)


PARSERS = {
    "rank": parse_rank_response,
    "sentiment": parse_sentiment_response,
    "distribution": parse_distribution_response,
}


def parse_response(schema: str, raw: str, stock_ids: Sequence[str] = anonymous_ids()):
    if schema == "rank":
        return parse_rank_response(raw, stock_ids)
    return PARSERS[schema](raw)


def parse_many(schema: str, raws: Iterable[str]) -> tuple[list, Counter]:
    """Parse responses, dropping failures; returns (forecasts or None, tally of failure tags)."""
    out, tally = [], Counter()
    for raw in raws:
        try:
            out.append(parse_response(schema, raw))
        except ResponseError as exc:
            tally[exc.tag] += 1
            out.append(None)
    return out, tally


# --------------------------------------------------------------------------- rendering


def render_rank_response(forecast: RankForecast, chart: bool = False) -> str:
    n = len(forecast.ranking)
    by_pos = {n + 1 - r: sid for sid, r in forecast.ranking.items()}
    ranking = {str(pos): by_pos[pos] for pos in range(1, n + 1)}
    if chart:
        return json.dumps(ranking)
    return json.dumps({"rank": ranking, "confidence": forecast.confidence})


def render_sentiment_response(forecast: SentimentForecast) -> str:
    return json.dumps({"prediction": forecast.prediction, "confidence": forecast.confidence})


def render_distribution_response(forecast: DistributionForecast) -> str:
    return json.dumps({
        "low": f"{forecast.low!r}%",
        "expected": f"{forecast.expected!r}%",
        "high": f"{forecast.high!r}%",
    })


def ranking_from_scores(scores: Sequence[float], stock_ids: Sequence[str] = anonymous_ids()) -> dict[str, int]:
    ranks = return_ranks(scores)
    return {sid: int(r) for sid, r in zip(stock_ids, ranks)}
