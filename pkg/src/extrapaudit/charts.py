"""Candlestick charts as SVG documents.

Charts carry no dates, gridlines or volume. The only text is the stock label
and the two price labels at the top and bottom of the padded axis, which is
enough for :func:`read_candles` to recover the bars.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .panel import DailyOHLC, PanelError, week_index

WIDTH = 640
HEIGHT = 320
MARGIN_LEFT = 64
MARGIN_RIGHT = 8
MARGIN_TOP = 12
MARGIN_BOTTOM = 12
PAD = 0.05

COLORS = {"up": "#1a9850", "down": "#d73027", "flat": "#808080"}


class ChartError(PanelError):
    pass


@dataclass(frozen=True)
class CandleChart:
    label: str
    width: int
    height: int
    candles: np.ndarray  # (n_days, 4) open, high, low, close; first open == 100
    color_rule: str = "green-up/red-down/gray-flat"


def chart_filename(k: int, L: int) -> str:
    return f"stock_{k}_{L}w.svg"


def last_weeks(ohlc: DailyOHLC, L: int) -> DailyOHLC:
    inv, uniq = week_index(ohlc.dates)
    if uniq.size < L:
        raise ChartError(f"daily bars span {uniq.size} weeks, {L} required")
    keep = inv >= uniq.size - L
    return DailyOHLC(ohlc.dates[keep], ohlc.prices[:, keep])


def make_chart(ohlc: DailyOHLC, L: int, stock: int = 0, label: str = "stock 1",
               width: int = WIDTH, height: int = HEIGHT) -> CandleChart:
    n_weeks = ohlc.n_weeks()
    if n_weeks != L:
        raise ChartError(f"daily bars span {n_weeks} weeks, expected {L}")
    bars = ohlc.prices[stock]
    if np.any(bars <= 0) or not np.all(np.isfinite(bars)):
        raise ChartError("prices must be positive")
    o, h, lo, c = bars.T
    if np.any(h < np.maximum(o, c)) or np.any(lo > np.minimum(o, c)):
        raise ChartError("bar high/low inconsistent with open/close")
    return CandleChart(label, width, height, bars * (100.0 / bars[0, 0]))


def _f(x: float) -> str:
    out = f"{x:.3f}"
    return "0.000" if out == "-0.000" else out


def render_chart(chart: CandleChart) -> bytes:
    candles = chart.candles
    lo, hi = float(candles[:, 2].min()), float(candles[:, 1].max())
    span = hi - lo
    pad = PAD * span if span > 0 else PAD * hi
    ymin, ymax = lo - pad, hi + pad
    x0, x1 = MARGIN_LEFT, chart.width - MARGIN_RIGHT
    y0, y1 = MARGIN_TOP, chart.height - MARGIN_BOTTOM
    plot_h = y1 - y0

    def y(price: float) -> float:
        return y0 + (ymax - price) / (ymax - ymin) * plot_h

    n = candles.shape[0]
    slot = (x1 - x0) / n
    body_w = 0.6 * slot
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{chart.width}" height="{chart.height}" '
        f'viewBox="0 0 {chart.width} {chart.height}">',
        f"<title>{chart.label}</title>",
        f'<rect x="0" y="0" width="{chart.width}" height="{chart.height}" fill="#ffffff"/>',
        f'<line class="axis" x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="#000000" stroke-width="1"/>',
        f'<text class="ymax" x="{x0 - 4}" y="{y0 + 4}" text-anchor="end" font-size="10">{ymax:.6f}</text>',
        f'<text class="ymin" x="{x0 - 4}" y="{y1}" text-anchor="end" font-size="10">{ymin:.6f}</text>',
        '<g class="candles">',
    ]
    for k, (op, high, low, close) in enumerate(candles):
        cx = x0 + (k + 0.5) * slot
        kind = "up" if close > op else "down" if close < op else "flat"
        top, bottom = y(max(op, close)), y(min(op, close))
        parts.append(
            f'<line class="wick" x1="{_f(cx)}" y1="{_f(y(high))}" x2="{_f(cx)}" y2="{_f(y(low))}" '
            f'stroke="#000000" stroke-width="1"/>'
        )
        parts.append(
            f'<rect class="body {kind}" x="{_f(cx - body_w / 2)}" y="{_f(top)}" width="{_f(body_w)}" '
            f'height="{_f(bottom - top)}" fill="{COLORS[kind]}"/>'
        )
    parts += ["</g>", "</svg>", ""]
    return "\n".join(parts).encode()


def render_candlesticks(ohlc: DailyOHLC, L: int, stock: int = 0, label: str = "stock 1",
                        width: int = WIDTH, height: int = HEIGHT) -> bytes:
    """SVG bytes for one stock's last ``L`` weeks of daily bars."""
    if ohlc.n_weeks() > L:
        ohlc = last_weeks(ohlc, L)
    return render_chart(make_chart(ohlc, L, stock, label, width, height))


_RECT = re.compile(r'<rect class="body (up|down|flat)" x="[^"]+" y="([^"]+)" width="[^"]+" height="([^"]+)"')
_WICK = re.compile(r'<line class="wick" x1="[^"]+" y1="([^"]+)" x2="[^"]+" y2="([^"]+)"')
_LABEL = re.compile(r'<text class="(ymax|ymin)"[^>]*>([^<]+)</text>')
_SIZE = re.compile(r'<svg [^>]*height="(\d+)"')


def read_candles(svg: bytes) -> np.ndarray:
    """Recover normalized (open, high, low, close) bars from a rendered chart."""
    text = svg.decode()
    labels = dict(_LABEL.findall(text))
    height = int(_SIZE.search(text).group(1))
    ymax, ymin = float(labels["ymax"]), float(labels["ymin"])
    y0, y1 = MARGIN_TOP, height - MARGIN_BOTTOM

    def price(yv: float) -> float:
        return ymax - (yv - y0) / (y1 - y0) * (ymax - ymin)

    bars = []
    for (kind, ytop, h), (yhi, ylo) in zip(_RECT.findall(text), _WICK.findall(text)):
        top, bottom = price(float(ytop)), price(float(ytop) + float(h))
        if kind == "up":
            op, close = bottom, top
        elif kind == "down":
            op, close = top, bottom
        else:
            op = close = top
        bars.append((op, price(float(yhi)), price(float(ylo)), close))
    return np.array(bars)


def weekly_returns_from_chart(svg: bytes, L: int) -> np.ndarray:
    """Close-to-close weekly returns read off a chart with equal days per week."""
    bars = read_candles(svg)
    n = bars.shape[0]
    if n % L:
        raise ChartError(f"{n} candles do not split into {L} equal weeks")
    per = n // L
    closes = bars[per - 1::per, 3]
    prev = np.concatenate([[bars[0, 0]], closes[:-1]])
    return closes / prev - 1.0


def write_chart_set(ohlc: DailyOHLC, L: int, out_dir: str | Path, contest_id: str = "") -> list[str]:
    """Write one chart per stock plus ``manifest.json``; returns the file names."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for k in range(ohlc.prices.shape[0]):
        name = chart_filename(k + 1, L)
        (out_dir / name).write_bytes(render_candlesticks(ohlc, L, k, f"stock {k + 1}"))
        names.append(name)
    manifest = {"contest": contest_id, "weeks": L, "charts": names}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return names
