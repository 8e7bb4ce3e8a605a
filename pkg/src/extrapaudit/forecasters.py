"""Forecaster backends and the on-disk query cache.

Synthetic backends read the same attachments a live model would see and
answer in the same JSON wire format, so the whole pipeline runs offline.
"""
from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import re
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import httpx
import numpy as np

from .calibration import historical_stats
from .charts import weekly_returns_from_chart
from .econometrics import DECAY_INTERCEPT, decay_weights
from .panel import ContestPanel
from .prompts import (
    AnonymizationError,
    DistributionForecast,
    PromptBundle,
    RankForecast,
    SentimentForecast,
    anonymous_ids,
    check_anonymized,
    parse_response,
    ranking_from_scores,
    read_grid_attachment,
    read_monthly_attachment,
    render_distribution_response,
    render_rank_response,
    render_sentiment_response,
    ResponseError,
)

log = logging.getLogger(__name__)

BACKENDS = ("http", "extrapolator", "reversal", "percentile_oracle", "noise")


class ForecasterError(RuntimeError):
    pass


class ConfigError(ForecasterError):
    pass


class TransportError(ForecasterError):
    pass


class AuthenticationError(ForecasterError):
    pass


class CacheCorruptionError(ForecasterError):
    pass


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff: float = 1.0  # seconds before the second attempt, doubled each time


@dataclass(frozen=True)
class ForecasterConfig:
    backend: str = "extrapolator"
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-4o"
    api_key_env: str = "OPENAI_API_KEY"
    temperature: float | None = None
    lambda1: float = 16.98
    lambda2: float = 0.28
    noise_sd: float = 0.5
    neutral_band: float = 0.0
    seed: int = 0
    cache_dir: str | None = None
    max_parallel: int = 1
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    timeout: float = 60.0

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigError(f"unknown backend {self.backend!r}; choose from {', '.join(BACKENDS)}")
        if not 0.0 < self.lambda2 <= 1.0:
            raise ConfigError("lambda2 must lie in (0, 1]")
        if self.max_parallel < 1:
            raise ConfigError("max_parallel must be >= 1")
        if self.noise_sd < 0:
            raise ConfigError("noise_sd must be >= 0")
        if self.retry.max_attempts < 1:
            raise ConfigError("retry.max_attempts must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "ForecasterConfig":
        data = dict(data)
        if "retry" in data and isinstance(data["retry"], dict):
            data["retry"] = RetryPolicy(**data["retry"])
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown forecaster settings: {', '.join(sorted(unknown))}")
        return cls(**data)

    def backend_id(self) -> str:
        """Identity of the answering model; part of every cache key."""
        if self.backend == "http":
            temp = "default" if self.temperature is None else repr(self.temperature)
            return f"http:{self.model}@{self.endpoint}:temperature={temp}"
        if self.backend in ("extrapolator", "noise"):
            return (f"{self.backend}:l1={self.lambda1!r}:l2={self.lambda2!r}:noise={self.noise_sd!r}"
                    f":band={self.neutral_band!r}:seed={self.seed}")
        return f"{self.backend}:seed={self.seed}"


@dataclass
class QueryRecord:
    prompt_hash: str
    backend_id: str
    request: dict
    response: str
    timestamp: str
    parse_outcome: str = "unparsed"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def prompt_hash(backend_id: str, bundle: PromptBundle) -> str:
    h = hashlib.sha256()
    for part in (backend_id.encode(), bundle.schema.encode(), bundle.text.encode()):
        h.update(len(part).to_bytes(8, "big"))
        h.update(part)
    for name, payload in bundle.attachments:
        for part in (name.encode(), payload):
            h.update(len(part).to_bytes(8, "big"))
            h.update(part)
    return h.hexdigest()


def bundle_request(bundle: PromptBundle) -> dict:
    """Serializable copy of the bundle (attachments base64-encoded)."""
    return {
        "schema": bundle.schema,
        "text": bundle.text,
        "stock_ids": list(bundle.stock_ids),
        "attachments": [{"name": n, "data": base64.b64encode(p).decode()} for n, p in bundle.attachments],
    }


def bundle_from_request(request: dict) -> PromptBundle:
    return PromptBundle(
        text=request["text"],
        attachments=tuple((a["name"], base64.b64decode(a["data"])) for a in request["attachments"]),
        schema=request["schema"],
        stock_ids=tuple(request.get("stock_ids", ())),
    )


# --------------------------------------------------------------------------- cache


class QueryCache:
    """One JSON file per prompt hash. Misses for the same key are serialized,
    so concurrent callers trigger at most one upstream request per key."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def lock(self, key: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(key, threading.Lock())

    def path(self, key: str) -> Path:
        return self.root / f"{key}.json"

    def get(self, key: str) -> QueryRecord | None:
        p = self.path(key)
        if not p.exists():
            return None
        try:
            data = json.loads(p.read_text())
            record = QueryRecord(**data)
        except (json.JSONDecodeError, TypeError) as exc:
            raise CacheCorruptionError(f"unreadable cache entry {p}: {exc}") from None
        expected = prompt_hash(record.backend_id, bundle_from_request(record.request))
        if record.prompt_hash != key or expected != key:
            raise CacheCorruptionError(f"cache entry {p} does not match its key")
        return record

    def put(self, record: QueryRecord) -> None:
        p = self.path(record.prompt_hash)
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".tmp-", suffix=".json")
        with os.fdopen(fd, "w") as fh:
            fh.write(record.to_json())
        os.replace(tmp, p)

    def records(self) -> list[QueryRecord]:
        return [self.get(p.stem) for p in sorted(self.root.glob("*.json")) if not p.name.startswith(".")]


# --------------------------------------------------------------------------- synthetic agents


def _rng(config: ForecasterConfig, key: str) -> np.random.Generator:
    return np.random.default_rng([config.seed, int(key[:16], 16)])


def weighted_signal(grid: np.ndarray, lambda2: float) -> np.ndarray:
    """Decay-weighted average of each row; columns are oldest first."""
    w = decay_weights(lambda2, grid.shape[1])
    return grid[:, ::-1] @ w


def extrapolator_scores(grid: np.ndarray, lambda1: float, lambda2: float, noise_sd: float,
                        rng: np.random.Generator) -> np.ndarray:
    scores = DECAY_INTERCEPT + lambda1 * weighted_signal(grid, lambda2)
    if noise_sd > 0:
        scores = scores + rng.normal(0.0, noise_sd, size=scores.shape)
    return scores


def extrapolator_rank(panel: ContestPanel, lambda1: float, lambda2: float, noise_sd: float = 0.0,
                      seed: int = 0, L: int | None = None) -> RankForecast:
    """Rank stocks by 5.5 + lambda1 * sum_s w_s R_{t-s} + noise; latent scores kept."""
    if not 0.0 < lambda2 <= 1.0:
        raise ConfigError("lambda2 must lie in (0, 1]")
    grid = panel.last(L or panel.n_lags)
    scores = extrapolator_scores(grid, lambda1, lambda2, noise_sd, np.random.default_rng(seed))
    return RankForecast(ranking_from_scores(scores), 1.0, scores)


def reversal_rank(panel: ContestPanel) -> RankForecast:
    """Best rank to the lowest week-t return."""
    scores = -panel.returns[:, -1]
    return RankForecast(ranking_from_scores(scores), 1.0, scores)


def percentile_oracle(window) -> DistributionForecast:
    """Historical 10th percentile, mean and 90th percentile (percent units)."""
    h = historical_stats(window)
    return DistributionForecast(h.p10, h.mean, h.p90)


def _bundle_grid(bundle: PromptBundle) -> np.ndarray:
    """Weekly return grid (oldest week first) from a CSV or chart bundle."""
    name, payload = bundle.attachments[0]
    if name.endswith(".csv"):
        return read_grid_attachment(payload)[1]
    match = re.search(r"_(\d+)w\.svg$", name)
    if match is None:
        raise ConfigError(f"cannot read chart attachment {name!r}")
    weeks = int(match.group(1))
    return np.array([weekly_returns_from_chart(p, weeks) for _, p in bundle.attachments])


def synthetic_answer(config: ForecasterConfig, bundle: PromptBundle, key: str) -> str:
    rng = _rng(config, key)
    chart = bundle.attachments and bundle.attachments[0][0].endswith(".svg")
    ids = bundle.stock_ids or anonymous_ids()
    backend = config.backend
    if bundle.schema == "rank":
        if backend == "percentile_oracle":
            raise ConfigError("percentile_oracle only answers distribution prompts")
        if backend == "noise":
            scores = rng.standard_normal(len(ids))
        else:
            grid = _bundle_grid(bundle)
            if backend == "extrapolator":
                scores = extrapolator_scores(grid, config.lambda1, config.lambda2, config.noise_sd, rng)
            else:
                scores = -grid[:, -1]
        forecast = RankForecast(ranking_from_scores(scores, ids), 1.0)
        return render_rank_response(forecast, chart=bool(chart))
    if bundle.schema == "sentiment":
        values, _ = read_monthly_attachment(bundle.attachments[0][1])
        if backend == "noise":
            pred = int(rng.integers(-1, 2))
        elif backend in ("extrapolator", "reversal"):
            signal = config.lambda1 * weighted_signal(values[None, :], config.lambda2)[0]
            if backend == "extrapolator" and config.noise_sd > 0:
                signal += rng.normal(0.0, config.noise_sd)
            if backend == "reversal":
                signal = -signal
            pred = 0 if abs(signal) <= config.neutral_band else int(np.sign(signal))
        else:
            raise ConfigError("percentile_oracle only answers distribution prompts")
        return render_sentiment_response(SentimentForecast(pred, 1.0))
    values, unit = read_monthly_attachment(bundle.attachments[0][1])
    decimals = values / 100.0 if unit == "return_pct" else values
    if backend == "percentile_oracle":
        return render_distribution_response(percentile_oracle(decimals))
    if backend == "noise":
        f = percentile_oracle(decimals)
        shift = rng.normal(0.0, config.noise_sd)
        return render_distribution_response(DistributionForecast(f.low + shift, f.expected + shift, f.high + shift))
    raise ConfigError(f"{backend} backend does not answer distribution prompts")


# --------------------------------------------------------------------------- http


def chat_payload(config: ForecasterConfig, bundle: PromptBundle) -> dict:
    """Chat-completion request body: CSV attachments inlined, images attached."""
    content: list[dict] = [{"type": "text", "text": bundle.text}]
    for name, payload in bundle.attachments:
        if name.endswith(".csv"):
            content.append({"type": "text", "text": f"{name}:\n{payload.decode()}"})
        else:
            mime = "image/svg+xml" if name.endswith(".svg") else "image/png"
            url = f"data:{mime};base64,{base64.b64encode(payload).decode()}"
            content.append({"type": "text", "text": name})
            content.append({"type": "image_url", "image_url": {"url": url}})
    body = {"model": config.model, "messages": [{"role": "user", "content": content}]}
    if config.temperature is not None:
        body["temperature"] = config.temperature
    return body


def http_answer(config: ForecasterConfig, bundle: PromptBundle, transport: httpx.BaseTransport | None = None,
                sleep=time.sleep) -> str:
    check_anonymized(bundle)
    key = os.environ.get(config.api_key_env, "")
    headers = {"Authorization": f"Bearer {key}"} if key else {}
    body = chat_payload(config, bundle)
    last_error: Exception | None = None
    with httpx.Client(transport=transport, timeout=config.timeout) as client:
        for attempt in range(config.retry.max_attempts):
            if attempt:
                sleep(config.retry.backoff * 2 ** (attempt - 1))
            try:
                resp = client.post(config.endpoint, json=body, headers=headers)
            except httpx.TransportError as exc:
                last_error = exc
                log.warning("attempt %d/%d failed: %s", attempt + 1, config.retry.max_attempts, exc)
                continue
            if resp.status_code in (401, 403):
                raise AuthenticationError(f"authentication failed ({resp.status_code})")
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = TransportError(f"HTTP {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError):
                raise TransportError("unexpected response body") from None
    raise TransportError(f"giving up after {config.retry.max_attempts} attempts: {last_error}")


# --------------------------------------------------------------------------- query


class Forecaster:
    def __init__(self, config: ForecasterConfig, transport: httpx.BaseTransport | None = None, sleep=time.sleep):
        self.config = config
        self.transport = transport
        self.sleep = sleep
        self.cache = QueryCache(config.cache_dir) if config.cache_dir else None
        self.upstream_calls = 0
        self._count_lock = threading.Lock()

    def _answer(self, bundle: PromptBundle, key: str) -> str:
        with self._count_lock:
            self.upstream_calls += 1
        if self.config.backend == "http":
            return http_answer(self.config, bundle, self.transport, self.sleep)
        return synthetic_answer(self.config, bundle, key)

    def query_record(self, bundle: PromptBundle) -> QueryRecord:
        backend_id = self.config.backend_id()
        key = prompt_hash(backend_id, bundle)
        if self.cache is None:
            return self._record(bundle, key, self._answer(bundle, key))
        with self.cache.lock(key):
            cached = self.cache.get(key)
            if cached is not None:
                return cached
            record = self._record(bundle, key, self._answer(bundle, key))
            self.cache.put(record)
            return record

    def _record(self, bundle, key, raw) -> QueryRecord:
        try:
            parse_response(bundle.schema, raw, bundle.stock_ids or anonymous_ids())
            outcome = "ok"
        except ResponseError as exc:
            outcome = exc.tag
        return QueryRecord(
            prompt_hash=key,
            backend_id=self.config.backend_id(),
            request=bundle_request(bundle),
            response=raw,
            timestamp=datetime.now(timezone.utc).isoformat(timespec="seconds"),
            parse_outcome=outcome,
        )

    def query(self, bundle: PromptBundle) -> str:
        return self.query_record(bundle).response

    def query_many(self, bundles: Sequence[PromptBundle]) -> list[QueryRecord]:
        """Query in parallel (up to ``max_parallel``); results keep input order."""
        if self.config.max_parallel == 1 or len(bundles) < 2:
            return [self.query_record(b) for b in bundles]
        with ThreadPoolExecutor(max_workers=self.config.max_parallel) as pool:
            return list(pool.map(self.query_record, bundles))


def query(config: ForecasterConfig, bundle: PromptBundle, transport: httpx.BaseTransport | None = None) -> str:
    """One-shot query; uses ``config.cache_dir`` when set."""
    return Forecaster(config, transport).query(bundle)


__all__ = [
    "AnonymizationError", "AuthenticationError", "CacheCorruptionError", "ConfigError", "Forecaster",
    "ForecasterConfig", "QueryCache", "QueryRecord", "RetryPolicy", "TransportError", "extrapolator_rank",
    "percentile_oracle", "prompt_hash", "query", "reversal_rank",
]
