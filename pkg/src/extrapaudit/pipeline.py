"""Run configuration and the pipeline stages behind the command line.

A run directory holds everything needed to regenerate its reports:

    run_config.json     resolved configuration (versioned)
    data/               panel or monthly CSVs
    prompts/            prompt bundles as JSON lines
    cache/              one QueryRecord per prompt hash
    queries/            query summary
    estimate/           regression tables
    calibrate/          calibration tables and histogram CSVs
    report/             combined report and figures

Each stage writes ``stage.json`` recording a key derived from the settings
it depends on and the content hashes of its inputs, plus hashes of its own
outputs. A stage whose key and outputs are unchanged is skipped.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import shutil
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import (
    calibration_csv,
    calibration_report,
    forecast_histograms,
    format_calibration,
    historical_stats,
)
from .econometrics import (
    EstimationError,
    decompose_forecast,
    fama_macbeth,
    fit_decay,
    format_decay,
    format_table,
    ols_cluster,
    percentile_regression,
    regress_lags,
    sign_split_regress,
    table_csv,
)
from .forecasters import (
    BACKENDS,
    ConfigError,
    Forecaster,
    ForecasterConfig,
    QueryCache,
    bundle_from_request,
    bundle_request,
    prompt_hash,
)
from .panel import (
    ALLOWED_LAGS,
    ContestPanel,
    MalformedRowError,
    MonthlySeries,
    MonthlySynthConfig,
    PanelError,
    SynthConfig,
    attach_sidecars,
    build_lag_matrix,
    lag_names,
    load_contest_panel,
    load_monthly,
    load_next_daily,
    load_ohlc,
    load_stock_months,
    synth_contests,
    synth_market,
    synth_stock_months,
    write_contest_panel,
    write_monthly,
    write_next_daily,
    write_ohlc,
    write_stock_months,
)
from .prompts import (
    PromptBundle,
    ResponseError,
    anonymous_ids,
    build_chart_prompt,
    build_distribution_prompt,
    build_rank_prompt,
    build_sentiment_prompt,
    parse_response,
)

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
CONFIG_NAME = "run_config.json"
EXPERIMENTS = ("rank_contest", "sentiment", "distribution", "chart_rank")
ANALYSES = ("eq1", "eq2", "eq3", "ranks", "fm", "eq5", "calibration")
SENTIMENT_LAGS = 12

SYNTH_KEYS = {
    "rank_contest": ("n_contests", "reversal_coeff", "noise_sd", "start_date"),
    "chart_rank": ("n_contests", "reversal_coeff", "noise_sd", "start_date"),
    "sentiment": ("n_months", "rho", "mean", "sd", "start"),
    "distribution": ("n_series", "history", "n_year_months", "mean_center", "mean_spread", "vol_low", "vol_high"),
}
FILE_KEYS = {
    "rank_contest": ("contests", "next_daily", "forcerank"),
    "chart_rank": ("contests", "ohlc", "next_daily", "forcerank"),
    "sentiment": ("market", "survey"),
    "distribution": ("stock_months",),
}
REQUIRED_FILES = {
    "rank_contest": ("contests",),
    "chart_rank": ("contests", "ohlc"),
    "sentiment": ("market",),
    "distribution": ("stock_months",),
}
DEFAULT_SYNTH = {
    "rank_contest": {"n_contests": 500},
    "chart_rank": {"n_contests": 200},
    "sentiment": {"n_months": 444},
    "distribution": {"n_series": 1000},
}
DATA_NAMES = {
    "contests": "contests.csv",
    "ohlc": "ohlc.csv",
    "next_daily": "next_daily.csv",
    "forcerank": "forcerank.csv",
    "market": "market.csv",
    "survey": "survey.csv",
    "stock_months": "stock_months.csv",
}
# Settings that change how work is scheduled but never what it produces.
NON_SEMANTIC = {"max_parallel", "cache_dir", "retry", "timeout"}


class RunConfigError(ValueError):
    pass


class StageError(RuntimeError):
    """A prerequisite artifact is missing or was produced under other settings."""


# --------------------------------------------------------------------------- configuration


@dataclass(frozen=True)
class RunConfig:
    experiment: str = "rank_contest"
    lags: int = 12
    seed: int = 0
    out: str = "run"
    data: dict = field(default_factory=lambda: {"source": "synth"})
    forecaster: dict = field(default_factory=dict)
    analyses: dict = field(default_factory=dict)
    version: int = CONFIG_VERSION

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise RunConfigError(f"unsupported config version {self.version}; expected {CONFIG_VERSION}")
        if self.experiment not in EXPERIMENTS:
            raise RunConfigError(f"unknown experiment {self.experiment!r}; choose from {', '.join(EXPERIMENTS)}")
        if self.lags not in ALLOWED_LAGS:
            raise RunConfigError(f"lags must be one of {ALLOWED_LAGS}")
        if self.experiment == "sentiment" and self.lags != SENTIMENT_LAGS:
            raise RunConfigError("the sentiment experiment uses 12 monthly lags")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2 ** 64:
            raise RunConfigError("seed must be an unsigned 64-bit integer")
        unknown = set(self.analyses) - set(ANALYSES)
        if unknown:
            raise RunConfigError(f"unknown analyses: {', '.join(sorted(unknown))}")
        self._check_data()
        if "seed" in self.forecaster:
            raise RunConfigError("set the run-level seed instead of forecaster.seed")
        try:
            fc = self.forecaster_config()
        except (ConfigError, TypeError) as exc:
            raise RunConfigError(f"forecaster: {exc}") from None
        if self.experiment == "distribution":
            if fc.backend not in ("http", "percentile_oracle", "noise"):
                raise RunConfigError(f"backend {fc.backend!r} does not answer distribution prompts")
        elif fc.backend == "percentile_oracle":
            raise RunConfigError("percentile_oracle only answers distribution prompts")

    def _check_data(self) -> None:
        source = self.data.get("source", "synth")
        extra = set(self.data) - {"source", "synth", "files"}
        if extra:
            raise RunConfigError(f"unknown data settings: {', '.join(sorted(extra))}")
        if source == "synth":
            unknown = set(self.data.get("synth", {})) - set(SYNTH_KEYS[self.experiment])
            if unknown:
                raise RunConfigError(
                    f"synthetic {self.experiment} data has no setting(s) {', '.join(sorted(unknown))}")
        elif source == "files":
            files = self.data.get("files", {})
            unknown = set(files) - set(FILE_KEYS[self.experiment])
            if unknown:
                raise RunConfigError(f"the {self.experiment} experiment takes no {', '.join(sorted(unknown))} file")
            missing = [k for k in REQUIRED_FILES[self.experiment] if k not in files]
            if missing:
                raise RunConfigError(f"the {self.experiment} experiment needs data.files.{missing[0]}")
        else:
            raise RunConfigError(f"data.source must be 'synth' or 'files', not {source!r}")

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    def analysis_on(self, name: str) -> bool:
        return bool(self.analyses.get(name, True))

    def forecaster_config(self) -> ForecasterConfig:
        settings = dict(self.forecaster)
        settings.setdefault("backend", "percentile_oracle" if self.experiment == "distribution" else "extrapolator")
        settings.setdefault("cache_dir", str(self.out_dir / "cache"))
        settings["seed"] = self.seed
        return ForecasterConfig.from_dict(settings)

    def to_dict(self) -> dict:
        fc = self.forecaster_config()
        forecaster = dict(self.forecaster)
        forecaster.setdefault("backend", fc.backend)
        return {
            "version": self.version,
            "experiment": self.experiment,
            "lags": self.lags,
            "seed": self.seed,
            "out": self.out,
            "data": self.data,
            "forecaster": forecaster,
            "analyses": {a: self.analysis_on(a) for a in ANALYSES},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise RunConfigError("configuration must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise RunConfigError(f"unknown configuration keys: {', '.join(sorted(unknown))}")
        return cls(**data)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise RunConfigError(f"configuration file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise RunConfigError(f"{path}: invalid JSON ({exc})") from None
    return RunConfig.from_dict(data)


def resolve_config(config_path: str | None = None, out: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Configuration from ``--config``, else the run directory's copy, else defaults;
    command-line overrides win."""
    if config_path:
        load_config(config_path)
        data = json.loads(Path(config_path).read_text())
    elif out and (Path(out) / CONFIG_NAME).exists():
        data = load_config(Path(out) / CONFIG_NAME).to_dict()
    else:
        data = RunConfig().to_dict()
        data["forecaster"] = {}
    if out:
        data["out"] = out
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key in ("backend", "max_parallel"):
            data.setdefault("forecaster", {})[key] = value
        else:
            data[key] = value
    return RunConfig.from_dict(data)


def _digest(obj) -> str:
    if isinstance(obj, bytes):
        return hashlib.sha256(obj).hexdigest()
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def semantic_forecaster(config: RunConfig) -> dict:
    fc = asdict(config.forecaster_config())
    return {k: v for k, v in fc.items() if k not in NON_SEMANTIC}


def config_hash(config: RunConfig) -> str:
    """Hash of every setting that can change a result."""
    d = config.to_dict()
    d.pop("out")
    d["forecaster"] = semantic_forecaster(config)
    return _digest(d)


def write_config(config: RunConfig) -> Path:
    config.out_dir.mkdir(parents=True, exist_ok=True)
    path = config.out_dir / CONFIG_NAME
    text = config.to_json()
    if not path.exists() or path.read_text() != text:
        path.write_text(text)
    return path


# --------------------------------------------------------------------------- stage bookkeeping


def _file_hashes(directory: Path, names) -> dict[str, str]:
    return {n: _digest((directory / n).read_bytes()) for n in sorted(names)}


def _read_stamp(directory: Path) -> dict | None:
    p = directory / "stage.json"
    if not p.exists():
        return None
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError:
        return None


def _up_to_date(directory: Path, key: str) -> bool:
    stamp = _read_stamp(directory)
    if stamp is None or stamp.get("key") != key:
        return False
    try:
        return _file_hashes(directory, stamp["outputs"]) == stamp["outputs"]
    except (FileNotFoundError, KeyError):
        return False


def _write_stamp(directory: Path, stage: str, key: str, names) -> None:
    stamp = {"stage": stage, "key": key, "outputs": _file_hashes(directory, names)}
    (directory / "stage.json").write_text(json.dumps(stamp, indent=2, sort_keys=True) + "\n")


def _fresh_dir(directory: Path) -> None:
    if directory.exists():
        shutil.rmtree(directory)
    directory.mkdir(parents=True)


def _data_key(config: RunConfig) -> str:
    # User files are tracked through the hashes of their copies in data/.
    return _digest({"experiment": config.experiment, "lags": config.lags, "seed": config.seed, "data": config.data})


def _require_stage(config: RunConfig, stage: str, key: str, command: str) -> dict:
    directory = config.out_dir / stage
    stamp = _read_stamp(directory)
    if stamp is None:
        raise StageError(f"missing {directory}/ ; run `extrapaudit {command}` first")
    if stamp.get("key") != key:
        raise StageError(f"{directory}/ was produced under different settings; rerun `extrapaudit {command}`")
    try:
        if _file_hashes(directory, stamp["outputs"]) != stamp["outputs"]:
            raise StageError(f"{directory}/ was modified after it was written; rerun `extrapaudit {command}`")
    except FileNotFoundError as exc:
        raise StageError(f"missing {exc.filename}; rerun `extrapaudit {command}`") from None
    return stamp


def _data_stamp(config: RunConfig) -> dict:
    return _require_stage(config, "data", _data_key(config), "simulate")


def _prompts_key(config: RunConfig, data_stamp: dict) -> str:
    return _digest({"data": data_stamp["outputs"], "experiment": config.experiment, "lags": config.lags})


def _analysis_key(config: RunConfig, data_stamp: dict, stage: str) -> str:
    return _digest({
        "stage": stage, "data": data_stamp["outputs"], "experiment": config.experiment, "lags": config.lags,
        "forecaster": semantic_forecaster(config), "analyses": {a: config.analysis_on(a) for a in ANALYSES},
        "version": __version__,
    })


@dataclass
class StageResult:
    stage: str
    directory: Path
    skipped: bool
    outputs: list[str]
    message: str = ""


# --------------------------------------------------------------------------- data


def _load_forcerank(path: Path) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["contest_id", "stock_id", "score"]:
            raise MalformedRowError("header must be contest_id,stock_id,score", 1, path)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise MalformedRowError("expected 3 fields", lineno, path)
            try:
                out.setdefault(row[0], {})[row[1]] = float(row[2])
            except ValueError:
                raise MalformedRowError(f"non-numeric score {row[2]!r}", lineno, path) from None
    return out


def _load_survey(path: Path) -> dict[str, float]:
    series = load_monthly(path, "survey")
    return dict(zip(series.months, series.returns.tolist()))


def cmd_simulate(config: RunConfig) -> StageResult:
    """Generate synthetic data, or validate and copy user files, into ``data/``."""
    write_config(config)
    directory = config.out_dir / "data"
    source = config.data.get("source", "synth")
    if source == "files":
        for name, p in config.data["files"].items():
            if not Path(p).exists():
                raise StageError(f"data file {p} ({name}) not found")
    key = _data_key(config)
    if _up_to_date(directory, key) and _inputs_unchanged(config, directory):
        return StageResult("simulate", directory, True, sorted(_read_stamp(directory)["outputs"]))
    _fresh_dir(directory)
    exp = config.experiment
    names: list[str] = []
    if source == "synth":
        settings = {**DEFAULT_SYNTH[exp], **config.data.get("synth", {})}
        if exp in ("rank_contest", "chart_rank"):
            panels = synth_contests(SynthConfig(L=config.lags, seed=config.seed, with_ohlc=True, **settings))
            write_contest_panel(panels, directory / DATA_NAMES["contests"])
            write_next_daily(panels, directory / DATA_NAMES["next_daily"])
            names += [DATA_NAMES["contests"], DATA_NAMES["next_daily"]]
            if exp == "chart_rank":
                write_ohlc(panels, directory / DATA_NAMES["ohlc"])
                names.append(DATA_NAMES["ohlc"])
        elif exp == "sentiment":
            write_monthly(synth_market(seed=config.seed, **settings), directory / DATA_NAMES["market"])
            names.append(DATA_NAMES["market"])
        else:
            items = synth_stock_months(MonthlySynthConfig(seed=config.seed, **settings))
            write_stock_months(items, directory / DATA_NAMES["stock_months"])
            names.append(DATA_NAMES["stock_months"])
    else:
        for name, p in sorted(config.data["files"].items()):
            shutil.copyfile(p, directory / DATA_NAMES[name])
            names.append(DATA_NAMES[name])
        # Parse everything once so bad files fail here, not in a later stage.
        load_data(config, directory)
    _write_stamp(directory, "simulate", key, names)
    return StageResult("simulate", directory, False, sorted(names))


def _inputs_unchanged(config: RunConfig, directory: Path) -> bool:
    if config.data.get("source") != "files":
        return True
    outputs = _read_stamp(directory)["outputs"]
    return all(outputs.get(DATA_NAMES[k]) == _digest(Path(p).read_bytes()) for k, p in config.data["files"].items())


@dataclass
class RunData:
    panels: list[ContestPanel] | None = None
    forcerank: dict | None = None
    market: MonthlySeries | None = None
    survey: dict | None = None
    stock_months: list | None = None


def load_data(config: RunConfig, directory: Path | None = None) -> RunData:
    directory = directory or config.out_dir / "data"

    def path(name: str) -> Path | None:
        p = directory / DATA_NAMES[name]
        return p if p.exists() else None

    exp = config.experiment
    if exp in ("rank_contest", "chart_rank"):
        panels = load_contest_panel(path("contests") or directory / DATA_NAMES["contests"])
        if panels[0].n_lags < config.lags:
            raise PanelError(f"contests carry {panels[0].n_lags} weeks of returns; {config.lags} needed")
        ohlc = load_ohlc(path("ohlc")) if path("ohlc") else None
        nd = load_next_daily(path("next_daily")) if path("next_daily") else None
        panels = attach_sidecars(panels, ohlc, nd)
        if exp == "chart_rank":
            missing = [p.contest_id for p in panels if p.daily_ohlc is None]
            if missing:
                raise PanelError(f"no daily bars for contest {missing[0]}")
        forcerank = None
        if path("forcerank"):
            raw = _load_forcerank(path("forcerank"))
            forcerank = {}
            for p in panels:
                if p.contest_id in raw:
                    try:
                        forcerank[p.contest_id] = [raw[p.contest_id][s] for s in p.stocks]
                    except KeyError as exc:
                        raise PanelError(f"forcerank score missing for stock {exc.args[0]}") from None
        return RunData(panels=panels, forcerank=forcerank)
    if exp == "sentiment":
        market = load_monthly(path("market") or directory / DATA_NAMES["market"], "market")
        if len(market) <= SENTIMENT_LAGS + 2:
            raise PanelError("market series too short for the sentiment experiment")
        if not market.is_contiguous():
            raise PanelError("market series has gaps")
        survey = _load_survey(path("survey")) if path("survey") else None
        return RunData(market=market, survey=survey)
    return RunData(stock_months=load_stock_months(path("stock_months") or directory / DATA_NAMES["stock_months"]))


# --------------------------------------------------------------------------- prompts


def build_bundles(config: RunConfig, data: RunData) -> list[tuple[str, PromptBundle]]:
    """(item id, bundle) pairs in a fixed order."""
    exp, L = config.experiment, config.lags
    if exp == "rank_contest":
        return [(p.contest_id, build_rank_prompt(p, L)) for p in data.panels]
    if exp == "chart_rank":
        return [(p.contest_id, build_chart_prompt(p, L)) for p in data.panels]
    if exp == "sentiment":
        m = data.market
        return [(m.months[t], build_sentiment_prompt(m.window(t, SENTIMENT_LAGS))) for t in range(SENTIMENT_LAGS, len(m))]
    return [(item.series.label, build_distribution_prompt(item.series)) for item in data.stock_months]


def _bundle_line(item: str, bundle: PromptBundle) -> str:
    return json.dumps({"item": item, "request": bundle_request(bundle)}, sort_keys=True)


def cmd_prompts(config: RunConfig) -> StageResult:
    write_config(config)
    data_stamp = _data_stamp(config)
    directory = config.out_dir / "prompts"
    key = _prompts_key(config, data_stamp)
    if _up_to_date(directory, key):
        return StageResult("prompts", directory, True, sorted(_read_stamp(directory)["outputs"]))
    bundles = build_bundles(config, load_data(config))
    _fresh_dir(directory)
    with open(directory / "bundles.jsonl", "w") as fh:
        for item, bundle in bundles:
            fh.write(_bundle_line(item, bundle) + "\n")
    item, first = bundles[0]
    parts = [first.text, ""]
    for name, payload in first.attachments:
        parts.append(f"--- {name} ---")
        parts.append(payload.decode() if name.endswith(".csv") else f"<{len(payload)} bytes>")
    (directory / "example_prompt.txt").write_text("\n".join(parts) + "\n")
    names = ["bundles.jsonl", "example_prompt.txt"]
    _write_stamp(directory, "prompts", key, names)
    return StageResult("prompts", directory, False, names, f"{len(bundles)} bundles")


def _read_bundles(path: Path) -> list[tuple[str, PromptBundle]]:
    out = []
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            out.append((rec["item"], bundle_from_request(rec["request"])))
    return out


# --------------------------------------------------------------------------- query


def cmd_query(config: RunConfig, transport=None, sleep=None) -> StageResult:
    """Send every prompt bundle to the forecaster; answers land in the cache.

    Already-cached bundles are not re-sent, so an interrupted run resumes
    where it stopped.
    """
    write_config(config)
    data_stamp = _data_stamp(config)
    prompts_stamp = _require_stage(config, "prompts", _prompts_key(config, data_stamp), "prompts")
    directory = config.out_dir / "queries"
    fc = config.forecaster_config()
    key = _digest({"prompts": prompts_stamp["outputs"], "forecaster": semantic_forecaster(config)})
    bundles = _read_bundles(config.out_dir / "prompts" / "bundles.jsonl")
    kwargs = {} if sleep is None else {"sleep": sleep}
    forecaster = Forecaster(fc, transport, **kwargs)
    if _up_to_date(directory, key) and _missing_records(fc, bundles) == 0:
        return StageResult("query", directory, True, sorted(_read_stamp(directory)["outputs"]))
    records = forecaster.query_many([b for _, b in bundles])
    tally = Counter(r.parse_outcome for r in records)
    directory.mkdir(parents=True, exist_ok=True)
    summary = {
        "backend_id": fc.backend_id(),
        "cache_dir": str(fc.cache_dir),
        "n_prompts": len(bundles),
        "parse_outcomes": dict(sorted(tally.items())),
        "prompt_hashes": [r.prompt_hash for r in records],
    }
    (directory / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_stamp(directory, "query", key, ["summary.json"])
    msg = f"{len(records)} records, {forecaster.upstream_calls} new upstream call(s)"
    return StageResult("query", directory, False, ["summary.json"], msg)


def _missing_records(fc: ForecasterConfig, bundles) -> int:
    cache_dir = Path(fc.cache_dir)
    bid = fc.backend_id()
    return sum(not (cache_dir / f"{prompt_hash(bid, b)}.json").exists() for _, b in bundles)


@dataclass
class Responses:
    items: list[str]
    parsed: list  # None where the response was rejected
    rejections: Counter


def load_responses(config: RunConfig, data: RunData) -> Responses:
    """Parse the stored answer for every bundle; never contacts a backend."""
    fc = config.forecaster_config()
    store = Path(fc.cache_dir)
    if not store.is_dir() or not any(store.glob("*.json")):
        raise StageError(f"missing QueryRecord store {store}; run `extrapaudit query` first")
    cache = QueryCache(store)
    bid = fc.backend_id()
    items, parsed, tally = [], [], Counter()
    absent = 0
    for item, bundle in build_bundles(config, data):
        record = cache.get(prompt_hash(bid, bundle))
        if record is None:
            absent += 1
            continue
        items.append(item)
        try:
            parsed.append(parse_response(bundle.schema, record.response, bundle.stock_ids or anonymous_ids()))
        except ResponseError as exc:
            parsed.append(None)
            tally[exc.tag] += 1
    if absent:
        raise StageError(f"QueryRecord store {store} lacks {absent} record(s) for backend {bid}; "
                         "run `extrapaudit query` first")
    if all(p is None for p in parsed):
        raise EstimationError("every stored response was rejected by the parser")
    return Responses(items, parsed, tally)


# --------------------------------------------------------------------------- analyses


@dataclass
class Section:
    title: str
    text: str
    csv_name: str = ""
    csv_text: str = ""


@dataclass
class Analysis:
    sections: list[Section]
    calibration: list[Section]
    histograms: object = None
    n_used: int = 0
    rejections: Counter = field(default_factory=Counter)


def _rank_analyses(config: RunConfig, data: RunData, resp: Responses) -> list[Section]:
    L = config.lags
    ok = {item: f for item, f in zip(resp.items, resp.parsed) if f is not None}
    panels = [p for p in data.panels if p.contest_id in ok]
    llm = {p.contest_id: ok[p.contest_id].ranks_for(anonymous_ids()) for p in panels}
    dependents = [("LLM rank", "llm_rank", llm)]
    if data.forcerank:
        panels = [p for p in panels if p.contest_id in data.forcerank]
        dependents.append(("Forcerank", "forcerank", data.forcerank))
    if len(panels) < 2:
        raise EstimationError("fewer than two usable contests")
    note = "Standard errors are clustered by contest."
    sections = []

    if config.analysis_on("eq1"):
        tables, heads = [], []
        for head, kind, values in dependents:
            tables.append(regress_lags(build_lag_matrix(panels, kind, "returns", L, values), head))
            heads.append(head)
        realized = build_lag_matrix(panels, "realized_return", "returns", L)
        tables.append(ols_cluster(realized.y * 100.0, realized.x, realized.cluster_id, names=realized.names,
                                  label="Realized return (%)"))
        heads.append("Realized return (%)")
        sections.append(Section("Forecasts and realized returns on lagged returns",
                                format_table(tables, heads, note=note), "eq1.csv", table_csv(tables, heads)))

    if config.analysis_on("ranks"):
        tables = [regress_lags(build_lag_matrix(panels, kind, "ranks", L, values), head)
                  for head, kind, values in dependents]
        tables.append(regress_lags(build_lag_matrix(panels, "realized_rank", "ranks", L), "Realized rank"))
        heads = [h for h, _, _ in dependents] + ["Realized rank"]
        sections.append(Section("Forecasts on lagged return ranks",
                                format_table(tables, heads, note=note), "ranks.csv", table_csv(tables, heads)))

    if config.analysis_on("eq2"):
        tables = [sign_split_regress(build_lag_matrix(panels, kind, "signed_returns", L, values), head)
                  for head, kind, values in dependents]
        heads = [h for h, _, _ in dependents]
        sections.append(Section("Positive and negative lagged returns",
                                format_table(tables, heads, note=note), "eq2.csv", table_csv(tables, heads)))

    if config.analysis_on("eq3"):
        fits = [fit_decay(build_lag_matrix(panels, kind, "returns", L, values)) for _, kind, values in dependents]
        heads = [h for h, _, _ in dependents]
        rows = ["model,lambda1,se_lambda1,lambda2,se_lambda2,degree,n_obs,converged"]
        for h, f in zip(heads, fits):
            rows.append(f"{h},{f.lambda1:.10g},{f.se_lambda1:.10g},{f.lambda2:.10g},{f.se_lambda2:.10g},"
                        f"{f.degree:.10g},{f.n_obs},{f.converged}")
        sections.append(Section("Exponential decay of weights on past returns", format_decay(fits, heads),
                                "eq3.csv", "\n".join(rows) + "\n"))

    if config.analysis_on("fm"):
        lm = build_lag_matrix(panels, "llm_rank", "returns", L, llm)
        predicted, residual = decompose_forecast(lm.y, lm)
        ys, xs, periods = [], [], []
        for k, p in enumerate(panels):
            rows = slice(10 * k, 10 * (k + 1))
            design = np.column_stack([np.ones(10), predicted[rows], residual[rows]])
            if p.next_daily is not None:
                for d in range(p.next_daily.shape[1]):
                    ys.append(p.next_daily[:, d] * 100.0)
                    xs.append(design)
                    periods += [f"{p.contest_id}:{d}"] * 10
            else:
                ys.append(p.realized_next * 100.0)
                xs.append(design)
                periods += [p.contest_id] * 10
        fm = fama_macbeth(np.concatenate(ys), np.vstack(xs), np.array(periods),
                          ("const", "Predicted", "Residual"), "Next-period return (%)")
        unit = "stock-days" if panels[0].next_daily is not None else "stock-weeks"
        text = format_table([fm], ["Next-period return (%)"],
                            note=f"Fama-MacBeth over {fm.T:,} periods ({fm.n_obs:,} {unit}); "
                                 "Predicted is the fitted LLM rank from lagged returns.")
        rows = ["term,coef,fm_se,t"] + [f"{n},{b:.10g},{s:.10g},{t:.10g}"
                                        for n, b, s, t in zip(fm.names, fm.mean_coef, fm.fm_se, fm.t)]
        sections.append(Section("Extrapolative and residual forecast components", text,
                                "fm.csv", "\n".join(rows) + "\n"))
    return sections


def _sentiment_analyses(config: RunConfig, data: RunData, resp: Responses) -> list[Section]:
    if not config.analysis_on("eq1"):
        return []
    m = data.market
    position = {month: k for k, month in enumerate(m.months)}
    names = ("const",) + lag_names(SENTIMENT_LAGS)

    def design(months):
        rows = []
        for month in months:
            t = position[month]
            rows.append([1.0, *m.returns[t - SENTIMENT_LAGS:t][::-1]])
        return np.array(rows)

    used = [(item, f.prediction) for item, f in zip(resp.items, resp.parsed) if f is not None]
    months = [u[0] for u in used]
    tables = [ols_cluster(np.array([u[1] for u in used], dtype=float), design(months),
                          np.arange(len(months)), names=names, label="LLM sentiment")]
    heads = ["LLM sentiment"]
    if data.survey:
        sm = [mo for mo in m.months[SENTIMENT_LAGS:] if mo in data.survey]
        tables.append(ols_cluster(np.array([data.survey[mo] for mo in sm]), design(sm), np.arange(len(sm)),
                                  names=names, label="Survey"))
        heads.append("Survey")
    note = "Heteroskedasticity-robust standard errors; Return_t is the latest month shown in the prompt."
    return [Section("Market sentiment on lagged monthly returns",
                    format_table(tables, heads, note=note), "eq4.csv", table_csv(tables, heads))]


def _distribution_inputs(data: RunData, resp: Responses):
    by_id = {item.series.label: item for item in data.stock_months}
    forecasts, hist, realized, months = [], [], [], []
    for item_id, f in zip(resp.items, resp.parsed):
        if f is None:
            continue
        item = by_id[item_id]
        forecasts.append(f)
        hist.append(historical_stats(item.series.returns))
        realized.append(item.realized * 100.0)
        months.append(item.year_month)
    return forecasts, hist, realized, months


def _distribution_analyses(config: RunConfig, data: RunData, resp: Responses) -> list[Section]:
    if not config.analysis_on("eq5"):
        return []
    forecasts, hist, _, months = _distribution_inputs(data, resp)
    fits = percentile_regression(forecasts, hist, months, drop_collinear=True)
    heads = ["Low", "Expected", "High"]
    tables = [fits["low"], fits["expected"], fits["high"]]
    note = "Year-month fixed effects; standard errors clustered by year-month."
    return [Section("Forecasts on historical return percentiles",
                    format_table(tables, heads, note=note), "eq5.csv", table_csv(tables, heads))]


def _calibration_sections(config: RunConfig, data: RunData, resp: Responses):
    forecasts, hist, realized, _ = _distribution_inputs(data, resp)
    if len(forecasts) < 2:
        raise EstimationError("calibration needs at least two usable forecasts")
    report = calibration_report(forecasts, hist, realized, resp.rejections)
    hs = forecast_histograms(forecasts, hist)
    share = f"Share of expected forecasts below zero: {100 * hs.share_expected_negative:.2f}%\n"
    sections = [Section("Realized returns relative to historical and forecast distributions",
                        format_calibration(report) + share, "calibration.csv", calibration_csv(report))]
    return sections, hs


def analyze(config: RunConfig, with_calibration: bool | None = None) -> Analysis:
    data = load_data(config)
    resp = load_responses(config, data)
    if config.experiment in ("rank_contest", "chart_rank"):
        sections = _rank_analyses(config, data, resp)
    elif config.experiment == "sentiment":
        sections = _sentiment_analyses(config, data, resp)
    else:
        sections = _distribution_analyses(config, data, resp)
    calib, hs = [], None
    if with_calibration is None:
        with_calibration = config.experiment == "distribution" and config.analysis_on("calibration")
    if with_calibration:
        calib, hs = _calibration_sections(config, data, resp)
    n_used = sum(p is not None for p in resp.parsed)
    return Analysis(sections, calib, hs, n_used, resp.rejections)


# --------------------------------------------------------------------------- estimate / calibrate / report


def _write_sections(directory: Path, sections: list[Section], text_name: str) -> list[str]:
    names = [text_name]
    body = "\n".join(f"{s.title}\n\n{s.text}" for s in sections)
    (directory / text_name).write_text(body)
    for s in sections:
        if s.csv_name:
            (directory / s.csv_name).write_text(s.csv_text)
            names.append(s.csv_name)
    return names


def _rejection_line(analysis: Analysis) -> str:
    rejected = sum(analysis.rejections.values())
    detail = ", ".join(f"{k}={v}" for k, v in sorted(analysis.rejections.items()))
    return f"Responses used: {analysis.n_used}; rejected: {rejected}" + (f" ({detail})" if detail else "")


def cmd_estimate(config: RunConfig) -> StageResult:
    write_config(config)
    data_stamp = _data_stamp(config)
    directory = config.out_dir / "estimate"
    key = _analysis_key(config, data_stamp, "estimate")
    if _up_to_date(directory, key):
        return StageResult("estimate", directory, True, sorted(_read_stamp(directory)["outputs"]))
    analysis = analyze(config, with_calibration=False)
    if not analysis.sections:
        raise RunConfigError("no estimation analyses are enabled for this experiment")
    _fresh_dir(directory)
    names = _write_sections(directory, analysis.sections, "tables.txt")
    with open(directory / "tables.txt", "a") as fh:
        fh.write("\n" + _rejection_line(analysis) + "\n")
    _write_stamp(directory, "estimate", key, names)
    return StageResult("estimate", directory, False, names)


def cmd_calibrate(config: RunConfig) -> StageResult:
    write_config(config)
    if config.experiment != "distribution":
        raise RunConfigError("calibration applies to the distribution experiment only")
    data_stamp = _data_stamp(config)
    directory = config.out_dir / "calibrate"
    key = _analysis_key(config, data_stamp, "calibrate")
    if _up_to_date(directory, key):
        return StageResult("calibrate", directory, True, sorted(_read_stamp(directory)["outputs"]))
    data = load_data(config)
    resp = load_responses(config, data)
    sections, hs = _calibration_sections(config, data, resp)
    _fresh_dir(directory)
    names = _write_sections(directory, sections, "calibration.txt")
    names += _write_histogram_csvs(directory, hs)
    _write_stamp(directory, "calibrate", key, names)
    return StageResult("calibrate", directory, False, names)


def _write_histogram_csvs(directory: Path, hs) -> list[str]:
    sub = directory / "histograms"
    sub.mkdir(exist_ok=True)
    names = []
    for group in (hs.differences, hs.raw):
        for key, h in group.items():
            (sub / f"{key}.csv").write_text(h.to_csv())
            names.append(f"histograms/{key}.csv")
    return names


def _plot_histograms(path: Path, hists: dict, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(hists), figsize=(4 * len(hists), 3.2), squeeze=False)
    for ax, h in zip(axes[0], hists.values()):
        widths = np.diff(h.edges)
        ax.bar(h.edges[:-1], h.counts, width=widths, align="edge", color="#4575b4", edgecolor="white",
               linewidth=0.3)
        ax.set_title(h.name, fontsize=9)
        ax.set_xlabel("percent", fontsize=8)
        ax.tick_params(labelsize=7)
    fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)


def cmd_report(config: RunConfig) -> StageResult:
    """Regenerate every table and figure from data files and stored QueryRecords."""
    write_config(config)
    data_stamp = _data_stamp(config)
    directory = config.out_dir / "report"
    key = _analysis_key(config, data_stamp, "report")
    if _up_to_date(directory, key):
        return StageResult("report", directory, True, sorted(_read_stamp(directory)["outputs"]))
    analysis = analyze(config)
    _fresh_dir(directory)
    fc = config.forecaster_config()
    lines = [
        "# Extrapolation audit report",
        "",
        f"- Experiment: {config.experiment}",
        f"- Backend: {fc.backend_id()}",
        f"- Lags: {config.lags}" if config.experiment != "distribution" else "- Lags: n/a",
        f"- Seed: {config.seed}",
        f"- Configuration hash: {config_hash(config)}",
        f"- {_rejection_line(analysis)}",
        "",
        "Data files:",
        "",
    ]
    lines += [f"- {name} sha256 {digest}" for name, digest in sorted(data_stamp["outputs"].items())]
    lines.append("")
    names = ["report.md"]
    for s in analysis.sections + analysis.calibration:
        lines += [f"## {s.title}", "", "```", s.text.rstrip("\n"), "```", ""]
        if s.csv_name:
            (directory / s.csv_name).write_text(s.csv_text)
            names.append(s.csv_name)
    if analysis.histograms is not None:
        fig_dir = directory / "figures"
        fig_dir.mkdir()
        _plot_histograms(fig_dir / "forecasts.png", analysis.histograms.raw,
                         "Forecast and historical distributions")
        _plot_histograms(fig_dir / "differences.png", analysis.histograms.differences,
                         "Forecast minus historical statistic")
        names += ["figures/forecasts.png", "figures/differences.png"]
        names += _write_histogram_csvs(directory, analysis.histograms)
        lines += ["## Figures", "", "![Forecast and historical distributions](figures/forecasts.png)", "",
                  "![Forecast minus historical statistic](figures/differences.png)", ""]
    (directory / "report.md").write_text("\n".join(lines))
    _write_stamp(directory, "report", key, names)
    return StageResult("report", directory, False, names)


STAGES = {
    "simulate": cmd_simulate,
    "prompts": cmd_prompts,
    "query": cmd_query,
    "estimate": cmd_estimate,
    "calibrate": cmd_calibrate,
    "report": cmd_report,
}

__all__ = [
    "BACKENDS", "CONFIG_VERSION", "EXPERIMENTS", "RunConfig", "RunConfigError", "StageError", "StageResult",
    "analyze", "cmd_calibrate", "cmd_estimate", "cmd_prompts", "cmd_query", "cmd_report", "cmd_simulate",
    "config_hash", "load_config", "resolve_config",
]
