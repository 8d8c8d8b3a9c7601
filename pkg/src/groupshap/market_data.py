"""Price ingestion, calendar alignment, MinMax scaling and supervised windows."""

from __future__ import annotations

import csv
import datetime as _dt
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import indicators
from ._io import array_digest, atomic_open
from .errors import (
    AlignmentError,
    ConfigurationError,
    DataError,
    EmptyWindowError,
    InsufficientDataError,
    IntegrityError,
    ParseError,
    SchemaError,
)

logger = logging.getLogger(__name__)

PRICE_FIELDS = ("open", "high", "low", "close", "volume")
TARGET = "target"


def parse_date(text: str) -> np.datetime64:
    return np.datetime64(_dt.date.fromisoformat(text.strip()), "D")


def years_of(dates: np.ndarray) -> np.ndarray:
    return dates.astype("datetime64[Y]").astype(np.int64) + 1970


# ---------------------------------------------------------------------------
# Price series
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PriceSeries:
    """Daily observations for one instrument.

    Only ``close`` is mandatory; macro series usually carry nothing else.
    """

    symbol: str
    dates: np.ndarray
    close: np.ndarray
    open: np.ndarray | None = None
    high: np.ndarray | None = None
    low: np.ndarray | None = None
    volume: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.dates)
        for name in PRICE_FIELDS:
            arr = getattr(self, name)
            if arr is not None and len(arr) != n:
                raise SchemaError(f"{self.symbol}: field {name!r} has {len(arr)} rows, expected {n}")
        if n > 1 and not np.all(np.diff(self.dates.astype(np.int64)) > 0):
            raise IntegrityError(f"{self.symbol}: dates must be strictly increasing")
        if np.any(~(self.close > 0)):
            bad = self.dates[np.argmax(~(self.close > 0))]
            raise IntegrityError(f"{self.symbol}: non-positive close on {bad}")
        if self.volume is not None and np.any(self.volume < 0):
            raise IntegrityError(f"{self.symbol}: negative volume")

    def __len__(self) -> int:
        return len(self.dates)

    def field(self, name: str) -> np.ndarray:
        arr = getattr(self, name)
        if arr is None:
            raise SchemaError(f"{self.symbol} has no {name!r} field")
        return arr


def _sorted_unique(symbol: str, dates: list, rows: dict[str, list]) -> dict:
    d = np.array(dates, dtype="datetime64[D]")
    order = np.argsort(d, kind="stable")
    d = d[order]
    dup = np.flatnonzero(d[1:] == d[:-1])
    if dup.size:
        raise IntegrityError(f"{symbol}: duplicate date {d[dup[0]]}")
    return {"dates": d, **{k: np.asarray(v, dtype=np.float64)[order] for k, v in rows.items()}}


def load_price_csv(
    path: str | os.PathLike,
    schema: Mapping[str, str] | None = None,
    symbol: str | None = None,
) -> PriceSeries:
    """Read an OHLCV-style CSV into a :class:`PriceSeries`.

    ``schema`` maps field names (``date``, ``open``, ``high``, ``low``,
    ``close``, ``volume``) to CSV header names. By default each field is
    looked up under its own name, and optional fields absent from the
    header are skipped.
    """
    symbol = symbol or os.path.splitext(os.path.basename(path))[0]
    explicit = schema is not None
    schema = dict(schema or {f: f for f in ("date",) + PRICE_FIELDS})
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for req in ("date", "close"):
            if schema.get(req) not in header:
                raise SchemaError(f"{path}: missing required column {schema.get(req, req)!r}")
        fields = []
        for f in PRICE_FIELDS:
            col = schema.get(f)
            if col in header:
                fields.append(f)
            elif explicit and col is not None:
                raise SchemaError(f"{path}: schema column {col!r} not in header")
        dates: list = []
        rows: dict[str, list] = {f: [] for f in fields}
        for lineno, rec in enumerate(reader, start=2):
            try:
                dates.append(parse_date(rec[schema["date"]]))
            except (ValueError, TypeError) as exc:
                raise ParseError(f"{path}:{lineno}: bad date {rec.get(schema['date'])!r}") from exc
            for f in fields:
                try:
                    rows[f].append(float(rec[schema[f]]))
                except (ValueError, TypeError) as exc:
                    raise ParseError(f"{path}:{lineno}: bad {f} value {rec.get(schema[f])!r}") from exc
    data = _sorted_unique(symbol, dates, rows)
    return PriceSeries(symbol=symbol, **data)


def load_series_csv(path: str | os.PathLike) -> list[PriceSeries]:
    """Read a wide CSV (``date`` plus one column per series) as close-only series.

    Empty cells mean "no observation that day" so series with different
    trading calendars can share a file.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if "date" not in header:
            raise SchemaError(f"{path}: missing required column 'date'")
        names = [h for h in header if h != "date"]
        obs: dict[str, tuple[list, list]] = {n: ([], []) for n in names}
        for lineno, rec in enumerate(reader, start=2):
            try:
                d = parse_date(rec["date"])
            except (ValueError, TypeError) as exc:
                raise ParseError(f"{path}:{lineno}: bad date {rec.get('date')!r}") from exc
            for n in names:
                cell = (rec.get(n) or "").strip()
                if not cell:
                    continue
                try:
                    obs[n][1].append(float(cell))
                except ValueError as exc:
                    raise ParseError(f"{path}:{lineno}: bad {n} value {cell!r}") from exc
                obs[n][0].append(d)
    out = []
    for n in names:
        data = _sorted_unique(n, obs[n][0], {"close": obs[n][1]})
        out.append(PriceSeries(symbol=n, **data))
    return out


def load_calendar_csv(path: str | os.PathLike) -> np.ndarray:
    """One-column CSV of trading days (header optional)."""
    dates = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not row[0].strip():
                continue
            try:
                dates.append(parse_date(row[0]))
            except ValueError as exc:
                if lineno == 1:
                    continue
                raise ParseError(f"{path}:{lineno}: bad date {row[0]!r}") from exc
    cal = np.array(dates, dtype="datetime64[D]")
    _check_calendar(cal)
    return cal


def _check_calendar(calendar: np.ndarray) -> None:
    if len(calendar) == 0:
        raise AlignmentError("calendar is empty")
    if np.any(np.diff(calendar.astype(np.int64)) <= 0):
        raise AlignmentError("calendar must be strictly increasing")


# ---------------------------------------------------------------------------
# Feature matrix
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureMatrix:
    """Named float columns sharing one date index (rows are dates)."""

    dates: np.ndarray
    columns: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape != (len(self.dates), len(self.columns)):
            raise SchemaError(
                f"values shape {v.shape} does not match {len(self.dates)} dates x {len(self.columns)} columns"
            )
        if len(set(self.columns)) != len(self.columns):
            raise SchemaError("duplicate column names")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return len(self.dates)

    def index(self, name: str) -> int:
        try:
            return self.columns.index(name)
        except ValueError:
            raise SchemaError(f"unknown column {name!r}") from None

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.index(name)]

    def select(self, names: Sequence[str]) -> "FeatureMatrix":
        idx = [self.index(n) for n in names]
        return FeatureMatrix(self.dates, tuple(names), self.values[:, idx])

    def rows(self, mask) -> "FeatureMatrix":
        return FeatureMatrix(self.dates[mask], self.columns, self.values[mask])

    def hstack(self, other: "FeatureMatrix") -> "FeatureMatrix":
        if not np.array_equal(self.dates, other.dates):
            raise AlignmentError("cannot join feature matrices with different date indexes")
        return FeatureMatrix(self.dates, self.columns + other.columns, np.hstack([self.values, other.values]))

    def with_values(self, values: np.ndarray) -> "FeatureMatrix":
        return FeatureMatrix(self.dates, self.columns, values)

    def warmup_length(self) -> int:
        """Number of leading rows that contain an undefined value."""
        ok = ~np.isnan(self.values).any(axis=1)
        return int(np.argmax(ok)) if ok.any() else len(self)

    def trim_warmup(self) -> "FeatureMatrix":
        k = self.warmup_length()
        out = self.rows(slice(k, None))
        if np.isnan(out.values).any():
            col = out.columns[int(np.flatnonzero(np.isnan(out.values).any(axis=0))[0])]
            raise DataError(f"column {col!r} has undefined values after the warm-up prefix")
        if len(out) == 0:
            raise InsufficientDataError("no rows left after trimming warm-up")
        return out


def _reindex_ffill(dates: np.ndarray, values: np.ndarray, calendar: np.ndarray) -> np.ndarray:
    """Value at each calendar day = last observation on or before that day."""
    pos = np.searchsorted(dates, calendar, side="right") - 1
    out = np.full((len(calendar),) + values.shape[1:], np.nan)
    ok = pos >= 0
    out[ok] = values[pos[ok]]
    return out


def align_calendar(
    series: Sequence[PriceSeries],
    calendar: np.ndarray,
    fields: Sequence[str] = ("close",),
    trim: bool = True,
) -> FeatureMatrix:
    """Reindex each series onto ``calendar`` with forward fill.

    Column names are the series symbol for ``close`` and ``symbol_field``
    otherwise. With ``trim`` the leading rows before the latest first
    observation are dropped from the joint matrix.
    """
    calendar = np.asarray(calendar, dtype="datetime64[D]")
    _check_calendar(calendar)
    cols, blocks = [], []
    for s in series:
        inside = (s.dates >= calendar[0]) & (s.dates <= calendar[-1])
        if not inside.any():
            raise AlignmentError(f"series {s.symbol!r} has no observations within the calendar span")
        for f in fields:
            if getattr(s, f) is None:
                continue
            cols.append(s.symbol if f == "close" else f"{s.symbol}_{f}")
            blocks.append(_reindex_ffill(s.dates, s.field(f), calendar))
    fm = FeatureMatrix(calendar, tuple(cols), np.column_stack(blocks) if blocks else np.empty((len(calendar), 0)))
    return fm.trim_warmup() if trim else fm


# ---------------------------------------------------------------------------
# Feature registry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IndicatorConfig:
    sma: tuple[int, ...] = (20, 50)
    ema: tuple[int, ...] = (20, 50)
    rsi: int = 14
    macd: tuple[int, int, int] = (12, 26, 9)
    bollinger: tuple[int, float] = (20, 2.0)

    def warmup(self) -> int:
        """Leading rows that carry at least one undefined indicator value."""
        return max(max(self.sma, default=1) - 1, self.rsi, self.bollinger[0] - 1, 1)


def technical_features(series: PriceSeries, config: IndicatorConfig = IndicatorConfig()) -> FeatureMatrix:
    """Indicator columns computed on the series' own dates (warm-up rows are ``nan``)."""
    close = series.close
    cols: dict[str, np.ndarray] = {"close": close}
    if series.volume is not None:
        cols["volume"] = series.volume
    if series.high is not None and series.low is not None:
        cols["range"] = series.high - series.low
    ret = np.full(len(close), np.nan)
    ret[1:] = np.diff(np.log(close))
    cols["log_return"] = ret
    for n in config.sma:
        cols[f"sma_{n}"] = indicators.compute_sma(close, n)
    for n in config.ema:
        cols[f"ema_{n}"] = indicators.compute_ema(close, n)
    cols[f"rsi_{config.rsi}"] = indicators.compute_rsi(close, config.rsi)
    macd, signal, hist = indicators.compute_macd(close, *config.macd)
    cols.update(macd=macd, macd_signal=signal, macd_hist=hist)
    _, upper, lower = indicators.compute_bollinger(close, *config.bollinger)
    cols.update(bb_upper=upper, bb_lower=lower)
    return FeatureMatrix(series.dates, tuple(cols), np.column_stack(list(cols.values())))


def build_market_features(
    target: PriceSeries,
    others: Sequence[PriceSeries] = (),
    calendar: np.ndarray | None = None,
    config: IndicatorConfig = IndicatorConfig(),
) -> tuple[FeatureMatrix, np.ndarray]:
    """Technical indicators of ``target`` plus forward-filled ``others`` on one calendar.

    Returns the warm-up-trimmed matrix and the raw target close on its dates.
    The calendar defaults to the target's own dates.
    """
    calendar = target.dates if calendar is None else np.asarray(calendar, dtype="datetime64[D]")
    tech = technical_features(target, config)
    tech_vals = _reindex_ffill(tech.dates, tech.values, calendar)
    fm = FeatureMatrix(calendar, tech.columns, tech_vals)
    if others:
        fm = fm.hstack(align_calendar(others, calendar, trim=False))
    fm = fm.trim_warmup()
    return fm, fm.column("close").copy()


# ---------------------------------------------------------------------------
# Scaling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScalerParams:
    columns: tuple[str, ...]
    mins: np.ndarray
    maxs: np.ndarray
    fitted_on: str = ""

    @property
    def constant(self) -> np.ndarray:
        return self.maxs == self.mins

    def _idx(self, name: str) -> int:
        try:
            return self.columns.index(name)
        except ValueError:
            raise SchemaError(f"scaler has no column {name!r}") from None

    def digest(self) -> str:
        return array_digest(np.array(self.columns), self.mins, self.maxs)

    def to_dict(self) -> dict:
        return {
            "columns": list(self.columns),
            "mins": self.mins.tolist(),
            "maxs": self.maxs.tolist(),
            "fitted_on": self.fitted_on,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScalerParams":
        return cls(tuple(d["columns"]), np.asarray(d["mins"], float), np.asarray(d["maxs"], float), d.get("fitted_on", ""))


def fit_minmax(matrix: FeatureMatrix, rows, fitted_on: str = "", extra: Mapping[str, np.ndarray] | None = None) -> ScalerParams:
    """Column extrema over the selected training ``rows`` only.

    ``rows`` is anything that indexes the first axis (slice, mask, index
    array). ``extra`` adds named full-length columns (e.g. the target close)
    fitted over the same rows.
    """
    sub = matrix.values[rows]
    if sub.shape[0] == 0:
        raise EmptyWindowError("cannot fit a scaler on zero training rows")
    cols = list(matrix.columns)
    mins, maxs = list(np.min(sub, axis=0)), list(np.max(sub, axis=0))
    for name, arr in (extra or {}).items():
        vals = np.asarray(arr, dtype=np.float64)[rows]
        cols.append(name)
        mins.append(np.min(vals))
        maxs.append(np.max(vals))
    return ScalerParams(tuple(cols), np.array(mins, dtype=np.float64), np.array(maxs, dtype=np.float64), fitted_on)


def _scale(x, lo, hi):
    span = hi - lo
    safe = np.where(span == 0, 1.0, span)
    return np.where(span == 0, 0.0, (x - lo) / safe)


def apply_minmax(matrix: FeatureMatrix, params: ScalerParams) -> FeatureMatrix:
    """``(x - min) / (max - min)`` per column, no clipping; constant columns map to 0."""
    idx = [params._idx(c) for c in matrix.columns]
    return matrix.with_values(_scale(matrix.values, params.mins[idx], params.maxs[idx]))


def scale_column(values, params: ScalerParams, column: str) -> np.ndarray:
    i = params._idx(column)
    return _scale(np.asarray(values, dtype=np.float64), params.mins[i], params.maxs[i])


def invert_minmax(values, params: ScalerParams, column: str) -> np.ndarray:
    i = params._idx(column)
    lo, hi = params.mins[i], params.maxs[i]
    return np.asarray(values, dtype=np.float64) * (hi - lo) + lo


# ---------------------------------------------------------------------------
# Aligned dataset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AlignedDataset:
    """Features plus next-day close; ``target[t]`` is ``close[t + 1]`` and the last row has none."""

    features: FeatureMatrix
    close: np.ndarray
    scaler: ScalerParams | None = None
    target: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        close = np.asarray(self.close, dtype=np.float64)
        if len(close) != len(self.features):
            raise SchemaError("close and features differ in length")
        object.__setattr__(self, "close", close)
        if self.target is None:
            tgt = np.full(len(close), np.nan)
            tgt[:-1] = close[1:]
            object.__setattr__(self, "target", tgt)

    @property
    def dates(self) -> np.ndarray:
        return self.features.dates

    def __len__(self) -> int:
        return len(self.features)

    def join(self, extra: FeatureMatrix) -> "AlignedDataset":
        return replace(self, features=self.features.hstack(extra))

    def fit_scaler(self, rows, fitted_on: str = "") -> ScalerParams:
        # target scale is fitted on closes of the training rows, never on the shifted target
        return fit_minmax(self.features, rows, fitted_on, extra={TARGET: self.close})

    def scaled(self, params: ScalerParams) -> "AlignedDataset":
        return AlignedDataset(
            features=apply_minmax(self.features, params),
            close=scale_column(self.close, params, TARGET),
            scaler=params,
            target=scale_column(self.target, params, TARGET),
        )

    def to_csv(self, path: str | os.PathLike, header_comment: str | None = None) -> None:
        with atomic_open(path) as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["date", *self.features.columns, TARGET])
            for i, d in enumerate(self.dates):
                tgt = "" if np.isnan(self.target[i]) else repr(float(self.target[i]))
                w.writerow([str(d), *(repr(float(v)) for v in self.features.values[i]), tgt])

    @classmethod
    def from_csv(cls, path: str | os.PathLike) -> "AlignedDataset":
        with open(path, newline="", encoding="utf-8") as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
        reader = csv.reader(lines)
        header = next(reader)
        if header[0] != "date" or header[-1] != TARGET:
            raise SchemaError(f"{path}: expected 'date', features..., 'target' header")
        dates, vals, tgt = [], [], []
        for row in reader:
            dates.append(parse_date(row[0]))
            vals.append([float(v) for v in row[1:-1]])
            tgt.append(float(row[-1]) if row[-1] else np.nan)
        fm = FeatureMatrix(np.array(dates, dtype="datetime64[D]"), tuple(header[1:-1]), np.array(vals))
        tgt = np.array(tgt)
        if "close" in fm.columns:
            close = fm.column("close").copy()
        else:
            close = np.concatenate([[np.nan], tgt[:-1]])
        return cls(features=fm, close=close, target=tgt)


# ---------------------------------------------------------------------------
# Rolling windows and supervised sequences
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Window:
    train_start: int
    train_end: int
    test_year: int

    @property
    def id(self) -> str:
        return f"{self.train_start}-{self.train_end}>{self.test_year}"

    def train_mask(self, dates: np.ndarray) -> np.ndarray:
        y = years_of(dates)
        return (y >= self.train_start) & (y <= self.train_end)

    def test_mask(self, dates: np.ndarray) -> np.ndarray:
        return years_of(dates) == self.test_year


@dataclass(frozen=True)
class RollingWindowPlan:
    windows: tuple[Window, ...]

    def __iter__(self):
        return iter(self.windows)

    def __len__(self) -> int:
        return len(self.windows)

    def __getitem__(self, i) -> Window:
        return self.windows[i]

    def for_test_year(self, year: int) -> Window:
        for w in self.windows:
            if w.test_year == year:
                return w
        raise ConfigurationError(f"no window tests on {year}; plan covers {[w.test_year for w in self.windows]}")


def make_windows(first_year: int, last_year: int, train_years: int = 3) -> RollingWindowPlan:
    """Consecutive (train on ``train_years`` years, test on the next) windows."""
    if last_year - first_year + 1 < train_years + 1:
        raise InsufficientDataError(
            f"{first_year}-{last_year} spans fewer than {train_years + 1} years"
        )
    return RollingWindowPlan(tuple(
        Window(y, y + train_years - 1, y + train_years)
        for y in range(first_year, last_year - train_years + 1)
    ))


def plan_for_dates(dates: np.ndarray, train_years: int = 3) -> RollingWindowPlan:
    y = years_of(dates)
    return make_windows(int(y.min()), int(y.max()), train_years)


@dataclass(frozen=True)
class SequenceSet:
    """Supervised pairs: ``X[i]`` is ``steps`` rows ending at ``end_index[i]``; ``y[i]`` is the next-day target."""

    X: np.ndarray
    y: np.ndarray
    end_index: np.ndarray
    target_dates: np.ndarray
    columns: tuple[str, ...]
    context_from_train: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class WindowSequences:
    window: Window
    train: SequenceSet
    test: SequenceSet


def _gather(values: np.ndarray, ends: np.ndarray, steps: int) -> np.ndarray:
    offs = np.arange(-steps + 1, 1)
    return values[ends[:, None] + offs[None, :]]


def make_sequences(dataset: AlignedDataset, window: Window, steps: int = 10) -> WindowSequences:
    """Cut lookback sequences for one rolling window.

    Training pairs keep inputs and target inside the training years. Test
    pairs have their target date in the test year; their lookback may reach
    into training rows, which is recorded in ``context_from_train``.
    """
    if steps < 1:
        raise ConfigurationError("steps must be >= 1")
    dates = dataset.dates
    train_idx = np.flatnonzero(window.train_mask(dates))
    test_idx = np.flatnonzero(window.test_mask(dates))
    if len(train_idx) < steps + 1:
        raise InsufficientDataError(
            f"window {window.id}: {len(train_idx)} training rows, need at least {steps + 1}"
        )
    if len(test_idx) == 0:
        raise InsufficientDataError(f"window {window.id}: no rows in test year")
    first_train, last_train = train_idx[0], train_idx[-1]
    first_test = test_idx[0]

    train_ends = np.arange(first_train + steps - 1, last_train)
    test_ends = test_idx - 1
    test_ends = test_ends[test_ends - steps + 1 >= 0]

    vals = dataset.features.values

    def build(ends, context):
        return SequenceSet(
            X=_gather(vals, ends, steps),
            y=dataset.target[ends],
            end_index=ends,
            target_dates=dates[ends + 1],
            columns=dataset.features.columns,
            context_from_train=context,
        )

    return WindowSequences(
        window=window,
        train=build(train_ends, np.zeros(len(train_ends), dtype=bool)),
        test=build(test_ends, test_ends - steps + 1 < first_test),
    )
