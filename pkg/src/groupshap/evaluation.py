"""Metrics, the rolling backtest, the group-count sweep and the attribution cost benchmark."""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from ._io import atomic_open, stage_seed
from .errors import DataError, DomainError, SchemaError
from .forecaster import ForecastModel, TrainConfig, Variant, train
from .grouping import (
    SENTIMENT_COLUMNS,
    DocumentEmbedding,
    GroupingModel,
    build_group_feature_series,
    fit_grouping_for_years,
    group_columns,
)
from .market_data import (
    AlignedDataset,
    FeatureMatrix,
    RollingWindowPlan,
    ScalerParams,
    Window,
    WindowSequences,
    make_sequences,
    years_of,
)
from .shapley import (
    CoalitionGame,
    FeatureGroups,
    Mode,
    ValueFunctionSpec,
    exact_shapley,
    sampled_shap,
    token_units,
    training_baseline,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _pair(actual, predicted) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(actual, dtype=np.float64).ravel()
    p = np.asarray(predicted, dtype=np.float64).ravel()
    if a.shape != p.shape:
        raise SchemaError(f"length mismatch: {a.size} actual vs {p.size} predicted")
    if a.size == 0:
        raise SchemaError("metrics need at least one observation")
    return a, p


def mae(actual, predicted) -> float:
    a, p = _pair(actual, predicted)
    return float(np.mean(np.abs(a - p)))


def rmse(actual, predicted) -> float:
    a, p = _pair(actual, predicted)
    return float(np.sqrt(np.mean((a - p) ** 2)))


def mape(actual, predicted) -> float:
    """Mean absolute percentage error, in percent."""
    a, p = _pair(actual, predicted)
    if np.any(a == 0):
        raise DomainError("MAPE is undefined when an actual value is zero")
    return float(100.0 * np.mean(np.abs((a - p) / a)))


def r2(actual, predicted) -> float:
    a, p = _pair(actual, predicted)
    sst = np.sum((a - a.mean()) ** 2)
    if sst == 0:
        raise DomainError("R^2 is undefined for a constant actual series")
    return float(1.0 - np.sum((a - p) ** 2) / sst)


def historical_volatility(close) -> float:
    """Annualised volatility of daily log returns, in percent (sample std x sqrt(252) x 100)."""
    c = np.asarray(close, dtype=np.float64).ravel()
    if c.size < 3:
        raise DomainError("historical volatility needs at least 3 prices")
    if np.any(c <= 0):
        raise DomainError("prices must be positive")
    r = np.diff(np.log(c))
    return float(np.std(r, ddof=1) * np.sqrt(252.0) * 100.0)


@dataclass(frozen=True)
class MetricReport:
    window: str
    variant: str
    mae: float
    rmse: float
    mape: float
    r2: float
    n: int

    @classmethod
    def compute(cls, window: str, variant: str, actual, predicted) -> "MetricReport":
        a, p = _pair(actual, predicted)
        return cls(window, variant, mae(a, p), rmse(a, p), mape(a, p), r2(a, p), len(a))


# ---------------------------------------------------------------------------
# Per-window pipeline
# ---------------------------------------------------------------------------


@dataclass
class BacktestInputs:
    """Raw, unscaled material for the rolling experiment.

    ``market`` holds the aligned technical/macro columns (warm-up trimmed)
    and ``close`` the raw target close on the same dates.
    """

    market: FeatureMatrix
    close: np.ndarray
    documents: Sequence[DocumentEmbedding]

    @property
    def tech_columns(self) -> tuple[str, ...]:
        return self.market.columns


@dataclass
class PreparedWindow:
    window: Window
    grouping: GroupingModel
    scaler: ScalerParams
    dataset: AlignedDataset
    sequences: WindowSequences
    tech_columns: tuple[str, ...]
    text_columns: tuple[str, ...]
    raw_target: np.ndarray
    dropped_documents: int


def prepare_window(inputs: BacktestInputs, window: Window, n_groups: int, seed: int, steps: int) -> PreparedWindow:
    """Fit grouping and scaler on the window's training years, then cut sequences."""
    grouping = fit_grouping_for_years(
        inputs.documents, n_groups, stage_seed(seed, "grouping"), window.train_start, window.train_end
    )
    text, dropped = build_group_feature_series(inputs.documents, grouping, inputs.market.dates)
    raw = AlignedDataset(features=inputs.market, close=inputs.close).join(text)
    scaler = raw.fit_scaler(window.train_mask(raw.dates), fitted_on=window.id)
    scaled = raw.scaled(scaler)
    return PreparedWindow(
        window=window,
        grouping=grouping,
        scaler=scaler,
        dataset=scaled,
        sequences=make_sequences(scaled, window, steps),
        tech_columns=inputs.tech_columns,
        text_columns=text.columns,
        raw_target=raw.target,
        dropped_documents=dropped,
    )


def window_train_seed(seed: int, window: Window) -> int:
    # both variants share it, so the comparison is paired
    return stage_seed(seed, f"train:{window.id}")


def train_variant(prepared: PreparedWindow, config: TrainConfig, variant: Variant, seed: int) -> ForecastModel:
    cfg = replace(config, variant=variant, seed=window_train_seed(seed, prepared.window))
    return train(prepared.sequences.train, cfg, prepared.tech_columns, prepared.text_columns, prepared.scaler)


def predict_test(model: ForecastModel, prepared: PreparedWindow) -> np.ndarray:
    test = prepared.sequences.test
    pos = {c: i for i, c in enumerate(test.columns)}
    X = test.X[:, :, [pos[c] for c in model.manifest]]
    return model.predict_prices(X)


@dataclass
class WindowResult:
    window: Window
    hv: float
    dates: np.ndarray
    actual: np.ndarray
    predictions: dict[str, np.ndarray]
    reports: dict[str, MetricReport]
    models: dict[str, ForecastModel] = field(repr=False)
    prepared: PreparedWindow = field(repr=False)

    def checksums(self) -> dict[str, str]:
        out = {"scaler": self.prepared.scaler.digest(), "grouping": self.prepared.grouping.digest()}
        out.update({f"model:{v}": m.digest() for v, m in self.models.items()})
        return out


def run_window(
    inputs: BacktestInputs,
    window: Window,
    config: TrainConfig,
    n_groups: int = 5,
    seed: int = 0,
    variants: Sequence[Variant] = (Variant.TECH_ONLY, Variant.FULL),
) -> WindowResult:
    prepared = prepare_window(inputs, window, n_groups, seed, config.steps)
    test = prepared.sequences.test
    actual = prepared.raw_target[test.end_index]
    test_close = inputs.close[window.test_mask(inputs.market.dates)]
    models, preds, reports = {}, {}, {}
    for v in variants:
        v = Variant(v)
        model = train_variant(prepared, config, v, seed)
        models[v.value] = model
        preds[v.value] = predict_test(model, prepared)
        reports[v.value] = MetricReport.compute(window.id, v.value, actual, preds[v.value])
    return WindowResult(
        window=window,
        hv=historical_volatility(test_close),
        dates=test.target_dates,
        actual=actual,
        predictions=preds,
        reports=reports,
        models=models,
        prepared=prepared,
    )


@dataclass
class BacktestResult:
    windows: list[WindowResult]

    @property
    def reports(self) -> list[MetricReport]:
        return [r for w in self.windows for r in w.reports.values()]

    def table3_rows(self) -> list[dict]:
        rows = []
        for w in self.windows:
            row = {"year": w.window.test_year, "window": w.window.id, "hv": w.hv}
            for v, prefix in ((Variant.TECH_ONLY.value, "tech"), (Variant.FULL.value, "full")):
                rep = w.reports.get(v)
                if rep is None:
                    continue
                row.update({f"{prefix}_mae": rep.mae, f"{prefix}_rmse": rep.rmse,
                            f"{prefix}_mape": rep.mape, f"{prefix}_r2": rep.r2})
            rows.append(row)
        return rows


def rolling_backtest(
    inputs: BacktestInputs,
    plan: RollingWindowPlan,
    config: TrainConfig,
    n_groups: int = 5,
    seed: int = 0,
) -> BacktestResult:
    """Train and score both variants on every window of ``plan``, in window order."""
    results = []
    for w in plan:
        logger.info("window %s", w.id)
        results.append(run_window(inputs, w, config, n_groups, seed))
    return BacktestResult(results)


# ---------------------------------------------------------------------------
# Group-count sensitivity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SensitivityRow:
    n_groups: int
    mae: float
    rmse: float
    r2: float


@dataclass(frozen=True)
class SensitivityReport:
    rows: tuple[SensitivityRow, ...]

    @property
    def chosen(self) -> int:
        """Group count with the highest R^2 (lowest count on ties)."""
        best = max(self.rows, key=lambda r: (r.r2, -r.n_groups))
        return best.n_groups


def sensitivity_sweep(
    inputs: BacktestInputs,
    window: Window,
    n_range: Iterable[int],
    config: TrainConfig,
    seed: int = 0,
) -> SensitivityReport:
    """Refit grouping and the FULL model for each group count and score the test year."""
    n_values = sorted(set(int(n) for n in n_range))
    if not n_values:
        raise DataError("empty group-count range")
    rows = []
    for k in n_values:
        res = run_window(inputs, window, config, k, seed, variants=(Variant.FULL,))
        rep = res.reports[Variant.FULL.value]
        rows.append(SensitivityRow(k, rep.mae, rep.rmse, rep.r2))
    return SensitivityReport(tuple(rows))


# ---------------------------------------------------------------------------
# Attribution cost benchmark
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchReport:
    method: str
    units: int
    evaluations: int
    seconds: float
    reduction_pct: float | None = None


def semantic_groups(model: ForecastModel) -> FeatureGroups:
    """One player per ``group_g_weight`` column of the model."""
    cols = [c for c in model.text_columns if c.startswith("group_") and c.endswith("_weight")]
    if not cols:
        raise SchemaError("model has no group weight columns")
    return FeatureGroups.singletons(cols)


def bench_attribution(
    model: ForecastModel,
    instances: np.ndarray,
    baseline: np.ndarray,
    groups,
    token_players=None,
    budget: int = 10,
    seed: int = 0,
) -> tuple[BenchReport, BenchReport]:
    """Time exact group attribution against token-level permutation sampling.

    Both methods explain the same ``instances`` (``(n, steps, manifest)``)
    through the same batched value function.
    """
    instances = np.asarray(instances, dtype=np.float64)
    steps = instances.shape[1]
    if token_players is None:
        token_players = token_units(model.manifest, steps)

    group_evals = token_evals = 0
    t0 = time.perf_counter()
    for x in instances:
        game = CoalitionGame(model, ValueFunctionSpec(baseline, x), groups)
        exact_shapley(game, game.n, game.players.names)
        group_evals += game.evaluations
    t_group = time.perf_counter() - t0
    n_groups = game.n

    t0 = time.perf_counter()
    for i, x in enumerate(instances):
        game = CoalitionGame(model, ValueFunctionSpec(baseline, x), token_players)
        sampled_shap(game, game.n, budget, seed + i, game.players.names)
        token_evals += game.evaluations
    t_token = time.perf_counter() - t0
    n_tokens = game.n

    token = BenchReport("token-permutation", n_tokens, token_evals, t_token)
    group = BenchReport("group-exact", n_groups, group_evals, t_group, (1.0 - t_group / t_token) * 100.0)
    return token, group


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def write_rows(path: str | os.PathLike, rows: Sequence[dict], provenance: str | None = None) -> None:
    """CSV with a header from the first row's keys and an optional ``#`` provenance line."""
    with atomic_open(path) as fh:
        if provenance:
            fh.write(f"# {provenance}\n")
        if not rows:
            return
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(rows[0]))
        for r in rows:
            w.writerow([_fmt(r[k]) for k in rows[0]])


def read_rows(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def metric_rows(reports: Iterable[MetricReport]) -> list[dict]:
    return [asdict(r) for r in reports]


def plot_rows(result: WindowResult) -> list[dict]:
    tech = result.predictions.get(Variant.TECH_ONLY.value)
    full = result.predictions.get(Variant.FULL.value)
    return [
        {
            "date": str(d),
            "actual": float(result.actual[i]),
            "predicted_tech": None if tech is None else float(tech[i]),
            "predicted_full": None if full is None else float(full[i]),
        }
        for i, d in enumerate(result.dates)
    ]


def sensitivity_rows(report: SensitivityReport) -> list[dict]:
    chosen = report.chosen
    return [
        {"n_groups": r.n_groups, "mae": r.mae, "rmse": r.rmse, "r2": r.r2, "chosen": int(r.n_groups == chosen)}
        for r in report.rows
    ]


def bench_rows(reports: Sequence[BenchReport]) -> list[dict]:
    return [
        {
            "method": r.method,
            "units": r.units,
            "evaluations": r.evaluations,
            "seconds": r.seconds,
            "minutes": r.seconds / 60.0,
            "reduction_pct": r.reduction_pct,
        }
        for r in reports
    ]
