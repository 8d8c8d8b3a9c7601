import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from groupshap.errors import DataError, DomainError, SchemaError
from groupshap.evaluation import (
    BacktestInputs,
    BenchReport,
    MetricReport,
    SensitivityReport,
    SensitivityRow,
    bench_attribution,
    bench_rows,
    historical_volatility,
    mae,
    mape,
    metric_rows,
    plot_rows,
    r2,
    read_rows,
    rmse,
    rolling_backtest,
    semantic_groups,
    sensitivity_rows,
    sensitivity_sweep,
    write_rows,
)
from groupshap.forecaster import TrainConfig, train
from groupshap.grouping import normalize_embeddings
from groupshap.market_data import SequenceSet, build_market_features, make_windows
from groupshap.synth import SynthSpec, generate

TINY = TrainConfig(hidden_size=3, num_layers=1, head_hidden=(3,), epochs=1, batch_size=64, steps=5, learning_rate=1e-2)


def synth_inputs(**kw):
    d = generate(SynthSpec(**kw))
    fm, close = build_market_features(d.target, d.macro)
    return BacktestInputs(fm, close, normalize_embeddings(d.documents))


class TestMetrics:
    def test_perfect(self):
        a = np.array([3.0, 5.0, 9.0])
        assert (mae(a, a), rmse(a, a), mape(a, a), r2(a, a)) == (0.0, 0.0, 0.0, 1.0)

    def test_mean_predictor(self):
        a = np.array([1.0, 4.0, 2.5, 8.0])
        assert r2(a, np.full(4, a.mean())) == 0.0

    def test_hand_example(self):
        a, p = [100.0, 200.0], [110.0, 180.0]
        assert abs(mae(a, p) - 15.0) < 1e-12
        assert abs(rmse(a, p) - math.sqrt(250.0)) < 1e-12
        assert abs(mape(a, p) - 10.0) < 1e-12
        # errors (-10, 20): SSE 500; deviations from the mean 150: SST 5000
        assert abs(r2(a, p) - 0.9) < 1e-12

    def test_errors(self):
        with pytest.raises(SchemaError):
            mae([1, 2], [1])
        with pytest.raises(DomainError):
            mape([0.0, 1.0], [1.0, 1.0])
        with pytest.raises(DomainError):
            r2([2.0, 2.0], [1.0, 3.0])

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.integers(2, 40), elements=st.floats(1.0, 1e4)),
           st.integers(0, 2**31))
    def test_report_invariants(self, actual, seed):
        if np.ptp(actual) == 0:
            actual = actual + np.arange(len(actual))
        pred = actual + np.random.default_rng(seed).normal(scale=50, size=len(actual))
        rep = MetricReport.compute("w", "FULL", actual, pred)
        assert rep.mae <= rep.rmse + 1e-12 and rep.mape >= 0 and rep.r2 <= 1.0 and rep.n == len(actual)


class TestVolatility:
    def test_constant(self):
        assert historical_volatility(np.full(10, 50.0)) == 0.0

    def test_alternating_returns(self):
        x = 0.02
        close = 100 * np.exp(np.cumsum([0] + [x, -x] * 5))
        m = 10  # returns, mean 0
        expected = x * math.sqrt(m / (m - 1)) * math.sqrt(252) * 100
        assert historical_volatility(close) == pytest.approx(expected, rel=1e-12)

    def test_doubling_halving(self):
        expected = math.log(2) * math.sqrt(4 / 3) * math.sqrt(252) * 100
        assert historical_volatility([1.0, 2.0, 1.0, 2.0, 1.0]) == pytest.approx(expected, rel=1e-12)

    def test_domain(self):
        with pytest.raises(DomainError):
            historical_volatility([1.0, -1.0, 2.0])


def test_backtest_counts_and_table_shape():
    inputs = synth_inputs(years=10, n_features=1, docs_per_day=2, seed=1)
    plan = make_windows(2015, 2024)
    res = rolling_backtest(inputs, plan, TINY, n_groups=3, seed=0)
    assert len(res.windows) == 7
    assert sum(len(w.models) for w in res.windows) == 14
    assert len(res.reports) == 14 and len(metric_rows(res.reports)) == 14
    rows = res.table3_rows()
    assert [r["year"] for r in rows] == list(range(2018, 2025))
    assert list(rows[0]) == ["year", "window", "hv", "tech_mae", "tech_rmse", "tech_mape", "tech_r2",
                             "full_mae", "full_rmse", "full_mape", "full_r2"]
    for w in res.windows:
        years = w.dates.astype("datetime64[Y]").astype(int) + 1970
        assert np.all(years == w.window.test_year)
        assert all(r.mae <= r.rmse for r in w.reports.values())
    pr = plot_rows(res.windows[0])
    assert list(pr[0]) == ["date", "actual", "predicted_tech", "predicted_full"]
    assert len(pr) == len(res.windows[0].dates)


def test_sensitivity_rows_and_single_group():
    inputs = synth_inputs(years=4, n_features=0, docs_per_day=2, seed=2)
    w = make_windows(2015, 2018)[0]
    rep = sensitivity_sweep(inputs, w, [3, 1, 2], TINY)
    assert [r.n_groups for r in rep.rows] == [1, 2, 3]
    rows = sensitivity_rows(rep)
    assert list(rows[0]) == ["n_groups", "mae", "rmse", "r2", "chosen"]
    assert sum(r["chosen"] for r in rows) == 1
    with pytest.raises(DataError):
        sensitivity_sweep(inputs, w, [], TINY)


def test_chosen_tie_breaks_low():
    rep = SensitivityReport((SensitivityRow(1, 1, 1, 0.5), SensitivityRow(2, 1, 1, 0.7), SensitivityRow(3, 1, 1, 0.7)))
    assert rep.chosen == 2


def test_bench_counts():
    rng = np.random.default_rng(0)
    tech = tuple(f"t{i}" for i in range(27))
    text = tuple(f"group_{g}_weight" for g in range(5))
    X = rng.uniform(size=(20, 10, 32))
    data = SequenceSet(X, rng.uniform(size=20), np.arange(20), np.arange(20).astype("datetime64[D]"),
                       tech + text, np.zeros(20, bool))
    cfg = TrainConfig(hidden_size=4, num_layers=1, head_hidden=(4,), epochs=1, steps=10)
    model = train(data, cfg, tech, text)
    token, group = bench_attribution(model, X[:2], X.mean((0, 1)), semantic_groups(model), budget=10)
    assert token.units == 320 and token.evaluations == 2 * 3202
    assert group.units == 5 and group.evaluations == 2 * 32
    assert group.reduction_pct == pytest.approx((1 - group.seconds / token.seconds) * 100)
    assert group.seconds < token.seconds
    rows = bench_rows([token, group])
    assert list(rows[0]) == ["method", "units", "evaluations", "seconds", "minutes", "reduction_pct"]


def test_rows_round_trip(tmp_path):
    rows = [{"a": 1, "b": 0.1, "c": None}, {"a": 2, "b": 1e-20, "c": "x"}]
    write_rows(tmp_path / "r.csv", rows, provenance="seed=3")
    text = (tmp_path / "r.csv").read_text()
    assert text.startswith("# seed=3\n")
    back = read_rows(tmp_path / "r.csv")
    assert back == [{"a": "1", "b": "0.1", "c": ""}, {"a": "2", "b": "1e-20", "c": "x"}]
    assert bench_rows([BenchReport("m", 1, 2, 60.0)])[0]["minutes"] == 1.0
