import math

import numpy as np
import pytest

from groupshap.errors import ConfigurationError, SchemaError, TrainingError
from groupshap.forecaster import (
    AdamWState,
    ForecastModel,
    TrainConfig,
    Variant,
    adamw_step,
    predict,
    train,
    write_training_log,
)
from groupshap.market_data import FeatureMatrix, SequenceSet, fit_minmax, invert_minmax

TECH = ("close", "rsi")
TEXT = ("group_0_weight", "sentiment_pos")


def sequence_set(X, y, columns):
    n = len(y)
    return SequenceSet(X, np.asarray(y, float), np.arange(n), np.arange(n).astype("datetime64[D]"),
                       tuple(columns), np.zeros(n, bool))


def small(**kw):
    base = dict(hidden_size=6, num_layers=1, head_hidden=(4,), epochs=3, steps=4, batch_size=8,
                learning_rate=1e-2, dropout=0.1, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def random_set(n=40, steps=4, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, steps, 4))
    return sequence_set(X, X[:, -1, 0] * 0.5 + 0.2, TECH + TEXT)


class TestAdamW:
    def _params(self):
        return {"w": np.array([1.0, -2.0, 0.5])}

    def test_zero_grad_no_decay(self):
        p = self._params()
        before = p["w"].copy()
        adamw_step(p, {"w": np.zeros(3)}, AdamWState.zeros_like(p), lr=1e-3, weight_decay=0.0)
        np.testing.assert_array_equal(p["w"], before)

    def test_decay_only(self):
        p = self._params()
        before = p["w"].copy()
        adamw_step(p, {"w": np.zeros(3)}, AdamWState.zeros_like(p), lr=1e-4, weight_decay=0.1)
        np.testing.assert_allclose(p["w"], before * (1 - 1e-5), rtol=1e-15)

    def test_constant_gradient_scalar_recurrence(self):
        g, lr, wd, b1, b2, eps = -0.3, 1e-2, 0.01, 0.9, 0.999, 1e-8
        p = {"w": np.array([0.8])}
        state = AdamWState.zeros_like(p)
        w, m, v = 0.8, 0.0, 0.0
        for t in range(1, 201):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mh, vh = m / (1 - b1 ** t), v / (1 - b2 ** t)
            w = w - lr * (mh / (math.sqrt(vh) + eps) + wd * w)
            adamw_step(p, {"w": np.array([g])}, state, lr, wd, (b1, b2), eps)
            assert p["w"][0] == pytest.approx(w, rel=1e-13)
        # with a constant gradient the Adam step tends to lr * sign(g)
        assert mh / (math.sqrt(vh) + eps) == pytest.approx(-1.0, abs=1e-6)

    def test_shape_mismatch(self):
        p = self._params()
        state = AdamWState({"w": np.zeros(2)}, {"w": np.zeros(2)})
        with pytest.raises(SchemaError):
            adamw_step(p, {"w": np.zeros(3)}, state)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.learning_rate, c.batch_size, c.steps, c.epochs) == (1e-4, 32, 10, 50)
        assert (c.hidden_size, c.num_layers, c.head_hidden, c.dropout) == (256, 2, (128,), 0.1)

    def test_round_trip_and_unknown_keys(self):
        c = small(variant="TECH_ONLY")
        assert TrainConfig.from_dict(c.to_dict()) == c
        with pytest.raises(ConfigurationError):
            TrainConfig.from_dict({"learning_rate": 1e-3, "momentum": 0.9})

    def test_non_positive(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(epochs=0)


class TestTrain:
    def test_linear_trend_fits(self):
        steps = 10
        series = np.linspace(0.0, 1.0, 260)
        ends = np.arange(steps - 1, len(series) - 1)
        X = np.stack([series[e - steps + 1:e + 1] for e in ends])[:, :, None]
        data = sequence_set(X, series[ends + 1], ("close",))
        cfg = TrainConfig(hidden_size=16, num_layers=2, head_hidden=(16,), learning_rate=3e-3, epochs=50,
                          steps=steps, variant="TECH_ONLY", seed=0)
        model = train(data, cfg, ("close",))
        mse = float(np.mean((model.predict_scaled(X) - data.y) ** 2))
        assert mse < 0.1 * np.var(data.y)
        assert model.training_log[-1][1] < model.training_log[0][1]

    def test_bit_identical_for_seed(self):
        data = random_set()
        a, b = train(data, small(), TECH, TEXT), train(data, small(), TECH, TEXT)
        assert a.digest() == b.digest()
        assert train(data, small(seed=4), TECH, TEXT).digest() != a.digest()

    def test_tech_only_ignores_text_columns(self):
        data = random_set()
        X2 = data.X.copy()
        X2[:, :, 2:] = np.random.default_rng(9).permutation(X2[:, :, 2:].reshape(-1)).reshape(X2[:, :, 2:].shape) * 7
        other = sequence_set(X2, data.y, data.columns)
        cfg = small(variant=Variant.TECH_ONLY)
        a, b = train(data, cfg, TECH, TEXT), train(other, cfg, TECH, TEXT)
        assert a.digest() == b.digest()
        assert a.manifest == TECH
        np.testing.assert_array_equal(a.predict_scaled(data.X[:, :, :2]), b.predict_scaled(data.X[:, :, :2]))

    def test_full_needs_text(self):
        with pytest.raises(ConfigurationError):
            train(random_set(), small(), TECH)

    def test_overlap_rejected(self):
        with pytest.raises(SchemaError):
            train(random_set(), small(), TECH, ("close",))

    def test_divergence_reports_epoch(self):
        data = random_set()
        bad = sequence_set(data.X, np.full(len(data.y), np.inf), data.columns)
        with pytest.raises(TrainingError, match="epoch 1"):
            train(bad, small(), TECH, TEXT)

    def test_wrong_steps(self):
        with pytest.raises(SchemaError):
            train(random_set(steps=5), small(), TECH, TEXT)


class TestPredict:
    def test_constant_target(self):
        data = random_set()
        const = sequence_set(data.X, np.full(len(data.y), 0.7), data.columns)
        model = train(const, small(epochs=60, dropout=0.0, learning_rate=2e-2), TECH, TEXT)
        assert predict(model, data.X[0]) == pytest.approx(0.7, abs=0.02)

    def test_price_units_are_inverted_head_output(self):
        data = random_set()
        dates = np.arange(len(data.y)).astype("datetime64[D]")
        fm = FeatureMatrix(dates, ("target",), (100 + 50 * data.y)[:, None])
        scaler = fit_minmax(fm, slice(None))
        model = train(data, small(), TECH, TEXT, scaler=scaler)
        raw = model.predict_scaled(data.X)
        np.testing.assert_array_equal(model.predict_prices(data.X), invert_minmax(raw, scaler, "target"))
        assert predict(model, data.X[3]) == predict(model, data.X[3])

    def test_manifest_selection_and_mismatch(self):
        data = random_set()
        model = train(data, small(), TECH, TEXT)
        shuffled = data.X[0][:, [3, 1, 0, 2]]
        cols = (TEXT[1], TECH[1], TECH[0], TEXT[0])
        assert predict(model, shuffled, cols) == predict(model, data.X[0])
        with pytest.raises(SchemaError):
            predict(model, data.X[0][:, :3], cols[:3])
        with pytest.raises(SchemaError):
            model.predict_scaled(data.X[:, :, :3])

    def test_save_load_bit_identical(self, tmp_path):
        data = random_set()
        dates = np.arange(len(data.y)).astype("datetime64[D]")
        scaler = fit_minmax(FeatureMatrix(dates, ("target",), data.y[:, None]), slice(None))
        model = train(data, small(), TECH, TEXT, scaler=scaler)
        model.save(tmp_path / "m.npz")
        back = ForecastModel.load(tmp_path / "m.npz")
        assert back.digest() == model.digest() and back.manifest == model.manifest
        assert back.predict_prices(data.X).tobytes() == model.predict_prices(data.X).tobytes()

    def test_training_log_csv(self, tmp_path):
        model = train(random_set(), small(), TECH, TEXT)
        write_training_log(tmp_path / "log.csv", model.training_log)
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "epoch,mean_loss,wall_ms" and len(lines) == 4
