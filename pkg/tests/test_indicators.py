from fractions import Fraction

import numpy as np
import pytest

from groupshap.errors import ConfigurationError, EmptyWindowError
from groupshap.indicators import compute_bollinger, compute_ema, compute_macd, compute_rsi, compute_sma


def _ema_fractions(xs, n):
    alpha = Fraction(2, n + 1)
    out = [Fraction(xs[0])]
    for x in xs[1:]:
        out.append(alpha * x + (1 - alpha) * out[-1])
    return out


class TestSMA:
    def test_warmup_and_mean(self):
        out = compute_sma([1, 2, 3, 4], 3)
        assert np.isnan(out[:2]).all()
        np.testing.assert_array_equal(out[2:], [2.0, 3.0])

    def test_constant(self):
        out = compute_sma(np.full(30, 7.25), 5)
        np.testing.assert_array_equal(out[4:], 7.25)

    def test_hand_values(self):
        out = compute_sma([2, 4, 8, 16], 2)
        assert np.isnan(out[0])
        np.testing.assert_array_equal(out[1:], [3.0, 6.0, 12.0])

    def test_window_longer_than_series(self):
        with pytest.raises(EmptyWindowError):
            compute_sma([1, 2], 3)


class TestEMA:
    def test_constant_is_fixed_point(self):
        np.testing.assert_array_equal(compute_ema(np.full(10, 3.5), 4), 3.5)

    def test_alpha_one_passthrough(self):
        np.testing.assert_array_equal(compute_ema([0, 1], 1), [0.0, 1.0])

    def test_one_step(self):
        np.testing.assert_array_equal(compute_ema([10, 20], 3), [10.0, 15.0])

    def test_empty(self):
        with pytest.raises(EmptyWindowError):
            compute_ema([], 3)


class TestRSI:
    def test_increasing_reads_100(self):
        out = compute_rsi(np.arange(1.0, 30.0), 14)
        assert np.isnan(out[:14]).all()
        np.testing.assert_array_equal(out[14:], 100.0)

    def test_decreasing_reads_0(self):
        out = compute_rsi(np.arange(30.0, 1.0, -1.0), 14)
        np.testing.assert_array_equal(out[14:], 0.0)

    def test_alternating_steps_seed_value(self):
        # equal gain and loss in the first window
        out = compute_rsi([1, 2, 1, 2, 1, 2], 2)
        assert out[2] == 50.0

    def test_wilder_recursion_by_hand(self):
        # changes +1 -1 +1 +1: seed (0.5, 0.5); then (0.75, 0.25); then (0.875, 0.125)
        out = compute_rsi([1, 2, 1, 2, 3], 2)
        np.testing.assert_allclose(out[2:], [50.0, 75.0, 87.5], rtol=0, atol=1e-12)

    def test_flat_window_is_neutral(self):
        np.testing.assert_array_equal(compute_rsi(np.full(20, 5.0), 14)[14:], 50.0)

    def test_range(self):
        rng = np.random.default_rng(3)
        out = compute_rsi(100 + np.cumsum(rng.normal(size=300)), 14)
        assert np.nanmin(out) >= 0 and np.nanmax(out) <= 100

    def test_too_short(self):
        with pytest.raises(EmptyWindowError):
            compute_rsi([1, 2, 3], 3)


class TestMACD:
    def test_constant(self):
        macd, sig, hist = compute_macd(np.full(40, 12.0))
        np.testing.assert_array_equal(macd, 0.0)
        np.testing.assert_array_equal(hist, 0.0)

    def test_fast_not_shorter_rejected(self):
        with pytest.raises(ConfigurationError):
            compute_macd(np.arange(10.0), 4, 4, 2)

    def test_matches_exact_rational_recurrence(self):
        close = [1, 2, 3, 4, 5]
        fast, slow = _ema_fractions(close, 2), _ema_fractions(close, 4)
        macd = [f - s for f, s in zip(fast, slow)]
        sig = _ema_fractions(macd, 2)
        got = compute_macd(close, 2, 4, 2)
        np.testing.assert_allclose(got[0], [float(v) for v in macd], atol=1e-14)
        np.testing.assert_allclose(got[1], [float(v) for v in sig], atol=1e-14)
        np.testing.assert_allclose(got[2], [float(m - s) for m, s in zip(macd, sig)], atol=1e-14)


class TestBollinger:
    def test_constant_collapses(self):
        mid, up, lo = compute_bollinger(np.full(25, 9.0), 20, 2)
        np.testing.assert_array_equal(up[19:], mid[19:])
        np.testing.assert_array_equal(lo[19:], mid[19:])

    def test_zero_width(self):
        rng = np.random.default_rng(0)
        mid, up, lo = compute_bollinger(rng.random(30), 5, 0.0)
        np.testing.assert_array_equal(up[4:], mid[4:])
        np.testing.assert_array_equal(lo[4:], mid[4:])

    def test_two_points(self):
        mid, up, lo = compute_bollinger([1, 3], 2, 1)
        assert (mid[1], up[1], lo[1]) == (2.0, 3.0, 1.0)

    def test_window_too_long(self):
        with pytest.raises(EmptyWindowError):
            compute_bollinger([1, 2, 3], 4)
