"""Technical indicators over a close-price sequence.

All functions take a 1-D sequence and return float64 arrays of the same
length. Entries inside an indicator's warm-up prefix are ``nan``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, EmptyWindowError


def _as_series(close) -> np.ndarray:
    return np.asarray(close, dtype=np.float64).ravel()


def compute_sma(close, n: int) -> np.ndarray:
    """Simple moving average; the first ``n - 1`` entries are undefined."""
    x = _as_series(close)
    if n < 1:
        raise ConfigurationError(f"SMA window must be >= 1, got {n}")
    if n > len(x):
        raise EmptyWindowError(f"SMA window {n} exceeds series length {len(x)}")
    out = np.full(len(x), np.nan)
    out[n - 1:] = sliding_window_view(x, n).mean(axis=1)
    return out


def compute_ema(close, n: int) -> np.ndarray:
    """Exponential moving average with ``alpha = 2 / (n + 1)`` seeded at ``close[0]``."""
    x = _as_series(close)
    if n < 1:
        raise ConfigurationError(f"EMA span must be >= 1, got {n}")
    if len(x) == 0:
        raise EmptyWindowError("EMA of an empty series")
    alpha = 2.0 / (n + 1.0)
    out = np.empty_like(x)
    acc = x[0]
    out[0] = acc
    for t in range(1, len(x)):
        acc = alpha * x[t] + (1.0 - alpha) * acc
        out[t] = acc
    return out


def compute_rsi(close, n: int = 14) -> np.ndarray:
    """Relative strength index with Wilder smoothing.

    The first average gain/loss is the simple mean of the first ``n`` price
    changes, so the first defined value sits at index ``n``. A window with
    neither gains nor losses reads 50.
    """
    x = _as_series(close)
    if n < 1:
        raise ConfigurationError(f"RSI period must be >= 1, got {n}")
    if len(x) < n + 1:
        raise EmptyWindowError(f"RSI({n}) needs at least {n + 1} prices, got {len(x)}")
    delta = np.diff(x)
    gain = np.where(delta > 0, delta, 0.0)
    loss = np.where(delta < 0, -delta, 0.0)

    out = np.full(len(x), np.nan)
    avg_gain = gain[:n].mean()
    avg_loss = loss[:n].mean()
    out[n] = _rsi_value(avg_gain, avg_loss)
    for t in range(n, len(delta)):
        avg_gain = (avg_gain * (n - 1) + gain[t]) / n
        avg_loss = (avg_loss * (n - 1) + loss[t]) / n
        out[t + 1] = _rsi_value(avg_gain, avg_loss)
    return out


def _rsi_value(avg_gain: float, avg_loss: float) -> float:
    if avg_loss == 0.0:
        return 50.0 if avg_gain == 0.0 else 100.0
    rs = avg_gain / avg_loss
    return 100.0 - 100.0 / (1.0 + rs)


def compute_macd(close, fast: int = 12, slow: int = 26, signal: int = 9):
    """Return ``(macd, signal_line, histogram)``."""
    if fast >= slow:
        raise ConfigurationError(f"MACD fast span ({fast}) must be shorter than slow span ({slow})")
    macd = compute_ema(close, fast) - compute_ema(close, slow)
    signal_line = compute_ema(macd, signal)
    return macd, signal_line, macd - signal_line


def compute_bollinger(close, n: int = 20, k: float = 2.0):
    """Return ``(mid, upper, lower)`` using the population standard deviation."""
    x = _as_series(close)
    if n < 2:
        raise ConfigurationError(f"Bollinger window must be >= 2, got {n}")
    if n > len(x):
        raise EmptyWindowError(f"Bollinger window {n} exceeds series length {len(x)}")
    mid = compute_sma(x, n)
    sd = np.full(len(x), np.nan)
    sd[n - 1:] = sliding_window_view(x, n).std(axis=1)
    return mid, mid + k * sd, mid - k * sd
