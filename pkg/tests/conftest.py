import sys

import numpy as np
import pytest

from groupshap.market_data import PriceSeries


def business_days(start: str, n: int) -> np.ndarray:
    days = np.arange(np.datetime64(start), np.datetime64(start) + 3 * n, dtype="datetime64[D]")
    return days[np.is_busday(days)][:n]


def random_walk(dates: np.ndarray, seed: int = 0, symbol: str = "spx") -> PriceSeries:
    rng = np.random.default_rng(seed)
    close = 100 * np.exp(np.cumsum(rng.normal(0, 0.01, len(dates))))
    return PriceSeries(
        symbol, dates, close,
        open=close * 1.001, high=close * 1.01, low=close * 0.99,
        volume=rng.integers(1_000, 2_000, len(dates)).astype(float),
    )


@pytest.fixture
def write_csv(tmp_path):
    def _write(name: str, text: str):
        p = tmp_path / name
        p.write_text(text)
        return p

    return _write


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
