"""Synthetic price/news corpus with a planted group-sentiment -> return link."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from ._io import atomic_open, write_json
from .errors import ConfigurationError
from .grouping import DocumentEmbedding, write_embeddings
from .market_data import PriceSeries

MACRO_NAMES = ("gold", "btc", "wti", "us2y", "us10y", "dxy")


@dataclass(frozen=True)
class SynthSpec:
    years: int = 10
    start_year: int = 2015
    n_features: int = 6
    n_directions: int = 5
    separation_deg: float = 90.0
    noise_deg: float = 5.0
    snr: float = 1.0
    dim: int = 32
    docs_per_day: int = 6
    daily_vol: float = 0.01
    seed: int = 0

    def __post_init__(self):
        for name in ("years", "n_directions", "dim", "docs_per_day"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.n_features < 0 or self.snr < 0 or self.noise_deg < 0 or self.daily_vol <= 0:
            raise ConfigurationError("n_features, snr and noise_deg must be >= 0, daily_vol > 0")
        if not 0.0 < self.separation_deg <= 90.0:
            raise ConfigurationError("separation_deg must lie in (0, 90]")
        if self.dim < self.n_directions:
            raise ConfigurationError("dim must be at least n_directions")

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthSpec":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SynthData:
    spec: SynthSpec
    target: PriceSeries
    macro: list[PriceSeries]
    documents: list[DocumentEmbedding]
    directions: np.ndarray
    doc_groups: np.ndarray
    betas: np.ndarray


def planted_directions(k: int, dim: int, separation_deg: float, rng: np.random.Generator) -> np.ndarray:
    """``k`` unit vectors in ``R^dim`` with every pairwise angle equal to ``separation_deg``."""
    c = np.cos(np.deg2rad(separation_deg))
    gram = (1.0 - c) * np.eye(k) + c * np.ones((k, k))
    base = np.linalg.cholesky(gram)  # rows have the requested inner products
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    return base @ q[:k]


def perturb(direction: np.ndarray, max_deg: float, rng: np.random.Generator) -> np.ndarray:
    """Rotate a unit vector by a uniform angle in ``[0, max_deg]`` toward a random tangent."""
    t = rng.normal(size=direction.shape)
    t -= (t @ direction) * direction
    t /= np.linalg.norm(t)
    theta = np.deg2rad(rng.uniform(0.0, max_deg))
    return np.cos(theta) * direction + np.sin(theta) * t


def _calendar(spec: SynthSpec) -> np.ndarray:
    start = np.datetime64(f"{spec.start_year}-01-01")
    end = np.datetime64(f"{spec.start_year + spec.years}-01-01")
    days = np.arange(start, end, dtype="datetime64[D]")
    return days[np.is_busday(days)]


def generate(spec: SynthSpec) -> SynthData:
    """Build the corpus in memory. Identical specs give identical data."""
    rng = np.random.default_rng(spec.seed)
    cal = _calendar(spec)
    T, k = len(cal), spec.n_directions

    directions = planted_directions(k, spec.dim, spec.separation_deg, rng)
    betas = rng.normal(size=k)
    betas /= np.linalg.norm(betas)

    # latent per-group tone each day; documents report it
    tone = rng.uniform(-1.0, 1.0, size=(T, k))
    docs, doc_groups = [], []
    sums = np.zeros((T, k))
    counts = np.zeros((T, k))
    for t in range(T):
        for j in range(spec.docs_per_day):
            g = int(rng.integers(k))
            p = float(np.clip(tone[t, g] + rng.normal(0.0, 0.05), -1.0, 1.0))
            neutral = rng.uniform() * (1.0 - abs(p))
            p_pos = (1.0 - neutral + p) / 2.0
            p_neg = (1.0 - neutral - p) / 2.0
            vec = perturb(directions[g], spec.noise_deg, rng)
            docs.append(DocumentEmbedding(f"d{t:05d}-{j}", cal[t], vec, p_pos, p_neg, 1.0 - p_pos - p_neg))
            doc_groups.append(g)
            sums[t, g] += p_pos - p_neg
            counts[t, g] += 1
    observed = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)

    driver = observed @ betas
    driver = (driver - driver.mean()) / (driver.std() or 1.0)
    w = spec.snr / (1.0 + spec.snr)
    eps = rng.normal(size=T)
    ret = np.zeros(T)
    # day t's news moves the close of day t + 1
    ret[1:] = spec.daily_vol * (np.sqrt(w) * driver[:-1] + np.sqrt(1.0 - w) * eps[1:])
    close = 100.0 * np.exp(np.cumsum(ret))
    open_ = close * np.exp(rng.normal(0.0, spec.daily_vol / 4, T))
    spread = np.abs(rng.normal(0.0, spec.daily_vol / 2, T))
    high = np.maximum(open_, close) * (1.0 + spread)
    low = np.minimum(open_, close) * (1.0 - spread)
    volume = np.round(np.exp(rng.normal(15.0, 0.3, T)))
    target = PriceSeries("index", cal, close, open_, high, low, volume)

    macro = []
    all_days = np.arange(cal[0], cal[-1] + 1, dtype="datetime64[D]")
    for i in range(spec.n_features):
        name = MACRO_NAMES[i] if i < len(MACRO_NAMES) else f"macro_{i}"
        # btc trades every calendar day, the rest on the business calendar
        days = all_days if name == "btc" else cal
        level = 50.0 * (i + 1) * np.exp(np.cumsum(rng.normal(0.0, spec.daily_vol, len(days))))
        macro.append(PriceSeries(name, days, level))

    return SynthData(spec, target, macro, docs, directions, np.array(doc_groups), betas)


def write_corpus(data: SynthData, out_dir: str | os.PathLike) -> dict[str, str]:
    """Write ``prices.csv``, ``macro.csv``, ``embeddings.jsonl`` and ``synth_truth.json``."""
    out = Path(out_dir)
    paths = {
        "price_csv": str(out / "prices.csv"),
        "macro_csv": str(out / "macro.csv"),
        "embeddings": str(out / "embeddings.jsonl"),
        "truth": str(out / "synth_truth.json"),
    }
    t = data.target
    with atomic_open(paths["price_csv"]) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "open", "high", "low", "close", "volume"])
        for i, d in enumerate(t.dates):
            w.writerow([str(d), repr(float(t.open[i])), repr(float(t.high[i])), repr(float(t.low[i])),
                        repr(float(t.close[i])), repr(float(t.volume[i]))])

    all_dates = np.unique(np.concatenate([s.dates for s in data.macro])) if data.macro else t.dates
    lookup = [dict(zip(s.dates.tolist(), s.close.tolist())) for s in data.macro]
    with atomic_open(paths["macro_csv"]) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", *(s.symbol for s in data.macro)])
        for d in all_dates.tolist():
            w.writerow([str(d), *(repr(m[d]) if d in m else "" for m in lookup)])

    write_embeddings(paths["embeddings"], data.documents)
    write_json(paths["truth"], {
        "spec": asdict(data.spec),
        "directions": data.directions.tolist(),
        "betas": data.betas.tolist(),
        "doc_groups": {d.doc_id: int(g) for d, g in zip(data.documents, data.doc_groups)},
    })
    return paths
