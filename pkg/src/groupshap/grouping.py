"""Cosine-similarity grouping of document embeddings and daily group features."""

from __future__ import annotations

import json
import logging
import os
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from ._io import array_digest, atomic_open
from .errors import ClusteringError, DegenerateEmbeddingError, ParseError, SchemaError
from .market_data import FeatureMatrix, parse_date

logger = logging.getLogger(__name__)

MAX_ITER = 100
SENTIMENT_COLUMNS = ("sentiment_pos", "sentiment_neg", "sentiment_neu")


def group_columns(k: int) -> tuple[str, ...]:
    return tuple(f"group_{g}_weight" for g in range(k))


@dataclass(frozen=True)
class DocumentEmbedding:
    doc_id: str
    date: np.datetime64
    vector: np.ndarray
    p_pos: float
    p_neg: float
    p_neu: float

    def __post_init__(self):
        probs = (self.p_pos, self.p_neg, self.p_neu)
        if any(not (0.0 <= p <= 1.0) for p in probs):
            raise SchemaError(f"{self.doc_id}: sentiment probabilities must lie in [0, 1]")
        if abs(sum(probs) - 1.0) > 1e-6:
            raise SchemaError(f"{self.doc_id}: sentiment probabilities sum to {sum(probs)!r}, not 1")
        object.__setattr__(self, "vector", np.asarray(self.vector, dtype=np.float64))

    @property
    def polarity(self) -> float:
        return sentiment_polarity(self)


def sentiment_polarity(doc: DocumentEmbedding) -> float:
    """``p_pos - p_neg``."""
    return doc.p_pos - doc.p_neg


def load_embeddings(path: str | os.PathLike) -> list[DocumentEmbedding]:
    """Read the JSON-lines embedding file; every vector must share one dimension."""
    docs: list[DocumentEmbedding] = []
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                doc = DocumentEmbedding(
                    doc_id=str(rec["doc_id"]),
                    date=parse_date(rec["date"]),
                    vector=np.asarray(rec["vector"], dtype=np.float64),
                    p_pos=float(rec["p_pos"]),
                    p_neg=float(rec["p_neg"]),
                    p_neu=float(rec["p_neu"]),
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            if doc.vector.ndim != 1:
                raise SchemaError(f"{path}:{lineno}: vector must be a flat list")
            if dim is None:
                dim = len(doc.vector)
            elif len(doc.vector) != dim:
                raise SchemaError(f"{path}:{lineno}: vector dimension {len(doc.vector)} != {dim}")
            docs.append(doc)
    return docs


def write_embeddings(path: str | os.PathLike, docs: Iterable[DocumentEmbedding]) -> None:
    with atomic_open(path) as fh:
        for d in docs:
            rec = {
                "doc_id": d.doc_id,
                "date": str(d.date),
                "vector": d.vector.tolist(),
                "p_pos": d.p_pos,
                "p_neg": d.p_neg,
                "p_neu": d.p_neu,
            }
            fh.write(json.dumps(rec) + "\n")


def normalize_embeddings(docs: Sequence[DocumentEmbedding]) -> list[DocumentEmbedding]:
    out = []
    for d in docs:
        norm = np.linalg.norm(d.vector)
        if not norm > 0 or not np.isfinite(norm):
            raise DegenerateEmbeddingError(f"document {d.doc_id!r} has a zero or non-finite embedding")
        out.append(replace(d, vector=d.vector / norm))
    return out


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@dataclass(frozen=True)
class GroupingModel:
    k: int
    centroids: np.ndarray
    seed: int
    n_iter: int = field(default=0, compare=False)
    objective_history: tuple[float, ...] = field(default=(), compare=False, repr=False)

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def digest(self) -> str:
        return array_digest(self.centroids)

    def assign(self, vectors: np.ndarray) -> np.ndarray:
        """Group index per row; ties go to the lowest index."""
        return np.argmax(np.atleast_2d(vectors) @ self.centroids.T, axis=1)

    def to_dict(self) -> dict:
        return {"k": self.k, "d": self.dim, "seed": self.seed, "centroids": self.centroids.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GroupingModel":
        c = np.asarray(d["centroids"], dtype=np.float64)
        if c.shape != (d["k"], d["d"]):
            raise SchemaError(f"centroid array shape {c.shape} does not match k={d['k']}, d={d['d']}")
        return cls(k=int(d["k"]), centroids=c, seed=int(d["seed"]))

    def save(self, path: str | os.PathLike) -> None:
        with atomic_open(path) as fh:
            json.dump(self.to_dict(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "GroupingModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def assign_group(vector: np.ndarray, model: GroupingModel) -> int:
    return int(model.assign(vector)[0])


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Seeding by squared chord distance ``2 - 2 cos``, first centre uniform."""
    n = len(x)
    chosen = [int(rng.integers(n))]
    best = x @ x[chosen[0]]
    for _ in range(1, k):
        d2 = np.clip(2.0 - 2.0 * best, 0.0, None)
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            nxt = int(np.argmax(d2))
        chosen.append(nxt)
        best = np.maximum(best, x @ x[nxt])
    return x[chosen].copy()


def _objective(x: np.ndarray, c: np.ndarray, labels: np.ndarray) -> float:
    return float(np.einsum("ij,ij->", x, c[labels]))


def cluster_cosine_kmeans(docs_or_vectors, k: int, seed: int = 0, max_iter: int = MAX_ITER) -> GroupingModel:
    """Spherical k-means with k-means++ seeding.

    Accepts documents or a ``(n, d)`` array; rows are normalised first.
    Iterates until assignments stop changing or ``max_iter`` is hit. An
    empty cluster is re-seeded with the point least similar to its current
    centroid.
    """
    if k < 1:
        raise ClusteringError(f"k must be >= 1, got {k}")
    if isinstance(docs_or_vectors, np.ndarray):
        x = np.asarray(docs_or_vectors, dtype=np.float64)
    else:
        x = np.array([d.vector for d in docs_or_vectors], dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ClusteringError("need a non-empty 2-D set of vectors")
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise DegenerateEmbeddingError(f"row {int(np.argmax(norms == 0))} is a zero vector")
    x = x / norms[:, None]
    n_distinct = len(np.unique(x, axis=0))
    if n_distinct < k:
        raise ClusteringError(f"only {n_distinct} distinct vectors for k={k} groups")

    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(x, k, rng)
    labels = np.full(len(x), -1)
    history: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        sims = x @ centroids.T
        new = np.argmax(sims, axis=1)
        if np.array_equal(new, labels):
            break
        labels = new
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        counts = np.bincount(labels, minlength=k)
        for g in np.flatnonzero(counts == 0):
            own = sims[np.arange(len(x)), labels]
            far = int(np.argmin(own))
            sums[labels[far]] -= x[far]
            counts[labels[far]] -= 1
            labels[far] = g
            sums[g] = x[far]
            counts[g] = 1
        norm = np.linalg.norm(sums, axis=1, keepdims=True)
        # a cluster whose members cancel exactly keeps its previous direction
        centroids = np.where(norm > 0, sums / np.where(norm > 0, norm, 1.0), centroids)
        history.append(_objective(x, centroids, labels))
    return GroupingModel(k=k, centroids=centroids, seed=seed, n_iter=it, objective_history=tuple(history))


@dataclass(frozen=True)
class DailyGroupFeatures:
    date: np.datetime64
    weights: np.ndarray

    def named(self) -> dict[str, float]:
        return dict(zip(group_columns(len(self.weights)), self.weights.tolist()))


def daily_group_weights(docs: Sequence[DocumentEmbedding], model: GroupingModel, date=None) -> DailyGroupFeatures:
    """Mean polarity of the day's documents per assigned group; empty groups read 0."""
    if date is None:
        date = docs[0].date if docs else np.datetime64("NaT")
    sums = np.zeros(model.k)
    counts = np.zeros(model.k)
    if docs:
        vecs = _unit_rows(np.array([d.vector for d in docs]))
        labels = model.assign(vecs)
        np.add.at(sums, labels, [sentiment_polarity(d) for d in docs])
        np.add.at(counts, labels, 1.0)
    weights = np.divide(sums, counts, out=np.zeros(model.k), where=counts > 0)
    return DailyGroupFeatures(date=date, weights=weights)


def _snap_to_calendar(dates: np.ndarray, calendar: np.ndarray) -> np.ndarray:
    """Calendar row per date: same day, else the next trading day; -1 outside the span."""
    pos = np.searchsorted(calendar, dates, side="left")
    out = np.where((dates < calendar[0]) | (pos >= len(calendar)), -1, pos)
    return out


def build_group_feature_series(
    docs: Sequence[DocumentEmbedding],
    model: GroupingModel,
    calendar: np.ndarray,
) -> tuple[FeatureMatrix, int]:
    """Per-trading-day group weights plus the daily mean sentiment probabilities.

    Documents dated on a non-trading day inside the calendar span count
    toward the next trading day. Documents outside the span are dropped;
    their count is returned alongside the matrix.
    """
    calendar = np.asarray(calendar, dtype="datetime64[D]")
    k = model.k
    values = np.zeros((len(calendar), k + 3))
    if docs:
        dates = np.array([d.date for d in docs], dtype="datetime64[D]")
        rows = _snap_to_calendar(dates, calendar)
        keep = np.flatnonzero(rows >= 0)
        dropped = len(docs) - len(keep)
        by_row: dict[int, list[DocumentEmbedding]] = defaultdict(list)
        for i in keep:
            by_row[int(rows[i])].append(docs[i])
        for r in sorted(by_row):
            day = by_row[r]
            values[r, :k] = daily_group_weights(day, model, calendar[r]).weights
            values[r, k:] = np.mean([[d.p_pos, d.p_neg, d.p_neu] for d in day], axis=0)
    else:
        dropped = 0
    if dropped:
        logger.warning("dropped %d documents dated outside the calendar", dropped)
    return FeatureMatrix(calendar, group_columns(k) + SENTIMENT_COLUMNS, values), dropped


def fit_grouping_for_years(
    docs: Sequence[DocumentEmbedding], k: int, seed: int, first_year: int, last_year: int
) -> GroupingModel:
    """Fit on documents dated within ``first_year..last_year`` only."""
    years = np.array([d.date for d in docs], dtype="datetime64[Y]").astype(np.int64) + 1970
    sel = [d for d, y in zip(docs, years) if first_year <= y <= last_year]
    if not sel:
        raise ClusteringError(f"no documents dated within {first_year}-{last_year}")
    return cluster_cosine_kmeans(normalize_embeddings(sel), k, seed)
