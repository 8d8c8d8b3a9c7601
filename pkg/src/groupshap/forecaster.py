"""Training and inference for the tech-only and full fusion forecasters."""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import os
import time
import zipfile
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Mapping, Sequence

import numpy as np

from ._io import array_digest, atomic_open
from .errors import ConfigurationError, NumericalError, SchemaError, TrainingError
from .gru import FusionHead, GruNetwork, GruParams, GATE_KEYS
from .market_data import TARGET, ScalerParams, SequenceSet, invert_minmax

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class Variant(str, enum.Enum):
    TECH_ONLY = "TECH_ONLY"
    FULL = "FULL"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    steps: int = 10
    epochs: int = 50
    weight_decay: float = 0.01
    seed: int = 0
    variant: Variant = Variant.FULL
    hidden_size: int = 256
    num_layers: int = 2
    head_hidden: tuple[int, ...] = (128,)
    dropout: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "head_hidden", tuple(int(h) for h in self.head_hidden))
        for name in ("learning_rate", "batch_size", "steps", "epochs", "hidden_size", "num_layers"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.weight_decay < 0 or not (0.0 <= self.dropout < 1.0):
            raise ConfigurationError("weight_decay must be >= 0 and dropout in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["head_hidden"] = list(self.head_hidden)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamWState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamWState,
    lr: float = 1e-4,
    weight_decay: float = 0.01,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
):
    """Decoupled-decay Adam update, in place.

    ``p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)``
    """
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape:
            raise SchemaError(f"optimizer state for {name} has shape {m.shape}, parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            update += weight_decay * p
        p -= lr * update
    return params, state


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class ForecastModel:
    variant: Variant
    tech_columns: tuple[str, ...]
    text_columns: tuple[str, ...]
    network: GruNetwork
    scaler: ScalerParams | None
    config: TrainConfig
    training_log: list[tuple[int, float, float]] = field(default_factory=list, repr=False)

    def __post_init__(self):
        overlap = set(self.tech_columns) & set(self.text_columns)
        if overlap:
            raise SchemaError(f"columns listed as both technical and text-derived: {sorted(overlap)}")

    @property
    def manifest(self) -> tuple[str, ...]:
        """Input column order expected by :func:`predict`."""
        return self.tech_columns + (self.text_columns if self.variant is Variant.FULL else ())

    @property
    def steps(self) -> int:
        return self.config.steps

    def digest(self) -> str:
        params = self.network.parameters()
        return array_digest(*(params[k] for k in sorted(params)))

    def predict_scaled(self, X: np.ndarray) -> np.ndarray:
        """Head output in scaled units for ``(batch, steps, manifest)`` inputs."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[2] != len(self.manifest):
            raise SchemaError(f"expected (batch, steps, {len(self.manifest)}) inputs, got {X.shape}")
        if X.shape[1] != self.steps:
            raise SchemaError(f"expected {self.steps} steps, got {X.shape[1]}")
        n_t = len(self.tech_columns)
        x_g = X[:, :, n_t:] if self.variant is Variant.FULL else None
        pred, _ = self.network.forward(X[:, :, :n_t], x_g, training=False)
        return pred

    def predict_prices(self, X: np.ndarray) -> np.ndarray:
        scaled = self.predict_scaled(X)
        return scaled if self.scaler is None else invert_minmax(scaled, self.scaler, TARGET)

    def save(self, path: str | os.PathLike) -> None:
        meta = {
            "format_version": FORMAT_VERSION,
            "variant": self.variant.value,
            "tech_columns": list(self.tech_columns),
            "text_columns": list(self.text_columns),
            "scaler": None if self.scaler is None else self.scaler.to_dict(),
            "config": self.config.to_dict(),
            "head_layers": len(self.network.head.weights),
        }
        arrays = {"meta": np.array(json.dumps(meta, sort_keys=True))}
        arrays.update({f"p:{k}": v for k, v in self.network.parameters().items()})
        with atomic_open(path, "wb") as fh:
            fh.write(_npz_bytes(arrays))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ForecastModel":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            if meta.get("format_version") != FORMAT_VERSION:
                raise SchemaError(f"{path}: unsupported model format {meta.get('format_version')!r}")
            p = {k[2:]: z[k].copy() for k in z.files if k.startswith("p:")}
        config = TrainConfig.from_dict(meta["config"])

        def encoder(prefix):
            n = config.num_layers
            if f"{prefix}.0.W_z" not in p:
                return None
            return GruParams([{k: p[f"{prefix}.{i}.{k}"] for k in GATE_KEYS} for i in range(n)])

        n_head = meta["head_layers"]
        head = FusionHead(
            [p[f"head.{i}.W"] for i in range(n_head)],
            [p[f"head.{i}.b"] for i in range(n_head)],
            config.dropout,
        )
        scaler = None if meta["scaler"] is None else ScalerParams.from_dict(meta["scaler"])
        return cls(
            variant=Variant(meta["variant"]),
            tech_columns=tuple(meta["tech_columns"]),
            text_columns=tuple(meta["text_columns"]),
            network=GruNetwork(encoder("tech"), encoder("group"), head),
            scaler=scaler,
            config=config,
        )


def _npz_bytes(arrays: Mapping[str, np.ndarray]) -> bytes:
    """An ``.npz`` archive with fixed entry timestamps, so equal models give equal files."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asanyarray(arr), allow_pickle=False)
    return buf.getvalue()


def _split_inputs(X: np.ndarray, columns: Sequence[str], tech: Sequence[str], text: Sequence[str], variant: Variant):
    pos = {c: i for i, c in enumerate(columns)}
    missing = [c for c in (*tech, *text) if c not in pos]
    if missing:
        raise SchemaError(f"input is missing columns {missing}")
    x_t = X[:, :, [pos[c] for c in tech]]
    x_g = X[:, :, [pos[c] for c in text]] if variant is Variant.FULL else None
    return x_t, x_g


def train(
    data: SequenceSet,
    config: TrainConfig,
    tech_columns: Sequence[str],
    text_columns: Sequence[str] = (),
    scaler: ScalerParams | None = None,
) -> ForecastModel:
    """Fixed-epoch minibatch training, deterministic for a given ``config.seed``.

    The batch order is reshuffled every epoch; dropout masks come from
    their own seeded stream. ``TECH_ONLY`` never looks at ``text_columns``.
    """
    if len(data) == 0:
        raise TrainingError("no training pairs")
    if data.X.shape[1] != config.steps:
        raise SchemaError(f"sequences have {data.X.shape[1]} steps, config expects {config.steps}")
    tech_columns, text_columns = tuple(tech_columns), tuple(text_columns)
    if config.variant is Variant.FULL and not text_columns:
        raise ConfigurationError("FULL variant needs at least one text-derived column")
    x_t, x_g = _split_inputs(data.X, data.columns, tech_columns, text_columns, config.variant)
    y = np.asarray(data.y, dtype=np.float64)

    init_ss, shuffle_ss, drop_ss = np.random.SeedSequence(config.seed).spawn(3)
    net = GruNetwork.initialize(
        tech_size=len(tech_columns),
        group_size=len(text_columns) if config.variant is Variant.FULL else 0,
        hidden_size=config.hidden_size,
        num_layers=config.num_layers,
        head_hidden=config.head_hidden,
        dropout=config.dropout,
        rng=np.random.default_rng(init_ss),
    )
    shuffle_rng = np.random.default_rng(shuffle_ss)
    drop_rng = np.random.default_rng(drop_ss)
    params = net.parameters()
    state = AdamWState.zeros_like(params)
    log = []
    n = len(y)
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            try:
                loss, grads = net.loss_and_gradients(
                    x_t[idx], None if x_g is None else x_g[idx], y[idx],
                    training=True, rng=drop_rng, batch_index=b,
                )
            except NumericalError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}") from exc
            if not np.isfinite(loss):
                raise TrainingError(f"epoch {epoch}: non-finite loss in batch {b}")
            adamw_step(params, grads, state, config.learning_rate, config.weight_decay,
                       (config.beta1, config.beta2), config.eps)
            total += loss * len(idx)
        mean_loss = total / n
        log.append((epoch, mean_loss, (time.perf_counter() - t0) * 1e3))
        logger.debug("epoch %d loss %.6g", epoch, mean_loss)
    return ForecastModel(
        variant=config.variant,
        tech_columns=tech_columns,
        text_columns=text_columns,
        network=net,
        scaler=scaler,
        config=config,
        training_log=log,
    )


def predict(model: ForecastModel, seq: np.ndarray, columns: Sequence[str] | None = None) -> float:
    """Price-unit next-day close for one scaled ``(steps, features)`` sequence.

    ``columns`` names the sequence's columns; if given it may be any superset
    of the model manifest in any order, otherwise the sequence must already
    follow the manifest.
    """
    X = np.asarray(seq, dtype=np.float64)[None]
    if columns is not None:
        X = select_manifest(model, X, columns)
    return float(model.predict_prices(X)[0])


def select_manifest(model: ForecastModel, X: np.ndarray, columns: Sequence[str]) -> np.ndarray:
    pos = {c: i for i, c in enumerate(columns)}
    missing = [c for c in model.manifest if c not in pos]
    if missing:
        raise SchemaError(f"inputs lack manifest columns {missing}")
    return X[..., [pos[c] for c in model.manifest]]


def write_training_log(path: str | os.PathLike, log: Sequence[tuple[int, float, float]]) -> None:
    with atomic_open(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss", "wall_ms"])
        for epoch, loss, ms in log:
            w.writerow([epoch, repr(loss), f"{ms:.3f}"])
