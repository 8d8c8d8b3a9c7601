"""Stacked GRU encoders and a linear/ReLU fusion head, with hand-written backprop.

Arrays use a row-vector batch layout: inputs are ``(batch, steps, features)``
and weights are stored ``(out, in)`` so a layer computes ``x @ W.T + b``.
Everything is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from .errors import DimensionError, NumericalError

GATE_KEYS = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h")


def sigmoid(x):
    # tanh form is overflow-free and gives exactly 0.5 at 0
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def init_gru_layer(input_size: int, hidden_size: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Uniform(+-1/sqrt(fan_in)) init; fan_in is the input width for W, hidden width for U and b."""
    a_in = 1.0 / np.sqrt(input_size)
    a_h = 1.0 / np.sqrt(hidden_size)
    layer = {}
    for gate in "zrh":
        layer[f"W_{gate}"] = rng.uniform(-a_in, a_in, (hidden_size, input_size))
        layer[f"U_{gate}"] = rng.uniform(-a_h, a_h, (hidden_size, hidden_size))
        layer[f"b_{gate}"] = rng.uniform(-a_h, a_h, hidden_size)
    return layer


def zero_gru_layer(input_size: int, hidden_size: int) -> dict[str, np.ndarray]:
    layer = {}
    for gate in "zrh":
        layer[f"W_{gate}"] = np.zeros((hidden_size, input_size))
        layer[f"U_{gate}"] = np.zeros((hidden_size, hidden_size))
        layer[f"b_{gate}"] = np.zeros(hidden_size)
    return layer


def gru_cell_forward(x: np.ndarray, h: np.ndarray, params: Mapping[str, np.ndarray]) -> np.ndarray:
    """One GRU step.

    z = sigma(W_z x + U_z h + b_z), r = sigma(W_r x + U_r h + b_r),
    h~ = tanh(W_h x + U_h (r * h) + b_h), h' = (1 - z) * h + z * h~.
    Works on single vectors or on ``(batch, size)`` rows.
    """
    hidden, n_in = params["W_z"].shape
    if np.shape(x)[-1] != n_in or np.shape(h)[-1] != hidden:
        raise DimensionError(
            f"GRU cell expects input {n_in} and hidden {hidden}, got {np.shape(x)[-1]} and {np.shape(h)[-1]}"
        )
    z = sigmoid(x @ params["W_z"].T + h @ params["U_z"].T + params["b_z"])
    r = sigmoid(x @ params["W_r"].T + h @ params["U_r"].T + params["b_r"])
    h_cand = np.tanh(x @ params["W_h"].T + (r * h) @ params["U_h"].T + params["b_h"])
    return (1.0 - z) * h + z * h_cand


@dataclass
class GruParams:
    """A stack of GRU layers; layer 0 reads the raw features."""

    layers: list[dict[str, np.ndarray]]

    @classmethod
    def initialize(cls, input_size: int, hidden_size: int, num_layers: int, rng: np.random.Generator) -> "GruParams":
        sizes = [input_size] + [hidden_size] * (num_layers - 1)
        return cls([init_gru_layer(n, hidden_size, rng) for n in sizes])

    @classmethod
    def zeros(cls, input_size: int, hidden_size: int, num_layers: int) -> "GruParams":
        sizes = [input_size] + [hidden_size] * (num_layers - 1)
        return cls([zero_gru_layer(n, hidden_size) for n in sizes])

    @property
    def input_size(self) -> int:
        return self.layers[0]["W_z"].shape[1]

    @property
    def hidden_size(self) -> int:
        return self.layers[0]["W_z"].shape[0]

    def named(self, prefix: str) -> Iterator[tuple[str, np.ndarray]]:
        for i, layer in enumerate(self.layers):
            for k in GATE_KEYS:
                yield f"{prefix}.{i}.{k}", layer[k]


def _layer_forward(X: np.ndarray, p: Mapping[str, np.ndarray]):
    B, T, _ = X.shape
    H = p["W_z"].shape[0]
    # input projections for every step at once; z and r share one recurrent matmul
    xz = X @ p["W_z"].T + p["b_z"]
    xr = X @ p["W_r"].T + p["b_r"]
    xh = X @ p["W_h"].T + p["b_h"]
    U_zr = np.concatenate([p["U_z"], p["U_r"]]).T
    h = np.zeros((B, H))
    hs = np.empty((B, T + 1, H))
    hs[:, 0] = h
    Z = np.empty((B, T, H))
    R = np.empty((B, T, H))
    HC = np.empty((B, T, H))
    for t in range(T):
        zr = h @ U_zr
        z = sigmoid(xz[:, t] + zr[:, :H])
        r = sigmoid(xr[:, t] + zr[:, H:])
        hc = np.tanh(xh[:, t] + (r * h) @ p["U_h"].T)
        h = (1.0 - z) * h + z * hc
        Z[:, t], R[:, t], HC[:, t] = z, r, hc
        hs[:, t + 1] = h
    return hs[:, 1:], (X, hs, Z, R, HC)


def _layer_backward(dOut: np.ndarray, p: Mapping[str, np.ndarray], layer_cache):
    X, hs, Z, R, HC = layer_cache
    B, T, D = X.shape
    H = p["W_z"].shape[0]
    H_prev = hs[:, :-1]
    dA_z = np.empty((B, T, H))
    dA_r = np.empty((B, T, H))
    dA_h = np.empty((B, T, H))
    U_zr = np.concatenate([p["U_z"], p["U_r"]])
    U_h = p["U_h"]
    dh_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        h_prev, z, r, hc = H_prev[:, t], Z[:, t], R[:, t], HC[:, t]
        dh = dOut[:, t] + dh_next
        da_h = dh * z * (1.0 - hc * hc)
        drh = da_h @ U_h
        da_z = dh * (hc - h_prev) * z * (1.0 - z)
        da_r = drh * h_prev * r * (1.0 - r)
        dA_z[:, t], dA_r[:, t], dA_h[:, t] = da_z, da_r, da_h
        dh_next = dh * (1.0 - z) + drh * r + np.concatenate([da_z, da_r], axis=1) @ U_zr
    # parameter gradients summed over batch and time in single matmuls
    x2 = X.reshape(B * T, D)
    hp2 = H_prev.reshape(B * T, H)
    rh2 = (R * H_prev).reshape(B * T, H)
    az, ar, ah = (a.reshape(B * T, H) for a in (dA_z, dA_r, dA_h))
    g = {
        "W_z": az.T @ x2, "U_z": az.T @ hp2, "b_z": az.sum(axis=0),
        "W_r": ar.T @ x2, "U_r": ar.T @ hp2, "b_r": ar.sum(axis=0),
        "W_h": ah.T @ x2, "U_h": ah.T @ rh2, "b_h": ah.sum(axis=0),
    }
    dX = (az @ p["W_z"] + ar @ p["W_r"] + ah @ p["W_h"]).reshape(B, T, D)
    return g, dX


def _as_batch(seq: np.ndarray) -> tuple[np.ndarray, bool]:
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim == 2:
        return seq[None], True
    if seq.ndim != 3:
        raise DimensionError(f"expected (steps, features) or (batch, steps, features), got shape {seq.shape}")
    return seq, False


def encode_sequence(seq: np.ndarray, encoder: GruParams, steps: int | None = None) -> np.ndarray:
    """Final top-layer hidden state from a zero initial state."""
    X, single = _as_batch(seq)
    if steps is not None and X.shape[1] != steps:
        raise DimensionError(f"sequence has {X.shape[1]} rows, expected {steps}")
    if X.shape[2] != encoder.input_size:
        raise DimensionError(f"sequence has {X.shape[2]} features, encoder expects {encoder.input_size}")
    for layer in encoder.layers:
        X, _ = _layer_forward(X, layer)
    h = X[:, -1]
    return h[0] if single else h


def _encoder_forward(X: np.ndarray, encoder: GruParams):
    caches = []
    for layer in encoder.layers:
        X, c = _layer_forward(X, layer)
        caches.append(c)
    return X[:, -1], caches


def _encoder_backward(dh_last: np.ndarray, encoder: GruParams, caches, prefix: str, grads: dict) -> None:
    B, T = caches[-1][0].shape[:2]
    dOut = np.zeros((B, T, encoder.hidden_size))
    dOut[:, -1] = dh_last
    for i in range(len(encoder.layers) - 1, -1, -1):
        g, dOut = _layer_backward(dOut, encoder.layers[i], caches[i])
        for k, v in g.items():
            grads[f"{prefix}.{i}.{k}"] = v


@dataclass
class FusionHead:
    """Linear layers with ReLU (and training-time dropout) between them; last layer has one output."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dropout: float = 0.1

    def __post_init__(self):
        if self.weights[-1].shape[0] != 1:
            raise DimensionError("fusion head must end in a single output")

    @classmethod
    def initialize(cls, input_size: int, hidden: tuple[int, ...], rng: np.random.Generator, dropout: float = 0.1) -> "FusionHead":
        sizes = [input_size, *hidden, 1]
        ws, bs = [], []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            a = 1.0 / np.sqrt(n_in)
            ws.append(rng.uniform(-a, a, (n_out, n_in)))
            bs.append(rng.uniform(-a, a, n_out))
        return cls(ws, bs, dropout)

    @property
    def input_size(self) -> int:
        return self.weights[0].shape[1]

    def named(self, prefix: str = "head") -> Iterator[tuple[str, np.ndarray]]:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}.{i}.W", w
            yield f"{prefix}.{i}.b", b


def _head_forward(a: np.ndarray, head: FusionHead, training: bool, rng: np.random.Generator | None):
    cache = []
    n = len(head.weights)
    for i, (w, b) in enumerate(zip(head.weights, head.biases)):
        inp = a
        a = inp @ w.T + b
        mask = None
        if i < n - 1:
            a = np.maximum(a, 0.0)
            if training and head.dropout > 0:
                if rng is None:
                    raise ValueError("training-mode dropout needs a random generator")
                mask = (rng.random(a.shape) >= head.dropout) / (1.0 - head.dropout)
                a = a * mask
        cache.append((inp, a, mask))
    return a[:, 0], cache


def fusion_forward(
    h_tech: np.ndarray,
    h_group: np.ndarray | None,
    head: FusionHead,
    training: bool = False,
    rng: np.random.Generator | None = None,
):
    """Concatenate the encoder states and run the head. Returns a scalar per row."""
    single = np.ndim(h_tech) == 1
    parts = [np.atleast_2d(h_tech)] + ([] if h_group is None else [np.atleast_2d(h_group)])
    a = np.concatenate(parts, axis=1)
    if a.shape[1] != head.input_size:
        raise DimensionError(f"fusion head expects {head.input_size} inputs, got {a.shape[1]}")
    out, _ = _head_forward(a, head, training, rng)
    return float(out[0]) if single else out


@dataclass
class GruNetwork:
    """Tech encoder, optional text encoder, and fusion head."""

    tech: GruParams
    group: GruParams | None
    head: FusionHead

    @classmethod
    def initialize(
        cls,
        tech_size: int,
        group_size: int,
        hidden_size: int,
        num_layers: int,
        head_hidden: tuple[int, ...],
        dropout: float,
        rng: np.random.Generator,
    ) -> "GruNetwork":
        tech = GruParams.initialize(tech_size, hidden_size, num_layers, rng)
        group = GruParams.initialize(group_size, hidden_size, num_layers, rng) if group_size else None
        fused = hidden_size * (2 if group is not None else 1)
        return cls(tech, group, FusionHead.initialize(fused, tuple(head_hidden), rng, dropout))

    def parameters(self) -> dict[str, np.ndarray]:
        """Name -> array views of every trainable tensor (shared, not copied)."""
        out = dict(self.tech.named("tech"))
        if self.group is not None:
            out.update(self.group.named("group"))
        out.update(self.head.named("head"))
        return out

    def forward(self, x_tech, x_group=None, training: bool = False, rng=None):
        h_t, c_t = _encoder_forward(x_tech, self.tech)
        if self.group is not None:
            if x_group is None:
                raise DimensionError("network has a text encoder but no text inputs were given")
            h_g, c_g = _encoder_forward(x_group, self.group)
            a = np.concatenate([h_t, h_g], axis=1)
        else:
            c_g = None
            a = h_t
        pred, c_h = _head_forward(a, self.head, training, rng)
        return pred, (c_t, c_g, c_h)

    def backward(self, cache, dpred: np.ndarray) -> dict[str, np.ndarray]:
        c_t, c_g, c_h = cache
        grads: dict[str, np.ndarray] = {}
        da = dpred[:, None]
        for i in range(len(self.head.weights) - 1, -1, -1):
            inp, out, mask = c_h[i]
            if i < len(self.head.weights) - 1:
                if mask is not None:
                    da = da * mask
                da = da * (out > 0)
            grads[f"head.{i}.W"] = da.T @ inp
            grads[f"head.{i}.b"] = da.sum(axis=0)
            da = da @ self.head.weights[i]
        H = self.tech.hidden_size
        _encoder_backward(da[:, :H], self.tech, c_t, "tech", grads)
        if self.group is not None:
            _encoder_backward(da[:, H:], self.group, c_g, "group", grads)
        return grads

    def loss_and_gradients(self, x_tech, x_group, y, training: bool = False, rng=None, batch_index: int = 0):
        """Mean squared error over the batch and its gradient for every parameter."""
        y = np.asarray(y, dtype=np.float64)
        if len(y) == 0:
            raise ValueError("empty batch")
        pred, cache = self.forward(x_tech, x_group, training, rng)
        if not np.all(np.isfinite(pred)):
            raise NumericalError(f"non-finite activation in batch {batch_index}")
        err = pred - y
        loss = float(np.mean(err * err))
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite loss in batch {batch_index}")
        grads = self.backward(cache, 2.0 * err / len(y))
        return loss, grads
