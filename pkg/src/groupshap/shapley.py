"""Exact group Shapley values and a permutation-sampling baseline.

Players are sets of input cells of a ``(steps, features)`` instance. A
coalition keeps its players' cells and replaces every other player's cells
with baseline values; cells that belong to no player are never touched.
"""

from __future__ import annotations

import enum
import hashlib
import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import DomainError, EnumerationLimitError, SchemaError

EXACT_LIMIT = 20
INT64_MAX = 2 ** 63 - 1

ValueBatch = Callable[[np.ndarray], np.ndarray]


def shapley_weight(s: int, n: int) -> float:
    """``s! (n - s - 1)! / n!`` for a coalition of size ``s`` among ``n`` players."""
    if n < 1 or not 0 <= s <= n - 1:
        raise DomainError(f"coalition size {s} is outside 0..{n - 1}")
    if n <= EXACT_LIMIT:
        return math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n)
    return math.exp(math.lgamma(s + 1) + math.lgamma(n - s) - math.lgamma(n + 1))


def count_coalitions(k: int) -> int:
    """Number of non-empty coalitions of ``k`` players, ``2**k - 1`` (exact integer)."""
    if k < 1:
        raise DomainError(f"player count must be >= 1, got {k}")
    return (1 << k) - 1


def coalition_count_record(k: int) -> dict:
    """``count_coalitions`` for reports: an int64-saturated value plus the exact decimal text."""
    exact = count_coalitions(k)
    return {"units": k, "value": min(exact, INT64_MAX), "saturated": exact > INT64_MAX, "exact": str(exact)}


class Mode(str, enum.Enum):
    PREDICTION = "PREDICTION"
    ERROR_REDUCTION = "ERROR_REDUCTION"


@dataclass(frozen=True)
class FeatureGroups:
    """Named, pairwise disjoint column sets."""

    names: tuple[str, ...]
    members: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "members", tuple(tuple(m) for m in self.members))
        if not self.names:
            raise SchemaError("need at least one group")
        if len(self.names) != len(self.members):
            raise SchemaError("one member list per group name")
        seen: dict[str, str] = {}
        for name, cols in zip(self.names, self.members):
            for c in cols:
                if c in seen:
                    raise SchemaError(f"column {c!r} is in both {seen[c]!r} and {name!r}")
                seen[c] = name

    @classmethod
    def from_mapping(cls, groups: Mapping[str, Sequence[str]]) -> "FeatureGroups":
        return cls(tuple(groups), tuple(tuple(v) for v in groups.values()))

    @classmethod
    def singletons(cls, columns: Sequence[str]) -> "FeatureGroups":
        return cls(tuple(columns), tuple((c,) for c in columns))

    def __len__(self) -> int:
        return len(self.names)

    def masks(self, manifest: Sequence[str], steps: int) -> np.ndarray:
        """``(n_groups, steps, features)`` boolean cell masks."""
        pos = {c: i for i, c in enumerate(manifest)}
        out = np.zeros((len(self), steps, len(manifest)), dtype=bool)
        for g, cols in enumerate(self.members):
            for c in cols:
                if c not in pos:
                    raise SchemaError(f"group column {c!r} is not a model input")
                out[g, :, pos[c]] = True
        return out


@dataclass(frozen=True)
class Players:
    """Explicit cell masks, e.g. one player per (time step, column) token."""

    names: tuple[str, ...]
    masks: np.ndarray

    def __len__(self) -> int:
        return len(self.names)


def token_units(manifest: Sequence[str], steps: int, per_step: bool = True) -> Players:
    """Token-level players: every (lag, column) cell, or every column when ``per_step`` is false."""
    F = len(manifest)
    if not per_step:
        masks = FeatureGroups.singletons(manifest).masks(manifest, steps)
        return Players(tuple(manifest), masks)
    names, masks = [], np.zeros((steps * F, steps, F), dtype=bool)
    for t in range(steps):
        for j, c in enumerate(manifest):
            names.append(f"{c}@t-{steps - 1 - t}")
            masks[t * F + j, t, j] = True
    return Players(tuple(names), masks)


def _players(units, manifest: Sequence[str], steps: int) -> Players:
    if isinstance(units, Players):
        return units
    return Players(units.names, units.masks(manifest, steps))


@dataclass(frozen=True)
class ValueFunctionSpec:
    """What ``v(S)`` means for one explained instance.

    ``baseline`` holds one replacement value per manifest column (scaled
    units). ``actual`` is the realised price, needed only for
    ``ERROR_REDUCTION``.
    """

    baseline: np.ndarray
    instance: np.ndarray
    mode: Mode = Mode.PREDICTION
    actual: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "baseline", np.asarray(self.baseline, dtype=np.float64))
        object.__setattr__(self, "instance", np.asarray(self.instance, dtype=np.float64))
        if self.instance.ndim != 2 or self.baseline.shape != (self.instance.shape[1],):
            raise SchemaError("baseline must hold one value per instance column")
        if self.mode is Mode.ERROR_REDUCTION and self.actual is None:
            raise SchemaError("ERROR_REDUCTION needs the actual value")

    def baseline_hash(self) -> str:
        return hashlib.sha256(self.baseline.tobytes()).hexdigest()[:16]


def training_baseline(train_X: np.ndarray) -> np.ndarray:
    """Per-column mean over every training sequence and step (scaled units)."""
    return np.asarray(train_X, dtype=np.float64).mean(axis=(0, 1))


class CoalitionGame:
    """Masked-model value function with an evaluation counter.

    ``model`` needs ``predict_prices((batch, steps, features)) -> (batch,)``
    and a ``manifest``.
    """

    def __init__(self, model, spec: ValueFunctionSpec, players, chunk: int = 4096):
        self.model = model
        self.spec = spec
        steps = spec.instance.shape[0]
        self.players = _players(players, model.manifest, steps)
        if spec.instance.shape[1] != len(model.manifest):
            raise SchemaError("instance columns do not match the model manifest")
        self.chunk = chunk
        self.evaluations = 0
        self._any = self.players.masks.any(axis=0)

    @property
    def n(self) -> int:
        return len(self.players)

    def masked_instances(self, coalitions: np.ndarray) -> np.ndarray:
        """Inputs with every inactive player's cells set to the baseline."""
        coalitions = np.atleast_2d(np.asarray(coalitions, dtype=bool))
        # kept[c] = cells owned by an active player or by no player at all
        m = self.players.masks
        active = (coalitions.astype(np.float64) @ m.reshape(len(m), -1).astype(np.float64)).reshape(-1, *m.shape[1:]) > 0
        keep = active | ~self._any
        return np.where(keep, self.spec.instance[None], self.spec.baseline[None, None, :])

    def __call__(self, coalitions: np.ndarray) -> np.ndarray:
        coalitions = np.atleast_2d(np.asarray(coalitions, dtype=bool))
        out = np.empty(len(coalitions))
        for start in range(0, len(coalitions), self.chunk):
            c = coalitions[start:start + self.chunk]
            out[start:start + len(c)] = self.model.predict_prices(self.masked_instances(c))
        self.evaluations += len(coalitions)
        if self.spec.mode is Mode.ERROR_REDUCTION:
            out = -np.abs(out - self.spec.actual)
        return out


def masked_value(spec: ValueFunctionSpec, coalition, model, groups) -> float:
    """``v(S)`` for one coalition, given as a boolean vector or a set of player indices."""
    game = CoalitionGame(model, spec, groups)
    c = np.asarray(coalition)
    if c.dtype != bool:
        mask = np.zeros(game.n, dtype=bool)
        mask[list(coalition)] = True
        c = mask
    return float(game(c[None])[0])


@dataclass
class Attribution:
    names: tuple[str, ...]
    phi: np.ndarray
    v_empty: float
    v_full: float
    evaluations: int
    wall_ms: float
    method: str
    std_err: np.ndarray | None = None
    seed: int | None = None
    efficiency_residual: float = field(init=False)

    def __post_init__(self):
        self.efficiency_residual = float(abs(np.sum(self.phi) - (self.v_full - self.v_empty)))

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {
            "method": self.method,
            "phi": {n: float(p) for n, p in zip(self.names, self.phi)},
            "v_empty": float(self.v_empty),
            "v_full": float(self.v_full),
            "efficiency_residual": self.efficiency_residual,
            "evaluations": int(self.evaluations),
        }
        if self.std_err is not None:
            d["std_err"] = {n: float(s) for n, s in zip(self.names, self.std_err)}
        if self.seed is not None:
            d["seed"] = self.seed
        if include_timing:
            d["wall_ms"] = self.wall_ms
        return d


def all_coalitions(n: int) -> np.ndarray:
    """Boolean ``(2**n, n)`` matrix; row ``m`` is the bitmask ``m``."""
    masks = np.arange(1 << n, dtype=np.int64)
    return ((masks[:, None] >> np.arange(n)) & 1).astype(bool)


def combine_exact(values: np.ndarray, n: int) -> np.ndarray:
    """Shapley values from the full table ``values[mask]`` of all ``2**n`` coalitions."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (1 << n,):
        raise SchemaError(f"need {1 << n} coalition values, got {values.shape}")
    masks = np.arange(1 << n, dtype=np.int64)
    sizes = _popcount(masks)
    weights = np.array([shapley_weight(s, n) for s in range(n)])
    phi = np.empty(n)
    for g in range(n):
        bit = 1 << g
        without = masks[(masks & bit) == 0]
        phi[g] = np.sum(weights[sizes[without]] * (values[without | bit] - values[without]))
    return phi


def _popcount(a: np.ndarray) -> np.ndarray:
    c = np.zeros_like(a)
    a = a.copy()
    while a.any():
        c += a & 1
        a >>= 1
    return c


def exact_shapley(value: ValueBatch, n: int, names: Sequence[str] | None = None) -> Attribution:
    """Evaluate ``value`` once on every coalition and combine with the Shapley weights.

    ``value`` maps a boolean ``(m, n)`` coalition matrix to ``m`` values.
    """
    if n > EXACT_LIMIT:
        raise EnumerationLimitError(
            f"{n} players would need 2^{n} evaluations (limit 2^{EXACT_LIMIT}); use sampled_shap instead"
        )
    if n < 1:
        raise DomainError("need at least one player")
    t0 = time.perf_counter()
    table = np.asarray(value(all_coalitions(n)), dtype=np.float64)
    phi = combine_exact(table, n)
    return Attribution(
        names=tuple(names) if names is not None else tuple(str(i) for i in range(n)),
        phi=phi,
        v_empty=float(table[0]),
        v_full=float(table[-1]),
        evaluations=len(table),
        wall_ms=(time.perf_counter() - t0) * 1e3,
        method="exact",
    )


def exact_group_shap(spec: ValueFunctionSpec, groups, model) -> Attribution:
    game = CoalitionGame(model, spec, groups)
    attr = exact_shapley(game, game.n, game.players.names)
    attr.evaluations = game.evaluations
    return attr


def sampled_shap(
    value: ValueBatch,
    n: int,
    budget: int,
    seed: int = 0,
    names: Sequence[str] | None = None,
    exhaustive: bool = False,
) -> Attribution:
    """Monte-Carlo permutation estimate of the Shapley values.

    Each of ``budget`` random orderings contributes one marginal
    contribution per player, so ``budget * n + 2`` coalitions are evaluated
    (the extra two are the empty and grand coalitions). ``exhaustive``
    walks all ``n!`` orderings instead, which reproduces the exact values.
    """
    if budget < 1 and not exhaustive:
        raise DomainError("budget must be >= 1")
    t0 = time.perf_counter()
    empty = np.zeros((1, n), dtype=bool)
    ends = np.asarray(value(np.vstack([empty, ~empty])), dtype=np.float64)
    v_empty, v_full = float(ends[0]), float(ends[1])
    if exhaustive:
        orders = itertools.permutations(range(n))
        budget = math.factorial(n)
    else:
        rng = np.random.default_rng(seed)
        orders = (rng.permutation(n) for _ in range(budget))
    marg = np.empty((budget, n))
    tri = np.tril(np.ones((n, n), dtype=bool))
    for k, order in enumerate(orders):
        order = np.asarray(order)
        prefixes = np.zeros((n, n), dtype=bool)
        prefixes[:, order] = tri
        v = np.asarray(value(prefixes), dtype=np.float64)
        marg[k, order] = np.diff(np.concatenate([[v_empty], v]))
    phi = marg.mean(axis=0)
    std_err = marg.std(axis=0, ddof=1) / np.sqrt(budget) if budget > 1 else np.full(n, np.nan)
    return Attribution(
        names=tuple(names) if names is not None else tuple(str(i) for i in range(n)),
        phi=phi,
        v_empty=v_empty,
        v_full=v_full,
        evaluations=budget * n + 2,
        wall_ms=(time.perf_counter() - t0) * 1e3,
        method="permutation" if not exhaustive else "permutation-exhaustive",
        std_err=std_err,
        seed=None if exhaustive else seed,
    )


def sampled_group_shap(spec: ValueFunctionSpec, units, model, budget: int, seed: int = 0) -> Attribution:
    game = CoalitionGame(model, spec, units)
    attr = sampled_shap(game, game.n, budget, seed, game.players.names)
    attr.evaluations = game.evaluations
    return attr


def aggregate_abs(attributions: Sequence[Attribution]) -> dict[str, float]:
    """Mean ``|phi|`` per player across attributions (e.g. over a test year)."""
    if not attributions:
        return {}
    names = attributions[0].names
    mat = np.abs(np.array([a.phi for a in attributions]))
    return {n: float(v) for n, v in zip(names, mat.mean(axis=0))}
