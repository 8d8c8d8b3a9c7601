"""Command-line entry point: ``groupshap <command> [--config run.json] [options]``.

Every command reads one JSON run configuration (flags win over the file),
derives its random streams from the root seed, and writes its artifacts
atomically under the output directory. Exit codes: 0 success, 1 usage or
configuration error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from ._io import atomic_open, stage_seed, write_json
from .errors import ConfigurationError, EnumerationLimitError, GroupShapError, SchemaError
from .evaluation import (
    BacktestInputs,
    PreparedWindow,
    bench_attribution,
    bench_rows,
    metric_rows,
    plot_rows,
    predict_test,
    prepare_window,
    rolling_backtest,
    semantic_groups,
    sensitivity_rows,
    sensitivity_sweep,
    train_variant,
    write_rows,
)
from .forecaster import ForecastModel, TrainConfig, Variant, write_training_log
from .grouping import SENTIMENT_COLUMNS, build_group_feature_series, fit_grouping_for_years, load_embeddings, normalize_embeddings
from .market_data import (
    AlignedDataset,
    FeatureMatrix,
    Window,
    build_market_features,
    load_calendar_csv,
    load_price_csv,
    load_series_csv,
    plan_for_dates,
)
from .shapley import (
    CoalitionGame,
    FeatureGroups,
    Mode,
    ValueFunctionSpec,
    aggregate_abs,
    coalition_count_record,
    exact_shapley,
    sampled_shap,
    token_units,
    training_baseline,
)
from .synth import SynthSpec, generate, write_corpus

logger = logging.getLogger("groupshap")

INPUT_PATHS = ("price_csv", "macro_csv", "calendar_csv", "embeddings")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _strict(cls, section: str, d) -> dict:
    if not isinstance(d, dict):
        raise ConfigurationError(f"config section {section!r} must be an object")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigurationError(f"unknown keys in {section!r}: {sorted(unknown)}")
    return d


@dataclass(frozen=True)
class Paths:
    price_csv: str | None = None
    macro_csv: str | None = None
    calendar_csv: str | None = None
    embeddings: str | None = None
    out_dir: str = "out"


@dataclass(frozen=True)
class ShapleyOptions:
    mode: str = "PREDICTION"
    baseline: str = "train_mean"
    budget: int = 10
    groups: str = "semantic"
    method: str = "exact"
    max_instances: int | None = None
    bench_instances: int = 3

    def __post_init__(self):
        Mode(self.mode)
        if self.baseline not in ("train_mean", "zero"):
            raise ConfigurationError("shapley.baseline must be 'train_mean' or 'zero'")
        if self.groups not in ("semantic", "text", "all"):
            raise ConfigurationError("shapley.groups must be 'semantic', 'text' or 'all'")
        if self.method not in ("exact", "sampled"):
            raise ConfigurationError("shapley.method must be 'exact' or 'sampled'")
        if self.budget < 1 or self.bench_instances < 1:
            raise ConfigurationError("shapley.budget and shapley.bench_instances must be >= 1")


@dataclass(frozen=True)
class SweepOptions:
    n_min: int = 1
    n_max: int = 9

    def __post_init__(self):
        if not 1 <= self.n_min <= self.n_max:
            raise ConfigurationError("sensitivity range must satisfy 1 <= n_min <= n_max")


@dataclass(frozen=True)
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    seed: int = 0
    n_groups: int = 5
    test_year: int | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    shapley: ShapleyOptions = field(default_factory=ShapleyOptions)
    sensitivity: SweepOptions = field(default_factory=SweepOptions)
    synth: dict = field(default_factory=dict)
    base_dir: str = field(default=".", compare=False)

    @classmethod
    def from_dict(cls, d: dict, base_dir: str = ".") -> "RunConfig":
        d = dict(_strict(cls, "config", d))
        d.pop("base_dir", None)
        train = dict(_strict(TrainConfig, "train", d.pop("train", {})))
        for key in ("seed", "variant"):
            if key in train:
                raise ConfigurationError(f"train.{key} is not configurable; use the top-level seed or --variant")
        SynthSpec.from_dict(d.get("synth", {}))  # validate early
        cfg = cls(
            paths=Paths(**_strict(Paths, "paths", d.pop("paths", {}))),
            train=TrainConfig.from_dict(train),
            shapley=ShapleyOptions(**_strict(ShapleyOptions, "shapley", d.pop("shapley", {}))),
            sensitivity=SweepOptions(**_strict(SweepOptions, "sensitivity", d.pop("sensitivity", {}))),
            base_dir=base_dir,
            **d,
        )
        if cfg.n_groups < 1:
            raise ConfigurationError("n_groups must be >= 1")
        return cfg

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        train.pop("seed")
        train.pop("variant")
        return {
            "paths": asdict(self.paths),
            "seed": self.seed,
            "n_groups": self.n_groups,
            "test_year": self.test_year,
            "train": train,
            "shapley": asdict(self.shapley),
            "sensitivity": asdict(self.sensitivity),
            "synth": dict(self.synth),
        }

    def path(self, name: str) -> Path | None:
        raw = getattr(self.paths, name)
        if raw is None:
            return None
        p = Path(raw)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def out(self) -> Path:
        return self.path("out_dir")

    def echo(self, command: str) -> str:
        """One-line provenance for report headers."""
        return json.dumps({"command": command, "version": __version__, "config": self.to_dict()},
                          sort_keys=True, separators=(",", ":"))


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigurationError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
    return RunConfig.from_dict(raw, base_dir=str(p.parent))


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        # a flag path is relative to the working directory, not to the config file
        cfg = replace(cfg, paths=replace(cfg.paths, out_dir=str(Path(args.out).resolve())))
    if getattr(args, "test_year", None) is not None:
        cfg = replace(cfg, test_year=args.test_year)
    if getattr(args, "n_groups", None) is not None:
        cfg = replace(cfg, n_groups=args.n_groups)
    if getattr(args, "epochs", None) is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
    return cfg


def check_inputs(cfg: RunConfig, required: Sequence[str]) -> None:
    for name in required:
        if getattr(cfg.paths, name) is None:
            raise ConfigurationError(f"paths.{name} is required for this command")
    for name in INPUT_PATHS:
        p = cfg.path(name)
        if p is not None and not p.exists():
            raise ConfigurationError(f"paths.{name}: {p} does not exist")


# ---------------------------------------------------------------------------
# Shared pipeline pieces
# ---------------------------------------------------------------------------


def load_inputs(cfg: RunConfig, with_documents: bool = True) -> BacktestInputs:
    check_inputs(cfg, ("price_csv", "embeddings") if with_documents else ("price_csv",))
    target = load_price_csv(cfg.path("price_csv"))
    macro = load_series_csv(cfg.path("macro_csv")) if cfg.paths.macro_csv else []
    calendar = load_calendar_csv(cfg.path("calendar_csv")) if cfg.paths.calendar_csv else None
    market, close = build_market_features(target, macro, calendar)
    docs = normalize_embeddings(load_embeddings(cfg.path("embeddings"))) if with_documents else []
    return BacktestInputs(market, close, docs)


def window_tag(w: Window) -> str:
    return f"{w.train_start}-{w.train_end}_{w.test_year}"


def parse_window_id(text: str) -> Window:
    try:
        train, test = text.split(">")
        a, b = train.split("-")
        return Window(int(a), int(b), int(test))
    except ValueError:
        raise SchemaError(f"unrecognised window id {text!r}") from None


def select_window(cfg: RunConfig, inputs: BacktestInputs) -> Window:
    plan = plan_for_dates(inputs.market.dates)
    return plan[0] if cfg.test_year is None else plan.for_test_year(cfg.test_year)


def write_matrix(path: Path, fm: FeatureMatrix, provenance: str) -> None:
    with atomic_open(path) as fh:
        fh.write(f"# {provenance}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", *fm.columns])
        for d, row in zip(fm.dates, fm.values):
            w.writerow([str(d), *(repr(float(v)) for v in row)])


def model_path(cfg: RunConfig, window: Window, variant: Variant) -> Path:
    return cfg.out / "models" / f"model_{window_tag(window)}_{variant.value}.npz"


def obtain_model(cfg: RunConfig, prepared: PreparedWindow, variant: Variant, given: str | None) -> ForecastModel:
    """Load ``given`` (or the window's saved model); train and save one when none exists."""
    path = Path(given) if given else model_path(cfg, prepared.window, variant)
    if path.exists():
        model = ForecastModel.load(path)
        if model.scaler is None or model.scaler.digest() != prepared.scaler.digest():
            raise SchemaError(f"{path} was trained on different data or a different window")
        return model
    if given:
        raise ConfigurationError(f"model file {given} does not exist")
    model = train_variant(prepared, cfg.train, variant, cfg.seed)
    model.save(path)
    return model


def attribution_groups(model: ForecastModel, how: str) -> FeatureGroups:
    sem = semantic_groups(model)
    if how == "semantic":
        return sem
    names, members = list(sem.names), [list(m) for m in sem.members]
    senti = [c for c in SENTIMENT_COLUMNS if c in model.text_columns]
    if senti:
        names.append("sentiment")
        members.append(senti)
    if how == "all":
        names += list(model.tech_columns)
        members += [[c] for c in model.tech_columns]
    return FeatureGroups(tuple(names), tuple(tuple(m) for m in members))


def explain_baseline(cfg: RunConfig, prepared: PreparedWindow, model: ForecastModel) -> np.ndarray:
    train = prepared.sequences.train
    pos = {c: i for i, c in enumerate(train.columns)}
    X = train.X[:, :, [pos[c] for c in model.manifest]]
    if cfg.shapley.baseline == "zero":
        return np.zeros(len(model.manifest))
    return training_baseline(X)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, args) -> None:
    raw = dict(cfg.synth)
    raw.setdefault("seed", stage_seed(cfg.seed, "synth"))
    spec = SynthSpec.from_dict(raw)
    out = cfg.out
    data = generate(spec)
    paths = write_corpus(data, out)
    run = cfg.to_dict()
    run["paths"] = {
        "price_csv": Path(paths["price_csv"]).name,
        "macro_csv": Path(paths["macro_csv"]).name if spec.n_features else None,
        "calendar_csv": None,
        "embeddings": Path(paths["embeddings"]).name,
        "out_dir": "run",
    }
    run["synth"] = asdict(spec)
    write_json(out / "config.json", run)
    logger.info("synthetic corpus with %d documents written to %s", len(data.documents), out)


def cmd_ingest(cfg: RunConfig, args) -> None:
    inputs = load_inputs(cfg, with_documents=False)
    ds = AlignedDataset(inputs.market, inputs.close)
    echo = cfg.echo("ingest")
    ds.to_csv(cfg.out / "dataset.csv", header_comment=echo)
    plan = plan_for_dates(inputs.market.dates)
    write_rows(cfg.out / "windows.csv",
               [{"window": w.id, "train_start": w.train_start, "train_end": w.train_end, "test_year": w.test_year}
                for w in plan], provenance=echo)
    logger.info("%d rows x %d columns, %d windows", len(ds.dates), len(inputs.market.columns), len(plan))


def cmd_group(cfg: RunConfig, args) -> None:
    inputs = load_inputs(cfg)
    w = select_window(cfg, inputs)
    model = fit_grouping_for_years(inputs.documents, cfg.n_groups, stage_seed(cfg.seed, "grouping"),
                                   w.train_start, w.train_end)
    feats, dropped = build_group_feature_series(inputs.documents, model, inputs.market.dates)
    tag = window_tag(w)
    model.save(cfg.out / "grouping" / f"grouping_{tag}.json")
    write_matrix(cfg.out / "grouping" / f"group_features_{tag}.csv", feats, cfg.echo("group"))
    logger.info("window %s: %d groups, %d documents outside the calendar", w.id, cfg.n_groups, dropped)


def _variants(args) -> list[Variant]:
    return [Variant(args.variant)] if getattr(args, "variant", None) else [Variant.TECH_ONLY, Variant.FULL]


def cmd_train(cfg: RunConfig, args) -> None:
    inputs = load_inputs(cfg)
    w = select_window(cfg, inputs)
    prepared = prepare_window(inputs, w, cfg.n_groups, cfg.seed, cfg.train.steps)
    for v in _variants(args):
        model = train_variant(prepared, cfg.train, v, cfg.seed)
        path = model_path(cfg, w, v)
        model.save(path)
        write_training_log(path.with_name(f"train_log_{window_tag(w)}_{v.value}.csv"), model.training_log)
        logger.info("window %s %s: final epoch loss %.6g", w.id, v.value, model.training_log[-1][1])


def cmd_predict(cfg: RunConfig, args) -> None:
    inputs = load_inputs(cfg)
    if args.model:
        model = ForecastModel.load(args.model)
        if model.scaler is None:
            raise SchemaError(f"{args.model} carries no scaler")
        w = parse_window_id(model.scaler.fitted_on)
        prepared = prepare_window(inputs, w, cfg.n_groups, cfg.seed, model.steps)
        models = [obtain_model(cfg, prepared, model.variant, args.model)]
    else:
        w = select_window(cfg, inputs)
        prepared = prepare_window(inputs, w, cfg.n_groups, cfg.seed, cfg.train.steps)
        models = [obtain_model(cfg, prepared, v, None) for v in _variants(args)]
    test = prepared.sequences.test
    actual = prepared.raw_target[test.end_index]
    for m in models:
        pred = predict_test(m, prepared)
        rows = [{"date": str(d), "actual": float(a), "predicted": float(p)}
                for d, a, p in zip(test.target_dates, actual, pred)]
        write_rows(cfg.out / "predictions" / f"predictions_{window_tag(w)}_{m.variant.value}.csv", rows,
                   provenance=cfg.echo("predict"))


def cmd_explain(cfg: RunConfig, args) -> None:
    inputs = load_inputs(cfg)
    w = select_window(cfg, inputs)
    prepared = prepare_window(inputs, w, cfg.n_groups, cfg.seed, cfg.train.steps)
    model = obtain_model(cfg, prepared, Variant.FULL, args.model)
    opts = cfg.shapley
    groups = attribution_groups(model, opts.groups)
    if opts.method == "exact" and len(groups) > 20:
        raise EnumerationLimitError(
            f"{len(groups)} groups exceed the exact limit of 20; set shapley.method to 'sampled'"
        )
    baseline = explain_baseline(cfg, prepared, model)
    test = prepared.sequences.test
    pos = {c: i for i, c in enumerate(test.columns)}
    X = test.X[:, :, [pos[c] for c in model.manifest]]
    actual = prepared.raw_target[test.end_index]
    limit = args.limit if args.limit is not None else opts.max_instances
    n = len(X) if limit is None else min(limit, len(X))
    seed = stage_seed(cfg.seed, f"explain:{w.id}")

    reports, attributions, timings = [], [], []
    for i in range(n):
        spec = ValueFunctionSpec(baseline, X[i], Mode(opts.mode), float(actual[i]))
        game = CoalitionGame(model, spec, groups)
        if opts.method == "exact":
            attr = exact_shapley(game, game.n, game.players.names)
        else:
            attr = sampled_shap(game, game.n, opts.budget, seed + i, game.players.names)
        attr.evaluations = game.evaluations
        attributions.append(attr)
        timings.append({"date": str(test.target_dates[i]), "wall_ms": attr.wall_ms})
        reports.append({"date": str(test.target_dates[i]), "actual": float(actual[i]),
                        **attr.to_dict(include_timing=False)})

    tag = window_tag(w)
    payload = {
        "provenance": json.loads(cfg.echo("explain")),
        "window": w.id,
        "mode": opts.mode,
        "method": opts.method,
        "seed": cfg.seed,
        "baseline_policy": opts.baseline,
        "baseline_hash": ValueFunctionSpec(baseline, X[0]).baseline_hash() if n else None,
        "model_digest": model.digest(),
        "groups": {name: list(m) for name, m in zip(groups.names, groups.members)},
        "coalitions": coalition_count_record(len(groups)),
        "max_efficiency_residual": max((a.efficiency_residual for a in attributions), default=0.0),
        "aggregate_mean_abs_phi": aggregate_abs(attributions),
        "reports": reports,
    }
    write_json(cfg.out / "explain" / f"attributions_{tag}.json", payload)
    write_json(cfg.out / "explain" / f"attributions_{tag}.timing.json", {"window": w.id, "timings": timings})
    logger.info("window %s: %d attributions, max efficiency residual %.3g", w.id, n,
                payload["max_efficiency_residual"])


def cmd_evaluate(cfg: RunConfig, args) -> None:
    inputs = load_inputs(cfg)
    plan = plan_for_dates(inputs.market.dates)
    result = rolling_backtest(inputs, plan, cfg.train, cfg.n_groups, cfg.seed)
    echo = cfg.echo("evaluate")
    write_rows(cfg.out / "table3.csv", result.table3_rows(), provenance=echo)
    rows = metric_rows(result.reports)
    write_rows(cfg.out / "metrics.csv", rows, provenance=echo)
    write_json(cfg.out / "metrics.json", {"provenance": json.loads(echo), "reports": rows})
    for w in result.windows:
        write_rows(cfg.out / "plots" / f"plot_{w.window.test_year}.csv", plot_rows(w), provenance=echo)
        for v, m in w.models.items():
            write_training_log(cfg.out / "logs" / f"train_log_{window_tag(w.window)}_{v}.csv", m.training_log)


def cmd_sensitivity(cfg: RunConfig, args) -> None:
    inputs = load_inputs(cfg)
    w = select_window(cfg, inputs)
    s = cfg.sensitivity
    report = sensitivity_sweep(inputs, w, range(s.n_min, s.n_max + 1), cfg.train, cfg.seed)
    write_rows(cfg.out / "table1.csv", sensitivity_rows(report), provenance=cfg.echo("sensitivity"))
    logger.info("window %s: highest R^2 at n_G = %d", w.id, report.chosen)


def cmd_bench(cfg: RunConfig, args) -> None:
    inputs = load_inputs(cfg)
    w = select_window(cfg, inputs)
    prepared = prepare_window(inputs, w, cfg.n_groups, cfg.seed, cfg.train.steps)
    model = obtain_model(cfg, prepared, Variant.FULL, args.model)
    baseline = explain_baseline(cfg, prepared, model)
    test = prepared.sequences.test
    pos = {c: i for i, c in enumerate(test.columns)}
    X = test.X[: cfg.shapley.bench_instances][:, :, [pos[c] for c in model.manifest]]
    groups = attribution_groups(model, "semantic")
    players = token_units(model.manifest, model.steps)
    token, group = bench_attribution(model, X, baseline, groups, players, cfg.shapley.budget,
                                     stage_seed(cfg.seed, f"bench:{w.id}"))
    echo = cfg.echo("bench-shap")
    write_rows(cfg.out / "table2.csv", bench_rows([token, group]), provenance=echo)
    write_json(cfg.out / "bench_counts.json", {
        "provenance": json.loads(echo),
        "window": w.id,
        "instances": len(X),
        "budget": cfg.shapley.budget,
        "token": {"evaluations": token.evaluations, "coalitions": coalition_count_record(token.units)},
        "group": {"evaluations": group.evaluations, "coalitions": coalition_count_record(group.units)},
    })
    logger.info("group-exact %.3fs vs token-permutation %.3fs (%.1f%% less)", group.seconds, token.seconds,
                group.reduction_pct)


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic price/news corpus and a ready run config"),
    "ingest": (cmd_ingest, "align prices, compute indicators, write the dataset CSV"),
    "group": (cmd_group, "fit the semantic grouping for a window and export group features"),
    "train": (cmd_train, "train TECH_ONLY and/or FULL for a window"),
    "predict": (cmd_predict, "predict the test year of a window"),
    "explain": (cmd_explain, "group Shapley attributions for test-year predictions"),
    "evaluate": (cmd_evaluate, "rolling backtest of both variants"),
    "sensitivity": (cmd_sensitivity, "sweep the group count"),
    "bench-shap": (cmd_bench, "time token-level sampling against exact group attribution"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides paths.out_dir)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = _Parser(prog="groupshap", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"groupshap {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name not in ("synth", "ingest", "evaluate"):
            p.add_argument("--test-year", type=int, help="select the window that tests on this year")
        if name not in ("synth", "ingest"):
            p.add_argument("--n-groups", type=int, help="semantic group count")
            p.add_argument("--epochs", type=int, help="training epochs")
        if name in ("train", "predict"):
            p.add_argument("--variant", choices=[v.value for v in Variant])
        if name in ("predict", "explain", "bench-shap"):
            p.add_argument("--model", help="saved model to use instead of the window default")
        if name == "explain":
            p.add_argument("--limit", type=int, help="explain only the first N test dates")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    func = COMMANDS[args.command][0]
    try:
        cfg = apply_overrides(load_config(args.config), args)
        func(cfg, args)
    except GroupShapError as exc:
        print(f"groupshap {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
