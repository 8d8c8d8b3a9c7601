"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line; the lines are printed as they happen
(visible with ``-s``) and repeated in the terminal summary by conftest.
"""

import json
import math
import time
from dataclasses import replace

import numpy as np

from groupshap.cli import main
from groupshap.evaluation import (
    BacktestInputs,
    MetricReport,
    bench_attribution,
    mae,
    mape,
    prepare_window,
    r2,
    read_rows,
    rmse,
    run_window,
    semantic_groups,
    train_variant,
)
from groupshap.forecaster import TrainConfig, Variant, train
from groupshap.grouping import DocumentEmbedding, cluster_cosine_kmeans, normalize_embeddings
from groupshap.gru import gru_cell_forward, zero_gru_layer
from groupshap.market_data import SequenceSet, build_market_features, make_windows
from groupshap.shapley import (
    FeatureGroups,
    ValueFunctionSpec,
    count_coalitions,
    exact_group_shap,
    exact_shapley,
    masked_value,
    training_baseline,
)
from groupshap.synth import SynthSpec, generate, perturb, planted_directions
from oracles import network_gradient_errors, permutation_shapley

RESULTS = []


def verdict(number, title, ok, detail=""):
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
    RESULTS.append(line)
    print(line)
    assert ok, line


def inputs_from(data):
    fm, close = build_market_features(data.target, data.macro)
    return BacktestInputs(fm, close, normalize_embeddings(data.documents))


def table_game(table):
    weights = 1 << np.arange(int(math.log2(len(table))))
    return lambda coalitions: table[coalitions.astype(np.int64) @ weights]


# ---------------------------------------------------------------------------


def test_01_coalition_space():
    t0 = time.perf_counter()
    small, big = count_coalitions(5), count_coalitions(320)
    ms = (time.perf_counter() - t0) * 1e3
    ok = small == 31 and big == 2**320 - 1 and isinstance(big, int) and ms < 1.0
    verdict(1, "coalition counts 31 and 2^320-1", ok, f"{ms:.4f} ms")


def test_02_attribution_cost():
    t0 = time.perf_counter()
    data = generate(SynthSpec(years=4, n_features=10, docs_per_day=2, seed=0))
    prepared = prepare_window(inputs_from(data), make_windows(2015, 2018)[0], 5, 0, 10)
    model = train_variant(prepared, TrainConfig(epochs=1), Variant.FULL, 0)
    X = prepared.sequences.test.X[:3]
    baseline = training_baseline(prepared.sequences.train.X)
    token, group = bench_attribution(model, X, baseline, semantic_groups(model), budget=10)
    total = time.perf_counter() - t0
    ok = (len(model.manifest) == 32 and token.units == 320 and group.units == 5
          and token.evaluations == 3 * (10 * 320 + 2) and group.evaluations == 3 * 32
          and group.reduction_pct >= 80.0 and total < 600)
    verdict(2, "exact 5-group vs 320-unit permutation cost", ok,
            f"token {token.seconds:.2f}s, group {group.seconds:.3f}s, reduction {group.reduction_pct:.1f}%, "
            f"total {total:.0f}s")


def test_03_rolling_plan():
    plan = make_windows(2015, 2024)
    got = [(w.train_start, w.train_end, w.test_year) for w in plan]
    expected = [(y, y + 2, y + 3) for y in range(2015, 2022)]
    verdict(3, "seven rolling windows from 2015-2017 -> 2018", got == expected, f"{len(got)} windows")


def test_04_table_schemas(tmp_path):
    base = {
        "synth": {"years": 5, "n_features": 1, "docs_per_day": 2},
        "train": {"hidden_size": 3, "num_layers": 1, "head_hidden": [3], "epochs": 1, "batch_size": 64},
        "shapley": {"max_instances": 1, "bench_instances": 1, "budget": 1},
    }
    (tmp_path / "base.json").write_text(json.dumps(base))
    corpus = tmp_path / "c"
    assert main(["synth", "--config", str(tmp_path / "base.json"), "--out", str(corpus)]) == 0
    cfg = str(corpus / "config.json")
    assert main(["sensitivity", "--config", cfg]) == 0
    assert main(["evaluate", "--config", cfg]) == 0
    t1 = read_rows(corpus / "run" / "table1.csv")
    t3 = read_rows(corpus / "run" / "table3.csv")
    t3_cols = ["year", "window", "hv", "tech_mae", "tech_rmse", "tech_mape", "tech_r2",
               "full_mae", "full_rmse", "full_mape", "full_r2"]
    ok = (len(t1) == 9 and [int(r["n_groups"]) for r in t1] == list(range(1, 10))
          and {"mae", "rmse", "r2"} <= set(t1[0])
          and [int(r["year"]) for r in t3] == [2018, 2019] and list(t3[0]) == t3_cols
          and all(float(r["hv"]) > 0 for r in t3))
    verdict(4, "sensitivity and backtest table schemas", ok, f"table1 {len(t1)} rows, table3 columns {list(t3[0])}")


def test_05_shapley_axioms():
    t0 = time.perf_counter()
    worst = {"efficiency": 0.0, "dummy": 0.0, "symmetry": 0.0, "linearity": 0.0}
    cases = 0
    for n in range(2, 9):
        full = 2**n
        for rep in range(100):
            rng = np.random.default_rng(1000 * n + rep)
            a, b = rng.normal(size=full), rng.normal(size=full)
            a[0] = b[0] = 0.0
            phi_a = exact_shapley(table_game(a), n)
            phi_b = exact_shapley(table_game(b), n)
            alpha, beta = rng.normal(size=2)
            phi_ab = exact_shapley(table_game(alpha * a + beta * b), n)
            worst["efficiency"] = max(worst["efficiency"], phi_a.efficiency_residual, phi_ab.efficiency_residual)
            worst["linearity"] = max(worst["linearity"],
                                     np.max(np.abs(phi_ab.phi - alpha * phi_a.phi - beta * phi_b.phi)))

            # last player is a dummy: v(S) ignores it
            dummy = np.array([a[m & ~(1 << (n - 1))] for m in range(full)])
            worst["dummy"] = max(worst["dummy"], abs(exact_shapley(table_game(dummy), n).phi[-1]))

            # players 0 and 1 interchangeable: v depends on S only through swap-invariant data
            swap = [(m & ~3) | ((m & 1) << 1) | ((m >> 1) & 1) for m in range(full)]
            sym = a + a[swap]
            phi_s = exact_shapley(table_game(sym), n).phi
            worst["symmetry"] = max(worst["symmetry"], abs(phi_s[0] - phi_s[1]))
            cases += 1
    secs = time.perf_counter() - t0
    ok = (worst["efficiency"] < 1e-8 and worst["dummy"] < 1e-12 and worst["symmetry"] < 1e-10
          and worst["linearity"] < 1e-9 and secs < 60)
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(5, "efficiency, dummy, symmetry, linearity", ok, f"{cases} tables per axiom, {detail}, {secs:.1f}s")


def test_06_permutation_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    tech = tuple(f"t{i}" for i in range(5))
    text = tuple(f"group_{g}_weight" for g in range(5))
    X = rng.uniform(size=(40, 4, 10))
    data = SequenceSet(X, rng.uniform(size=40), np.arange(40), np.arange(40).astype("datetime64[D]"),
                       tech + text, np.zeros(40, bool))
    model = train(data, TrainConfig(hidden_size=5, num_layers=2, head_hidden=(4,), epochs=2, steps=4,
                                    learning_rate=1e-2), tech, text)
    baseline = X.mean(axis=(0, 1))
    worst, instances = 0.0, 0
    for n in range(1, 9):
        groups = FeatureGroups.singletons(model.manifest[:n])
        for _ in range(50):
            spec = ValueFunctionSpec(baseline, rng.uniform(size=(4, 10)))
            got = exact_group_shap(spec, groups, model).phi
            oracle = permutation_shapley(lambda s: masked_value(spec, s, model, groups), n)
            worst = max(worst, float(np.max(np.abs(got - oracle))))
            instances += 1
    secs = time.perf_counter() - t0
    verdict(6, "exact group attribution equals the all-orderings average", worst < 1e-10 and secs < 120,
            f"{instances} instances, n_G 1..8, max diff {worst:.1e}, {secs:.1f}s")


def test_07_gradient_check():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst, configs = 0.0, 0
    for seed in range(24):
        head = tuple(int(h) for h in rng.integers(1, 6, size=rng.integers(0, 3)))
        cfg = dict(d_tech=int(rng.integers(1, 5)), d_group=int(rng.integers(0, 4)), hidden=int(rng.integers(1, 6)),
                   layers=int(rng.integers(1, 3)), steps=int(rng.integers(1, 5)), head_hidden=head,
                   batch=int(rng.integers(1, 5)), dropout=float(rng.choice([0.0, 0.25])))
        errs = network_gradient_errors(seed, **cfg)
        worst = max(worst, max(errs.values()))
        configs += 1
    secs = time.perf_counter() - t0
    verdict(7, "analytic vs central-difference gradients", worst < 1e-4 and secs < 60,
            f"{configs} configurations, max rel err {worst:.1e}, {secs:.1f}s")


def test_08_zero_parameter_decay():
    rng = np.random.default_rng(8)
    worst = 0.0
    for H in (1, 3, 8):
        p = zero_gru_layer(4, H)
        h0 = rng.normal(size=H) * 10
        h = h0
        for t in range(1, 60):
            h = gru_cell_forward(rng.normal(size=4), h, p)
            expected = 0.5**t * h0
            worst = max(worst, float(np.max(np.abs(h - expected) / np.abs(expected))))
    verdict(8, "zero-parameter state halves every step", worst < 1e-12, f"max rel err {worst:.1e}")


def test_09_clustering_recovery():
    failures = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        sep = 60.0 + 10.0 * (seed % 4)
        dirs = planted_directions(5, 32, sep, rng)
        truth = rng.integers(0, 5, 400)
        truth[:5] = np.arange(5)
        x = np.array([perturb(dirs[g], 10.0, rng) for g in truth])
        m1 = cluster_cosine_kmeans(x, 5, seed=seed)
        m2 = cluster_cosine_kmeans(x, 5, seed=seed)
        labels = m1.assign(x)
        # purity 1.0: every found cluster holds a single planted group
        pure = all(len(np.unique(truth[labels == g])) == 1 for g in np.unique(labels))
        same = m1.centroids.tobytes() == m2.centroids.tobytes() and np.array_equal(labels, m2.assign(x))
        if not (pure and same):
            failures.append(seed)
    verdict(9, "planted direction recovery and bit-identical reruns", not failures,
            f"20 seeds, separations 60-90 deg, noise 10 deg, failures {failures}")


LIFT_CONFIG = TrainConfig(epochs=100, hidden_size=16, num_layers=1, head_hidden=(16,), learning_rate=2e-3,
                          dropout=0.0)


def lift_maes(snr, seed):
    data = generate(SynthSpec(years=4, snr=snr, daily_vol=0.02, n_features=0, seed=seed))
    res = run_window(inputs_from(data), make_windows(2015, 2018)[0], replace(LIFT_CONFIG, seed=seed), 5, seed)
    return res.reports["TECH_ONLY"].mae, res.reports["FULL"].mae


def test_10_planted_signal_lift():
    signal = [lift_maes(3.0, s) for s in range(10)]
    wins = sum(full < tech for tech, full in signal)
    null = np.array([tech - full for tech, full in (lift_maes(0.0, s) for s in range(10))])
    mean, se = float(null.mean()), float(null.std(ddof=1) / math.sqrt(len(null)))
    ok = wins >= 9 and abs(mean) <= 2 * se
    verdict(10, "FULL beats TECH_ONLY with signal, no lift without", ok,
            f"wins {wins}/10; snr 0 paired diff {mean:.4f} vs 2 SE {2 * se:.4f}")


def test_11_leakage_audit():
    data = generate(SynthSpec(years=4, n_features=2, docs_per_day=2, seed=11))
    window = make_windows(2015, 2018)[0]
    cfg = TrainConfig(hidden_size=4, num_layers=1, head_hidden=(4,), epochs=2, batch_size=64, seed=0)
    base = inputs_from(data)
    reference = run_window(base, window, cfg, 4, 3).checksums()

    test_idx = np.flatnonzero(data.target.dates.astype("datetime64[Y]").astype(int) + 1970 == 2018)
    changed, inert = [], []
    for pos in (test_idx[0], test_idx[len(test_idx) // 2], test_idx[-1]):
        day = data.target.dates[pos]

        def bump(series):
            i = np.flatnonzero(series.dates == day)
            kw = {}
            for name in ("close", "open", "high", "low", "volume"):
                arr = getattr(series, name)
                if arr is not None:
                    arr = arr.copy()
                    arr[i] *= 7.0
                    kw[name] = arr
            return replace(series, **kw)

        docs = [DocumentEmbedding(d.doc_id, d.date, -d.vector, d.p_neg, d.p_pos, d.p_neu) if d.date == day else d
                for d in data.documents]
        docs.append(DocumentEmbedding("extra", day, np.ones(len(docs[0].vector)), 1.0, 0.0, 0.0))
        bumped = inputs_from(replace(data, target=bump(data.target), macro=[bump(s) for s in data.macro],
                                     documents=docs))
        # the perturbation must reach the inputs, or the audit proves nothing
        if np.array_equal(bumped.market.values, base.market.values) or np.array_equal(bumped.close, base.close):
            inert.append(str(day))
        if run_window(bumped, window, cfg, 4, 3).checksums() != reference:
            changed.append(str(day))
    verdict(11, "test-year perturbations leave scaler, grouping and weights unchanged", not changed and not inert,
            f"keys {sorted(reference)}, checksum changes {changed}, inert perturbations {inert}")


def test_12_metric_identities():
    rng = np.random.default_rng(12)
    ordered = True
    for i in range(500):
        actual = rng.uniform(1, 100, size=rng.integers(2, 50))
        rep = MetricReport.compute("w", "FULL", actual, actual + rng.normal(scale=rng.uniform(0.01, 20), size=len(actual)))
        ordered &= rep.mae <= rep.rmse
    perfect = r2([3.0, 1.0, 4.0, 1.5], [3.0, 1.0, 4.0, 1.5]) == 1.0
    a, p = [100.0, 200.0], [110.0, 180.0]
    got = (mae(a, p), rmse(a, p), mape(a, p), r2(a, p))
    expected = (15.0, math.sqrt(250.0), 10.0, 0.8)
    hand = all(abs(g - e) < 1e-12 for g, e in zip(got, expected))
    verdict(12, "mae <= rmse, perfect r2, hand example", ordered and perfect and hand,
            f"mae<=rmse {ordered}, perfect r2 {perfect}, hand got {got} expected {expected}")


def test_13_end_to_end_determinism(tmp_path):
    base = {
        "synth": {"years": 4, "n_features": 2, "docs_per_day": 2},
        "train": {"hidden_size": 4, "num_layers": 1, "head_hidden": [4], "epochs": 2, "batch_size": 64},
        "shapley": {"max_instances": 4},
    }
    (tmp_path / "base.json").write_text(json.dumps(base))
    runs = []
    for name in ("a", "b"):
        root = tmp_path / name
        assert main(["synth", "--config", str(tmp_path / "base.json"), "--out", str(root), "--seed", "13"]) == 0
        for cmd in ("group", "train", "explain", "evaluate"):
            assert main([cmd, "--config", str(root / "config.json")]) == 0, cmd
        runs.append(root)

    def listing(root):
        return sorted(p.relative_to(root) for p in root.rglob("*")
                      if p.is_file() and "timing" not in p.name and not p.name.startswith("train_log"))

    files = listing(runs[0])
    differ = [str(f) for f in files if (runs[0] / f).read_bytes() != (runs[1] / f).read_bytes()]
    ok = files == listing(runs[1]) and not differ and len(files) >= 10
    verdict(13, "synth -> group -> train -> explain -> evaluate twice is byte-identical", ok,
            f"{len(files)} files compared, differing {differ}")

