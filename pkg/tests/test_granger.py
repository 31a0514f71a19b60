"""Granger discovery: OLS, F-tests, FDR control and hypergraph recovery on planted panels."""
import numpy as np
import pandas as pd
import pytest
import statsmodels.api as sm
from scipy import stats

from errors import GrangerError, InsufficientDataError, RankDeficiencyError, ScheduleError
from granger import (
    CausalHypergraph, GraphSchedule, LaggedNode, OLSFit, bh_fdr, build_hypergraph,
    f_pvalue, fit_lagged_ols, granger_f_test, sensitivity_sweep, sliding_window_update, window_starts,
)
from synthetic import PlantedEdge, PlantedSpec, gen_var_process, plant_regime_shift

ALPHA = 0.01


def planted_spec(seed: int, n: int = 8, length: int = 2000, n_edges: int = 3, coef: float = 0.5) -> PlantedSpec:
    """Disjoint sources and targets so no indirect (chained) causality exists."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    lags = rng.integers(1, 6, n_edges)
    edges = [PlantedEdge(int(perm[i]), int(lags[i]), int(perm[n_edges + i]), coef) for i in range(n_edges)]
    return PlantedSpec(num_series=n, max_lag=5, edges=edges, length=length, seed=seed)


def noise_frame(seed: int, n: int, length: int) -> pd.DataFrame:
    values, _ = gen_var_process(PlantedSpec(num_series=n, max_lag=1, edges=[], length=length, seed=seed))
    return values


def precision_recall(found: set, truth: set):
    hits = len(found & truth)
    return (hits / len(found) if found else 1.0), (hits / len(truth) if truth else 1.0)


# --- OLS ---

def test_exact_linear_relation():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(200)
    y = np.r_[0.0, 2.0 * x[:-1] + 1.0]
    frame = pd.DataFrame({"return:X": x, "return:Y": y})
    fit = fit_lagged_ols(frame, "return:Y", [LaggedNode("return", "X", 1)], max_lag=1)
    assert fit.rss < 1e-18
    assert fit.coefficients["return:X:1"] == pytest.approx(2.0, abs=1e-9)
    assert fit.coefficients["intercept"] == pytest.approx(1.0, abs=1e-9)


def test_planted_coefficient_matches_statsmodels():
    spec = PlantedSpec(num_series=2, max_lag=1, edges=[PlantedEdge(0, 1, 1, 0.9)], noise_stdev=0.1, length=2000, seed=5)
    values, _ = gen_var_process(spec)
    fit = fit_lagged_ols(values, "return:S1", [LaggedNode("return", "S0", 1)], max_lag=1)
    oracle = sm.OLS(values["return:S1"].to_numpy()[1:], sm.add_constant(values["return:S0"].to_numpy()[:-1])).fit()
    assert fit.coefficients["return:S0:1"] == pytest.approx(0.9, abs=0.05)
    assert fit.coefficients["return:S0:1"] == pytest.approx(oracle.params[1], rel=1e-9)
    assert fit.rss == pytest.approx(oracle.ssr, rel=1e-9)


def test_duplicate_predictors_raise_rank_deficiency():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(100)
    frame = pd.DataFrame({"return:X": x, "return:Z": x.copy(), "return:Y": rng.standard_normal(100)})
    with pytest.raises(RankDeficiencyError) as err:
        fit_lagged_ols(frame, "return:Y", [LaggedNode("return", "X", 1), LaggedNode("return", "Z", 1)], max_lag=1)
    assert err.value.collinear == ["return:Z:1"]


# --- F-TEST ---

def _fit(rss, regressors, n_obs=103):
    return OLSFit("return:Y", regressors, {}, rss, n_obs)


def test_f_statistic_hand_value():
    full = _fit(5.0, [LaggedNode("return", "X", 1), LaggedNode("return", "X", 2)])
    result = granger_f_test(_fit(10.0, []), full)
    assert result.f_statistic == pytest.approx(50.0)
    assert (result.dof_num, result.dof_den) == (2, 100)
    assert result.p_value == pytest.approx(stats.f.sf(50.0, 2, 100), abs=1e-10)


def test_identical_models_give_zero_statistic():
    fit = _fit(7.0, [LaggedNode("return", "X", 1)])
    result = granger_f_test(fit, fit)
    assert result.f_statistic == 0.0 and result.p_value == 1.0


def test_perfect_full_fit_is_infinite():
    result = granger_f_test(_fit(3.0, []), _fit(0.0, [LaggedNode("return", "X", 1)]))
    assert np.isinf(result.f_statistic) and result.p_value == 0.0


def test_f_tail_matches_scipy():
    for f, d1, d2 in [(0.3, 1, 10), (2.5, 5, 1989), (11.0, 3, 40)]:
        assert f_pvalue(f, d1, d2) == pytest.approx(stats.f.sf(f, d1, d2), abs=1e-10)


def test_noise_regressor_rejection_rate_is_calibrated():
    rng = np.random.default_rng(2024)
    T, K = 2000, 2
    own = [LaggedNode("return", "Y", k) for k in range(1, K + 1)]
    noise = [LaggedNode("return", "N", k) for k in range(1, K + 1)]
    rejections = 0
    trials = 1000
    for _ in range(trials):
        frame = pd.DataFrame({"return:Y": rng.standard_normal(T), "return:N": rng.standard_normal(T)})
        restricted = fit_lagged_ols(frame, "return:Y", own, K)
        full = fit_lagged_ols(frame, "return:Y", own + noise, K)
        rejections += granger_f_test(restricted, full).p_value < 0.05
    assert 0.03 <= rejections / trials <= 0.07


# --- FDR ---

def test_bh_hand_example():
    assert bh_fdr([0.001, 0.008, 0.039, 0.041], 0.05) == [0, 1, 2, 3]


def test_bh_edge_cases():
    assert bh_fdr([1.0, 1.0, 1.0], 0.05) == []
    assert bh_fdr([0.025], 0.05) == [0]
    assert bh_fdr([], 0.05) == []
    with pytest.raises(GrangerError):
        bh_fdr([0.2, 1.5], 0.05)


def test_bh_is_monotone_in_alpha():
    rng = np.random.default_rng(8)
    p = np.concatenate([rng.uniform(0, 0.01, 10), rng.uniform(0, 1, 90)])
    previous = set()
    for alpha in (0.001, 0.01, 0.05, 0.1, 0.2):
        current = set(bh_fdr(p, alpha))
        assert previous <= current
        previous = current


# --- HYPERGRAPH ---

def test_planted_recovery_over_twenty_seeds():
    precisions, recalls = [], []
    for seed in range(20):
        spec = planted_spec(seed)
        values, truth = gen_var_process(spec)
        graph = build_hypergraph(values, max_lag=5, alpha=ALPHA)
        p, r = precision_recall(graph.edge_pairs(), truth.pairs())
        precisions.append(p)
        recalls.append(r)
    assert np.mean(precisions) >= 0.8
    assert np.mean(recalls) >= 0.8


def test_all_noise_false_edge_count():
    counts, tests = [], 0
    for seed in range(50):
        graph = build_hypergraph(noise_frame(1000 + seed, 8, 500), max_lag=5, alpha=ALPHA)
        counts.append(len(graph.edge_pairs()))
        tests = len(graph.p_values)
    assert tests == 8 * 7
    assert np.mean(counts) <= 2 * ALPHA * tests


def test_permuted_target_loses_its_edges():
    spurious = 0
    rng = np.random.default_rng(77)
    for seed in range(10):
        spec = planted_spec(seed)
        values, truth = gen_var_process(spec)
        shuffled = values.copy()
        for _, _, target in truth.edges:
            shuffled[target] = rng.permutation(shuffled[target].to_numpy())
        spurious += len(build_hypergraph(shuffled, 5, ALPHA).edge_pairs() & truth.pairs())
    # 30 planted pairs in total; at most one may survive by chance
    assert spurious <= 1


def test_decisions_are_scale_invariant():
    values, _ = gen_var_process(planted_spec(3, length=800))
    scaled = values.copy()
    scaled["return:S2"] *= 37.0
    scaled["return:S5"] *= 0.01
    a = build_hypergraph(values, 5, ALPHA)
    b = build_hypergraph(scaled, 5, ALPHA)
    assert a.edge_pairs() == b.edge_pairs()
    np.testing.assert_allclose(b.p_values, a.p_values, rtol=1e-6, atol=1e-12)
    for ea, eb in zip(a.hyperedges, b.hyperedges):
        assert eb.test.f_statistic == pytest.approx(ea.test.f_statistic, rel=1e-6)


def test_hyperedges_are_well_formed():
    values, truth = gen_var_process(planted_spec(4))
    graph = build_hypergraph(values, 5, ALPHA)
    for edge in graph.hyperedges:
        assert edge.parents and edge.target.lag == 0
        assert all(1 <= p.lag <= 5 for p in edge.parents)
        assert edge.test.rss_full <= edge.test.rss_restricted
        assert 0.0 <= edge.test.p_value <= 1.0
        for col in edge.source_columns():
            assert {p.lag for p in edge.parents if p.column == col} == {1, 2, 3, 4, 5}


def test_text_format():
    values, _ = gen_var_process(planted_spec(4))
    graph = build_hypergraph(values, 5, ALPHA)
    line = graph.to_text().splitlines()[0]
    assert line.startswith("TARGET return:S")
    assert " <- {return:S" in line and " F=" in line and " p=" in line
    assert line.endswith(f"window={graph.window_text()}")


def test_short_panel_is_rejected():
    with pytest.raises(InsufficientDataError):
        build_hypergraph(noise_frame(0, 3, 20), max_lag=5)


def test_constant_series_is_skipped(capsys):
    frame = noise_frame(0, 3, 300)
    frame["return:FLAT"] = 1.0
    graph = build_hypergraph(frame, max_lag=2)
    assert "⚠️" in capsys.readouterr().out
    assert all("FLAT" not in str(n) for n in graph.nodes)


def test_prune_minimal_keeps_true_sources():
    spec = PlantedSpec(num_series=4, max_lag=2, length=2000, seed=21,
                       edges=[PlantedEdge(0, 1, 3, 0.5), PlantedEdge(1, 2, 3, 0.5)])
    values, truth = gen_var_process(spec)
    graph = build_hypergraph(values, max_lag=2, alpha=ALPHA, prune_minimal=True)
    sources = {p.column for p in graph.parents(LaggedNode("return", "S3", 0))}
    assert {"return:S0", "return:S1"} <= sources


def test_sensitivity_sweep_grid():
    values, _ = gen_var_process(planted_spec(6, length=600))
    sweep = sensitivity_sweep(values)
    assert len(sweep) == 9
    ref = sweep[(sweep.max_lag == 5) & (sweep.alpha == 0.01)]
    assert ref["jaccard"].iloc[0] == 1.0


# --- SLIDING WINDOWS ---

def test_window_starts_cover_the_tail():
    assert window_starts(10, 4, 3) == [0, 3, 6]
    assert window_starts(11, 4, 3) == [0, 3, 6, 7]


def test_full_stride_equals_single_graph():
    values, _ = gen_var_process(planted_spec(1, length=600))
    graphs = sliding_window_update(values, len(values), len(values), 5, ALPHA)
    assert len(graphs) == 1
    assert graphs[0].to_text() == build_hypergraph(values, 5, ALPHA).to_text()


def test_window_longer_than_panel_is_rejected():
    with pytest.raises(GrangerError):
        sliding_window_update(noise_frame(0, 3, 100), 200, 10, 2, ALPHA)


def test_stationary_windows_are_stable():
    values, _ = gen_var_process(planted_spec(12, length=2000))
    graphs = sliding_window_update(values, 500, 250, 5, ALPHA)
    jaccards = []
    for a, b in zip(graphs, graphs[1:]):
        union = a.edge_pairs() | b.edge_pairs()
        jaccards.append(len(a.edge_pairs() & b.edge_pairs()) / len(union) if union else 1.0)
    assert np.mean(jaccards) >= 0.6


def test_regime_shift_detection_over_twenty_seeds():
    new_pair = ("return:S3", "return:S0")
    post_hits, pre_hits, post_n, pre_n = 0, 0, 0, 0
    for seed in range(20):
        base = PlantedSpec(num_series=4, max_lag=2, length=2000, seed=300 + seed,
                           edges=[PlantedEdge(1, 1, 2, 0.5)])
        spec = plant_regime_shift(base, 1000, [PlantedEdge(1, 1, 2, 0.5), PlantedEdge(3, 1, 0, 0.5)])
        values, _ = gen_var_process(spec)
        for graph in sliding_window_update(values, 500, 250, 2, ALPHA):
            start = values.index.get_loc(graph.window_range[0])
            end = values.index.get_loc(graph.window_range[1])
            if end < 1000:
                pre_n += 1
                pre_hits += new_pair in graph.edge_pairs()
            elif start >= 1000:
                post_n += 1
                post_hits += new_pair in graph.edge_pairs()
    assert pre_n == 60 and post_n == 60
    assert post_hits / post_n >= 0.8
    assert pre_hits / pre_n <= 2 * ALPHA


# --- SCHEDULE ---

def _graph(start, end):
    return CausalHypergraph(frozenset(), [], (pd.Timestamp(start), pd.Timestamp(end)), 5, ALPHA, [0.5])


def test_schedule_picks_the_covering_window_that_ends_first():
    schedule = GraphSchedule([_graph("2020-01-01", "2020-06-30"), _graph("2020-04-01", "2020-12-31")])
    assert schedule.index_for("2020-02-01") == 0
    assert schedule.index_for("2020-05-01") == 0
    assert schedule.index_for("2020-08-01") == 1
    nested = GraphSchedule([_graph("2020-01-01", "2020-12-31"), _graph("2020-03-01", "2020-06-30")])
    assert nested.graph_for("2020-04-01").window_range[1] == pd.Timestamp("2020-06-30")
    with pytest.raises(ScheduleError):
        schedule.graph_for("2021-03-01")


def test_schedule_json_round_trip(tmp_path):
    values, _ = gen_var_process(planted_spec(2, length=700))
    schedule = GraphSchedule(sliding_window_update(values, 400, 300, 5, ALPHA))
    path = tmp_path / "graphs.json"
    schedule.save(str(path))
    loaded = GraphSchedule.load(str(path))
    assert loaded.to_text() == schedule.to_text()
    assert "p-value histogram" in loaded.summary()
