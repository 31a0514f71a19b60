"""Masked angular attention model: masks, forward invariances, gradients, training and checkpoints."""
import math
import time

import numpy as np
import pandas as pd
import pytest
import torch
from torch.func import functional_call

from conftest import hand_panel, market_panel
from csht_core import (
    AttentionMap, CSHTModel, MaskMatrix, ModelConfig, WindowBuilder, attention_path, build_mask,
    causal_alignment, forward, init_state, load_checkpoint, loss, masked_attention, panel_nodes, save_checkpoint,
    train, window_nodes,
)
from errors import ModelError, ScheduleError, TrainingDivergedError
from evaluation import evaluate
from granger import CausalHypergraph, GraphSchedule, GrangerTestResult, Hyperedge, LaggedNode, build_hypergraph
from ingest import compute_norm_stats, znormalize

R0, R1 = LaggedNode("return", "A0", 0), LaggedNode("return", "A1", 0)
S0_1 = LaggedNode("sentiment", "A0", 1)
R1_1 = LaggedNode("return", "A1", 1)


def hand_graph(parents_by_target, start="2020-01-01", end="2030-01-01"):
    hyperedges = []
    for target, parents in parents_by_target.items():
        parents = frozenset(parents)
        test = GrangerTestResult(target, parents, 25.0, 1e-6, 2.0, 1.0, len(parents), 200)
        hyperedges.append(Hyperedge(parents, target, test, [test]))
    nodes = frozenset(p for ps in parents_by_target.values() for p in ps) | frozenset(parents_by_target)
    return CausalHypergraph(nodes, hyperedges, (pd.Timestamp(start), pd.Timestamp(end)), 1, 0.01, [1e-6])


def micro_nodes():
    return window_nodes(["return:A0", "return:A1", "sentiment:A0"], ["return:A0", "return:A1"], 1)


def micro_config(**kw):
    base = dict(layers=2, hidden_width=8, heads=2, max_lag=1, seed=4)
    base.update(kw)
    return ModelConfig(**base)


def learnable_panel(T=300, seed=0):
    """r_{t+1} = s_t + small noise: sentiment lag 1 drives the next return."""
    rng = np.random.default_rng(seed)
    s = rng.standard_normal(T)
    r = np.zeros(T)
    r[1:] = s[:-1] + 0.1 * rng.standard_normal(T - 1)
    return hand_panel(r[:, None], sentiment=s[:, None])


def learnable_setup(**kw):
    panel = learnable_panel()
    nodes = window_nodes(["return:A0", "sentiment:A0"], ["return:A0"], 1)
    schedule = GraphSchedule([hand_graph({R0: [S0_1]})])
    cfg = micro_config(**{**dict(layers=1, lam=2.0, learning_rate=1e-2, batch_size=32, epochs=80), **kw})
    return panel, nodes, schedule, cfg


def multi_asset_setup(masked, assets=4, T=300, seed=0):
    """Each asset's next return follows its own sentiment; the other sentiments are distractors."""
    rng = np.random.default_rng(seed)
    s = rng.standard_normal((T, assets))
    r = np.zeros((T, assets))
    r[1:] = s[:-1] + 0.1 * rng.standard_normal((T - 1, assets))
    panel = hand_panel(r, sentiment=s)
    names = [f"A{i}" for i in range(assets)]
    columns = [f"{m}:{a}" for a in names for m in ("return", "sentiment")]
    nodes = window_nodes(columns, [f"return:{a}" for a in names], 1)
    schedule = GraphSchedule([hand_graph({LaggedNode("return", a, 0): [LaggedNode("sentiment", a, 1)] for a in names})])
    # low lam keeps unmasked attention spread over the distractors
    cfg = micro_config(layers=1, lam=0.5, learning_rate=1e-2, batch_size=32, epochs=80, patience=10,
                       use_causal_mask=masked)
    return panel, nodes, names, schedule, cfg


# --- NODES & MASKS ---

def test_window_nodes_put_targets_last():
    assert [str(n) for n in micro_nodes()] == [
        "return:A0:1", "return:A1:1", "sentiment:A0:1", "return:A0:0", "return:A1:0",
    ]


def test_mask_allows_parents_and_self_only():
    nodes = micro_nodes()
    mask = build_mask(hand_graph({R0: [S0_1, R1_1]}), nodes)
    expected = np.eye(5, dtype=bool)
    expected[3, [1, 2]] = True
    np.testing.assert_array_equal(mask.allowed, expected)
    assert mask.active_rows().tolist() == [3]


def test_mask_off_allows_everything():
    mask = build_mask(hand_graph({R0: [S0_1]}), micro_nodes(), use_causal_mask=False)
    assert mask.allowed.all()


def test_unknown_endpoints_are_dropped_with_warning(capsys):
    news = LaggedNode("news", "A0", 1)
    mask = build_mask(hand_graph({R0: [news, S0_1]}), micro_nodes())
    assert "⚠️" in capsys.readouterr().out
    assert mask.allowed[3].sum() == 2


def test_mask_without_self_edge_is_rejected():
    with pytest.raises(ModelError):
        MaskMatrix(micro_nodes(), np.zeros((5, 5), dtype=bool))


# --- ATTENTION ---

def _t(x):
    return torch.tensor(x, dtype=torch.float64)


def test_equal_cosines_split_evenly():
    _, w = masked_attention(_t([[1.0, 0.0]]), _t([[0.0, 1.0], [0.0, -1.0]]), _t([[1.0], [3.0]]),
                            np.array([[True, True]]))
    np.testing.assert_allclose(w.numpy(), [[0.5, 0.5]])


def test_masked_entries_are_exactly_zero():
    rng = np.random.default_rng(0)
    q, k, v = (_t(rng.standard_normal((4, 3))) for _ in range(3))
    mask = np.eye(4, dtype=bool)
    mask[0, 2] = mask[3, 1] = True
    _, w = masked_attention(q, k, v, mask)
    assert (w.numpy()[~mask] == 0.0).all()
    np.testing.assert_allclose(w.sum(dim=-1).numpy(), 1.0)
    # single allowed entry
    assert w[1, 1] == 1.0 and w[2, 2] == 1.0


def test_large_lambda_concentrates_on_nearest_key():
    keys = _t([[1.0, 0.0], [0.9, math.sqrt(1 - 0.81)]])
    _, w = masked_attention(_t([[1.0, 0.0]]), keys, _t([[0.0], [1.0]]), np.ones((1, 2), dtype=bool), lam=1e3)
    assert float(w[0, 1]) < 1e-40
    assert float(w[0, 0]) == pytest.approx(1.0)


def test_weight_on_best_key_grows_with_lambda():
    rng = np.random.default_rng(1)
    q, k, v = _t(rng.standard_normal((1, 4))), _t(rng.standard_normal((5, 4))), _t(rng.standard_normal((5, 2)))
    mask = np.ones((1, 5), dtype=bool)
    best = int(torch.argmax(torch.nn.functional.normalize(k, dim=-1) @ torch.nn.functional.normalize(q, dim=-1)[0]))
    weights = [float(masked_attention(q, k, v, mask, lam=lam)[1][0, best]) for lam in (0.5, 1, 2, 5, 10, 50)]
    assert weights == sorted(weights)


def test_angular_cutoff_drops_distant_keys_but_keeps_self():
    keys = _t([[-1.0, 0.0], [0.0, 1.0], [0.9, math.sqrt(1 - 0.81)]])
    mask = np.ones((1, 3), dtype=bool)
    self_mask = np.array([[True, False, False]])
    _, w = masked_attention(_t([[1.0, 0.0]]), keys, _t([[1.0], [2.0], [3.0]]), mask,
                            angular_cutoff=math.pi / 4, self_mask=self_mask)
    assert float(w[0, 1]) == 0.0
    assert float(w[0, 0]) > 0.0 and float(w[0, 2]) > 0.0
    assert float(w.sum()) == pytest.approx(1.0)


def test_row_without_allowed_entry_is_rejected():
    with pytest.raises(ModelError):
        masked_attention(_t([[1.0, 0.0]]), _t([[1.0, 0.0]]), _t([[1.0]]), np.zeros((1, 1), dtype=bool))


# --- FORWARD ---

def _features(nodes, batch=3, seed=0):
    return torch.as_tensor(np.random.default_rng(seed).standard_normal((batch, len(nodes), 3)))


def test_zero_value_weights_yield_head_bias():
    nodes = micro_nodes()
    model = CSHTModel(nodes, ["A0", "A1"], micro_config())
    with torch.no_grad():
        for layer in model.layers:
            layer.v.weight.zero_()
        model.regression_head.bias.fill_(0.25)
        model.regime_head.bias.fill_(-0.5)
    out = model(_features(nodes), build_mask(hand_graph({R0: [S0_1]}), nodes))
    assert (out.returns == 0.25).all()
    assert (out.regime_logits == -0.5).all()


def test_forward_is_equivariant_to_node_order():
    nodes = micro_nodes()
    cfg = micro_config()
    graph = hand_graph({R0: [S0_1, R1_1], R1: [S0_1]})
    model = CSHTModel(nodes, ["A0", "A1"], cfg)
    perm = [4, 2, 0, 3, 1]
    shuffled = CSHTModel([nodes[i] for i in perm], ["A1", "A0"], cfg)
    params = {k: v for k, v in model.state_dict().items() if k not in ("target_rows", "modality_ids")}
    params["embeddings"] = params["embeddings"][perm]
    shuffled.load_state_dict(params, strict=False)

    feats = _features(nodes)
    mask = build_mask(graph, nodes)
    with torch.no_grad():
        a = model(feats, mask)
        b = shuffled(feats[:, perm], MaskMatrix(shuffled.nodes, mask.allowed[np.ix_(perm, perm)]))
    np.testing.assert_allclose(b.returns.numpy(), a.returns.numpy()[:, ::-1], atol=1e-12)
    np.testing.assert_allclose(b.regime_logits.numpy(), a.regime_logits.numpy(), atol=1e-12)


def test_duplicate_samples_get_identical_predictions():
    nodes = micro_nodes()
    model = CSHTModel(nodes, ["A0", "A1"], micro_config())
    feats = _features(nodes, batch=1).repeat(4, 1, 1)
    with torch.no_grad():
        out = model(feats, build_mask(None, nodes, use_causal_mask=False))
    for i in range(1, 4):
        torch.testing.assert_close(out.returns[i], out.returns[0], rtol=0, atol=1e-15)


def test_same_seed_same_parameters():
    a = CSHTModel(micro_nodes(), ["A0", "A1"], micro_config(seed=9))
    b = CSHTModel(micro_nodes(), ["A0", "A1"], micro_config(seed=9))
    c = CSHTModel(micro_nodes(), ["A0", "A1"], micro_config(seed=10))
    for (name, pa), pb, pc in zip(a.state_dict().items(), b.state_dict().values(), c.state_dict().values()):
        assert torch.equal(pa, pb), name
    assert not torch.equal(a.embeddings, c.embeddings)
    norms = torch.linalg.vector_norm(a.embeddings, dim=-1)
    assert (norms - 1.0).abs().max() < 1e-12


def test_four_ablations_are_distinct():
    nodes = micro_nodes()
    graph = hand_graph({R0: [S0_1], R1: [R1_1]})
    feats = _features(nodes)
    preds = []
    for masked in (True, False):
        for spherical in (True, False):
            cfg = micro_config(use_causal_mask=masked, use_spherical_attention=spherical)
            model = CSHTModel(nodes, ["A0", "A1"], cfg)
            with torch.no_grad():
                preds.append(model(feats, build_mask(graph, nodes, masked)).returns.numpy())
    for i in range(4):
        for j in range(i + 1, 4):
            assert not np.allclose(preds[i], preds[j], atol=1e-12)


def test_gradients_match_central_differences():
    nodes = window_nodes(["return:A0", "return:A1"], ["return:A0", "return:A1"], 2)
    assert len(nodes) == 6
    graph = hand_graph({R0: [R1_1, LaggedNode("return", "A0", 2)]})
    mask = build_mask(graph, nodes)
    # forbidden entries exist and return:A1:0 has no parents
    assert (~mask.allowed).any() and mask.allowed[nodes.index(R1)].sum() == 1
    model = CSHTModel(nodes, ["A0", "A1"], ModelConfig(layers=2, hidden_width=4, heads=2, max_lag=2, seed=3))
    feats = _features(nodes, batch=2, seed=5)
    targets = torch.as_tensor(np.random.default_rng(6).standard_normal((2, 2)))
    named = dict(model.named_parameters())
    assert len(named) == 6 + 2 * 8
    for name, param in named.items():
        base = param.detach().clone().requires_grad_(True)

        def objective(p, name=name):
            out = functional_call(model, {name: p}, (feats, mask))
            return loss(out.returns, targets, "regression") + out.regime_logits.sum()

        assert torch.autograd.gradcheck(objective, (base,), eps=1e-5, atol=1e-6, rtol=1e-4), name


# --- LOSS ---

def test_loss_hand_values():
    assert float(loss([0.3, -0.2], [0.3, -0.2], "regression")) == 0.0
    assert float(loss([0.0, 0.0], [1.0, -1.0], "regression")) == pytest.approx(1.0)
    assert float(loss([1.0, 2.0], [0.0, 0.0], "regression")) == pytest.approx(2.5)
    assert float(loss([0.0], [1.0], "classification")) == pytest.approx(math.log(2.0))


def test_nan_prediction_names_the_sample():
    with pytest.raises(ModelError, match="sample 1"):
        loss([0.1, float("nan"), 0.2], [0.0, 0.0, 0.0], "regression")


def test_unknown_task_is_rejected():
    with pytest.raises(ModelError):
        loss([0.0], [0.0], "ranking")


# --- BATCHES ---

def test_window_builder_aligns_lags_and_targets():
    T = 12
    r = np.column_stack([np.arange(T, dtype=float), 100 + np.arange(T, dtype=float)])
    panel = hand_panel(r)
    nodes = window_nodes(["return:A0", "return:A1"], ["return:A0", "return:A1"], 2)
    builder = WindowBuilder(panel, nodes, micro_config(max_lag=2))
    rows = builder.anchors()
    assert rows[0] == 1 and rows[-1] == T - 2
    batch = builder.batch([5, T - 1], build_mask(None, nodes))
    lag1 = nodes.index(LaggedNode("return", "A0", 1))
    lag2 = nodes.index(LaggedNode("return", "A1", 2))
    assert batch.features[0, lag1, 0] == 5.0
    assert batch.features[0, lag2, 0] == 104.0
    assert (batch.features[:, -2:] == 0).all()
    assert batch.return_targets[0].tolist() == [6.0, 106.0]
    assert torch.isnan(batch.return_targets[1]).all()


def test_anchor_range_selects_target_days():
    panel = hand_panel(np.zeros((20, 1)))
    nodes = window_nodes(["return:A0"], ["return:A0"], 1)
    builder = WindowBuilder(panel, nodes, micro_config(layers=1))
    rows = builder.anchors(start=panel.dates[10], end=panel.dates[15])
    assert rows.tolist() == [9, 10, 11, 12, 13]


def test_batches_share_one_graph_each():
    panel = learnable_panel(T=120)
    nodes = window_nodes(["return:A0", "sentiment:A0"], ["return:A0"], 1)
    d = panel.dates
    schedule = GraphSchedule([hand_graph({R0: [S0_1]}, d[0], d[70]), hand_graph({}, d[50], d[-1])])
    builder = WindowBuilder(panel, nodes, micro_config(layers=1))
    masks = {}
    batches = builder.batches(builder.anchors(), schedule, 16, np.random.default_rng(0), None, masks)
    assert sum(len(b) for b in batches) == len(builder.anchors())
    for b in batches:
        indices = {schedule.index_for(day) for day in b.dates}
        assert len(indices) == 1
        assert b.graph is schedule.graphs[indices.pop()]
        assert b.mask is masks[schedule.graphs.index(b.graph)]


def test_uncovered_anchor_raises_schedule_error():
    panel = learnable_panel(T=60)
    nodes = window_nodes(["return:A0", "sentiment:A0"], ["return:A0"], 1)
    schedule = GraphSchedule([hand_graph({R0: [S0_1]}, panel.dates[0], panel.dates[30])])
    builder = WindowBuilder(panel, nodes, micro_config(layers=1))
    with pytest.raises(ScheduleError):
        builder.batches(builder.anchors(), schedule, 8)


# --- ALIGNMENT ---

def _uniform_map(n_nodes, row):
    return AttentionMap(np.array([row]), torch.full((1, 1, 1, n_nodes), 1.0 / n_nodes, dtype=torch.float64))


def test_uniform_attention_alignment():
    nodes = window_nodes(["return:A0", "return:A1", "sentiment:A0"], ["return:A0"], 1)
    amap = _uniform_map(len(nodes), 3)
    assert causal_alignment([amap], hand_graph({R0: [S0_1]}), nodes) == pytest.approx(1 / 3)
    assert causal_alignment([amap], None, nodes) == 0.0


def test_alignment_counts_cross_mass_on_every_row():
    nodes = window_nodes(["return:A0", "return:A1", "sentiment:A0"], ["return:A0"], 1)
    weights = torch.full((1, 1, 2, 4), 0.25, dtype=torch.float64)
    amap = AttentionMap(np.array([0, 3]), weights)
    # row 3 puts 1/4 on its parent; row 0 has no parents; 3/4 cross mass on each row
    assert causal_alignment([amap], hand_graph({R0: [S0_1]}), nodes) == pytest.approx(1 / 6)


def test_unmasked_model_is_less_aligned_than_masked():
    nodes = micro_nodes()
    graph = hand_graph({R0: [S0_1]})
    schedule = GraphSchedule([graph])
    panel = hand_panel(np.random.default_rng(3).standard_normal((40, 2)),
                       sentiment=np.random.default_rng(4).standard_normal((40, 2)))
    scores = {}
    for masked in (True, False):
        cfg = micro_config(use_causal_mask=masked)
        builder = WindowBuilder(panel, nodes, cfg)
        batch = builder.batches(builder.anchors()[:8], schedule, 8)[0]
        out = forward(init_state(nodes, ["A0", "A1"], cfg), batch)
        scores[masked] = causal_alignment(out.attention, graph, nodes)
    assert scores[True] == pytest.approx(1.0)
    assert 0.0 < scores[False] < 1.0


def test_alignment_without_cross_mass_is_undefined():
    nodes = window_nodes(["return:A0"], ["return:A0"], 1)
    amap = AttentionMap(np.array([1]), torch.tensor([[[[0.0, 1.0]]]], dtype=torch.float64))
    assert math.isnan(causal_alignment([amap], None, nodes))


def test_masked_model_is_fully_aligned():
    panel, nodes, schedule, cfg = learnable_setup()
    state = init_state(nodes, ["A0"], cfg)
    builder = WindowBuilder(panel, nodes, cfg)
    batch = builder.batches(builder.anchors()[:16], schedule, 16)[0]
    out = forward(state, batch)
    for amap in out.attention:
        dense = amap.dense().numpy()
        assert (dense[..., ~batch.mask.allowed] == 0.0).all()
    assert causal_alignment(out.attention, batch.graph, nodes) == pytest.approx(1.0)


# --- TRAINING ---

def test_training_halves_regression_loss():
    panel, nodes, schedule, cfg = learnable_setup()
    state, log = train(init_state(nodes, ["A0"], cfg), (panel,), schedule, task="regression")
    assert len(log.records) == cfg.epochs + 1
    assert log.records[-1].train_loss < 0.5 * log.records[0].train_loss
    assert (state.embedding().table ** 2).sum(axis=1) == pytest.approx(np.ones(len(nodes)), abs=1e-9)


def test_zero_learning_rate_leaves_checkpoint_bytes_unchanged(tmp_path):
    panel, nodes, schedule, cfg = learnable_setup(epochs=3, patience=2)
    cfg.learning_rate = 0.0
    d = panel.dates
    train_part, valid_part = panel.slice(None, d[200]), panel.slice(d[200], None)
    state = init_state(nodes, ["A0"], cfg)
    save_checkpoint(state, str(tmp_path / "before.bin"))
    state, log = train(state, (train_part, valid_part), schedule, task="regression")
    save_checkpoint(state, str(tmp_path / "after.bin"))
    assert (tmp_path / "before.bin").read_bytes() == (tmp_path / "after.bin").read_bytes()
    assert log.stopped_early and log.best_epoch == 0


def test_training_is_deterministic():
    panel, nodes, schedule, cfg = learnable_setup(epochs=3, input_noise=0.1)
    logs = []
    for _ in range(2):
        _, log = train(init_state(nodes, ["A0"], cfg), (panel,), schedule, task="regression")
        logs.append([r.train_loss for r in log.records])
    assert logs[0] == logs[1]


def test_divergence_is_reported_with_the_log():
    panel, nodes, schedule, cfg = learnable_setup(epochs=2, divergence_limit=1e-9)
    with pytest.raises(TrainingDivergedError) as err:
        train(init_state(nodes, ["A0"], cfg), (panel,), schedule, task="regression")
    assert err.value.log.records[0].epoch == 0


def test_classification_without_labels_is_rejected():
    panel, nodes, schedule, cfg = learnable_setup(epochs=1)
    with pytest.raises(ModelError):
        train(init_state(nodes, ["A0"], cfg), (panel,), schedule, task="classification")


def test_training_never_puts_mass_on_forbidden_entries():
    panel, nodes, schedule, cfg = learnable_setup(epochs=10, input_noise=0.1)
    state = init_state(nodes, ["A0"], cfg)
    totals = {"forbidden": 0.0, "calls": 0}

    def record(layer, args, output):
        _, allowed, rows = args
        weights = output[1].weights.detach()
        totals["forbidden"] += float((weights * (~allowed[torch.as_tensor(rows)]).to(weights.dtype)).sum())
        totals["calls"] += 1

    hooks = [layer.register_forward_hook(record) for layer in state.model.layers]
    d = panel.dates
    try:
        _, log = train(state, (panel.slice(None, d[200]), panel.slice(d[200], None)), schedule, task="regression")
    finally:
        for h in hooks:
            h.remove()
    assert not build_mask(schedule.graphs[0], nodes).allowed.all()
    assert totals["calls"] > cfg.epochs
    assert totals["forbidden"] == 0.0
    assert all(r.alignment == pytest.approx(1.0) for r in log.records)


def test_trained_model_beats_zero_forecast_and_unmasked_ablation():
    maes = {}
    for masked in (True, False):
        panel, nodes, names, schedule, cfg = multi_asset_setup(masked)
        d = panel.dates
        state, _ = train(init_state(nodes, names, cfg), (panel.slice(None, d[200]), panel.slice(d[200], d[250])),
                         schedule, task="regression")
        maes[masked] = evaluate(state, panel, schedule, cfg, period=(d[250], d[-1])).mae
    realized = panel.feature("return").to_numpy()[250:-1]
    zero_mae = float(np.abs(realized).mean())
    assert maes[True] <= 0.8 * zero_mae
    assert maes[False] >= maes[True]


def _discover_and_train_one_epoch(num_assets):
    raw = market_panel(num_assets=num_assets, length=300, seed=1, max_lag=2)
    panel = znormalize(raw, compute_norm_stats(raw))
    cfg = ModelConfig(layers=1, hidden_width=8, heads=2, max_lag=2, epochs=1, batch_size=32, seed=0)
    started = time.perf_counter()
    graph = build_hypergraph(panel, max_lag=2, alpha=0.01)
    nodes, assets = panel_nodes(panel, 2)
    train(init_state(nodes, assets, cfg), (panel,), GraphSchedule([graph]), task="regression")
    return time.perf_counter() - started


@pytest.mark.slow
def test_runtime_grows_at_most_quadratically_in_assets():
    sizes = [25, 50, 100]
    seconds = [min(_discover_and_train_one_epoch(n) for _ in range(2)) for n in sizes]
    slope = np.polyfit(np.log(sizes), np.log(seconds), 1)[0]
    # candidate pairs grow quadratically; fixed overheads keep the fit below that
    assert slope < 2.2


# --- CHECKPOINTS & INSPECTION ---

def test_checkpoint_round_trip(tmp_path):
    panel, nodes, schedule, cfg = learnable_setup(epochs=2)
    state, _ = train(init_state(nodes, ["A0"], cfg), (panel,), schedule, task="regression")
    path = str(tmp_path / "model.bin")
    save_checkpoint(state, path)
    loaded = load_checkpoint(path)
    assert loaded.nodes == state.nodes and loaded.config == state.config
    builder = WindowBuilder(panel, nodes, cfg)
    batch = builder.batches(builder.anchors()[:8], schedule, 8)[0]
    assert torch.equal(forward(loaded, batch).returns, forward(state, batch).returns)


def test_truncated_checkpoint_is_rejected(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"not a checkpoint\n{}\n---\n")
    with pytest.raises(ModelError):
        load_checkpoint(str(path))


def test_attention_path_lists_only_allowed_nodes():
    panel, nodes, schedule, cfg = learnable_setup()
    cfg.layers = 2
    state = init_state(nodes, ["A0"], cfg)
    builder = WindowBuilder(panel, nodes, cfg)
    batch = builder.batches(builder.anchors()[:4], schedule, 4)[0]
    path = attention_path(state, batch, "A0")
    assert {layer for layer, _, _ in path} == {1, 2}
    assert {node for _, node, _ in path} <= {"return:A0:0", "sentiment:A0:1"}
    for layer in (1, 2):
        assert sum(w for l, _, w in path if l == layer) == pytest.approx(1.0)
    with pytest.raises(ModelError):
        attention_path(state, batch, "ZZZ")
