import os
import sys
import time
import argparse
from dataclasses import dataclass, replace
from typing import List, Optional

import numpy as np
import pandas as pd
import torch

# --- CORE IMPORTS ---
from csht_core import (
    init_state, train, save_checkpoint, load_checkpoint, build_mask,
    panel_nodes, forward, attention_path, WindowBuilder,
)
from errors import PipelineError, PanelDataError, ScheduleError, ModelError
from evaluation import evaluate, combine_reports
from granger import GraphSchedule, sliding_window_update
from ingest import (
    AssetPanel, NormStats, TimeSplit, compute_norm_stats, concat_panels,
    load_panel_csvs, regime_label, save_raw_csvs, temporal_split, znormalize,
)
from run_config import Config, RunConfig, debug_dump, int_seed_for, load_run_config
from synthetic import (
    GroundTruthGraph, PlantedEdge, gen_var_process, market_frames,
    plant_regime_shift, planted_market_spec,
)

# --- TEMPLATES ---
import report_templates as tpl

# --- OUTPUT LAYOUT ---
GROUND_TRUTH_FILE = "ground_truth.txt"
SCHEDULE_FILE = "hypergraphs.json"
SCHEDULE_TEXT_FILE = "hypergraphs.txt"
SUMMARY_FILE = "discovery_summary.txt"
NORM_STATS_FILE = "norm_stats.txt"
REPORT_FILE = "eval_report.txt"
REPORT_CSV_FILE = "eval_report.csv"


def checkpoint_file(seed: int) -> str:
    return f"checkpoint_seed{seed}.bin"


def training_log_file(seed: int) -> str:
    return f"training_log_seed{seed}.csv"


def _write(path: str, text: str):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


@dataclass
class PreparedData:
    """Normalized calendar plus everything derived from the raw panel."""
    panel: AssetPanel
    parts: tuple
    regime: pd.Series
    stats: NormStats
    split: TimeSplit


def prepare_data(cfg: RunConfig) -> PreparedData:
    raw = load_panel_csvs(cfg.data_path(), cfg.vol_window, cfg.log_returns)
    if raw.index_return is None:
        raise PanelDataError("index.csv is required for regime labels")
    regime = regime_label(raw.index_return)
    ranges = cfg.split_ranges()
    split = TimeSplit(ranges["train"], ranges["valid"], ranges["test"])
    train_raw, valid_raw, test_raw = temporal_split(raw, split)
    stats = compute_norm_stats(train_raw)
    parts = tuple(znormalize(p, stats) for p in (train_raw, valid_raw, test_raw))
    print(f"   📊 Split: train={parts[0].n_days} valid={parts[1].n_days} test={parts[2].n_days} days")
    return PreparedData(concat_panels(*parts), parts, regime, stats, split)


def load_schedule(cfg: RunConfig) -> GraphSchedule:
    path = os.path.join(cfg.out_dir, SCHEDULE_FILE)
    if not os.path.exists(path):
        raise ModelError(f"no hypergraph schedule at {path}; run `discover` first")
    return GraphSchedule.load(path)


# --- COMMANDS ---

def cmd_generate(cfg: RunConfig):
    """Synthetic market panel with planted news -> sentiment -> return structure."""
    seed = cfg.seeds[0]
    spec = planted_market_spec(
        cfg.num_assets, length=cfg.length, seed=int_seed_for(seed, "data"),
        max_lag=cfg.max_lag, cross_edges=cfg.cross_edges, noise_stdev=cfg.noise_stdev,
    )
    if cfg.break_day is not None:
        names = spec.names()
        col = {n: i for i, n in enumerate(names)}
        # after the break the cross-asset edges are replaced by a single new one
        chains = [e for e in spec.edges if not names[e.source].startswith("return:")]
        last = f"return:A{cfg.num_assets - 1}"
        spec = plant_regime_shift(spec, cfg.break_day, chains + [PlantedEdge(col[last], 1, col["return:A0"], 0.3)])
    values, truth = gen_var_process(spec, start_date=cfg.start_date)
    frames = market_frames(values, seed=int_seed_for(seed, "data"))
    data_dir = cfg.data_path()
    save_raw_csvs(data_dir, frames["prices"], frames["volume"], frames["sentiment"], frames["index"], frames["news"])
    os.makedirs(cfg.out_dir, exist_ok=True)
    _write(os.path.join(cfg.out_dir, GROUND_TRUTH_FILE), truth.to_text())
    print(f"✅ Generated {len(values)} days x {cfg.num_assets} assets -> {data_dir}")
    print(f"   📦 {len(truth.edges)} planted edges -> {GROUND_TRUTH_FILE}")


def cmd_discover(cfg: RunConfig):
    data = prepare_data(cfg)
    window = min(cfg.window_length, data.panel.n_days)
    graphs = sliding_window_update(
        data.panel, window, cfg.stride, cfg.max_lag, cfg.alpha, cfg.prune_minimal, progress=True,
    )
    schedule = GraphSchedule(graphs)
    os.makedirs(cfg.out_dir, exist_ok=True)
    schedule.save(os.path.join(cfg.out_dir, SCHEDULE_FILE))
    _write(os.path.join(cfg.out_dir, SCHEDULE_TEXT_FILE), schedule.to_text())
    summary = schedule.summary()
    _write(os.path.join(cfg.out_dir, SUMMARY_FILE), summary)
    print(summary, end="")
    debug_dump("discovery_summary", {"windows": [g.to_dict() for g in schedule.graphs]})

    truth_path = os.path.join(cfg.out_dir, GROUND_TRUTH_FILE)
    if os.path.exists(truth_path):
        with open(truth_path, encoding="utf-8") as f:
            planted = GroundTruthGraph.from_text(f.read())
        truth = planted.restrict("return:")
        # indirect chains within max_lag are real Granger causes too
        reachable = planted.closure(cfg.max_lag).restrict("return:").pairs()
        found = set().union(*(g.edge_pairs() for g in schedule.graphs)) if schedule.graphs else set()
        precision, recall = truth.recovery(found, reachable)
        print(tpl.RECOVERY_LINE.format(precision=precision, recall=recall,
                                       planted=len(truth.pairs()), found=len(found)))
    print(f"✅ {len(schedule)} hypergraph windows -> {SCHEDULE_FILE}")


def cmd_train(cfg: RunConfig):
    data = prepare_data(cfg)
    schedule = load_schedule(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    data.stats.save(os.path.join(cfg.out_dir, NORM_STATS_FILE))
    nodes, assets = panel_nodes(data.panel, cfg.max_lag)
    for seed in cfg.seeds:
        mc = cfg.model_config(seed)
        print(f"\n🏃 Training seed {seed}: {len(nodes)} nodes, task={cfg.task}")
        started = time.perf_counter()
        state = init_state(nodes, assets, mc)
        state, log = train(state, data.parts[:2], schedule, mc, cfg.task, data.regime, progress=True)
        save_checkpoint(state, os.path.join(cfg.out_dir, checkpoint_file(seed)))
        _write(os.path.join(cfg.out_dir, training_log_file(seed)), log.to_csv())
        best = log.records[log.best_epoch]
        print(f"   ✅ Seed {seed}: best epoch {log.best_epoch} valid={best.valid_loss:.6f} "
              f"({time.perf_counter() - started:.1f}s)")


def cmd_evaluate(cfg: RunConfig):
    data = prepare_data(cfg)
    schedule = load_schedule(cfg)
    period = (cfg.test_start, cfg.test_end)
    reports = []
    for seed in cfg.seeds:
        state = load_checkpoint(os.path.join(cfg.out_dir, checkpoint_file(seed)))
        # evaluation-time input noise comes from this run, not from the checkpoint
        config = replace(state.config, input_noise=cfg.input_noise)
        report = evaluate(state, data.panel, schedule, config, period=period,
                          regime=data.regime, stats=data.stats, seed=seed, progress=True)
        report.per_day.to_csv(os.path.join(cfg.out_dir, f"eval_per_day_seed{seed}.csv"),
                              index=False, float_format="%.17g")
        reports.append(report)
    combined = combine_reports(reports)
    _write(os.path.join(cfg.out_dir, REPORT_FILE), combined.to_table())
    _write(os.path.join(cfg.out_dir, REPORT_CSV_FILE), combined.to_csv())
    debug_dump("eval_report", {"seeds": combined.seeds, "metrics": combined.metrics(), "stdev": combined.stdev})
    print(combined.to_table(), end="")
    print(f"✅ Evaluation over {combined.n_days} test days -> {REPORT_FILE}")


def cmd_predict(cfg: RunConfig, date: str, asset: Optional[str] = None, top: int = 10):
    schedule = load_schedule(cfg)
    day = pd.Timestamp(date)
    graph_index = schedule.index_for(day)
    data = prepare_data(cfg)
    seed = cfg.seeds[0]
    state = load_checkpoint(os.path.join(cfg.out_dir, checkpoint_file(seed)))
    if day not in data.panel.dates:
        raise ModelError(f"{day.date()} is not a trading day of the panel")
    row = data.panel.dates.get_loc(day)
    builder = WindowBuilder(data.panel, state.nodes, state.config, data.regime)
    if row < builder.tau - 1:
        raise ModelError(f"{day.date()} has fewer than {builder.tau} days of history")
    graph = schedule.graphs[graph_index]
    batch = builder.batch([row], build_mask(graph, state.nodes, state.config.use_causal_mask), graph)
    out = forward(state, batch)
    mean = data.stats.mean["return"].reindex(state.assets).to_numpy()
    sd = data.stats.stdev["return"].reindex(state.assets).to_numpy()
    preds = out.returns.numpy()[0] * sd + mean
    bull = 1.0 / (1.0 + np.exp(-float(out.regime_logits[0])))

    asset = asset or state.assets[0]
    lines = [tpl.FORECAST_HEADER.format(date=day.date(), window=graph.window_text())]
    lines += [f"  {a:<12} {p:+.6f}" for a, p in zip(state.assets, preds)]
    lines.append(f"  P(bull regime) = {bull:.4f}")
    layer = None
    rank = 0
    for lay, node, weight in attention_path(state, batch, asset, top):
        if lay != layer:
            layer, rank = lay, 0
            lines.append(tpl.ATTENTION_PATH_HEADER.format(asset=asset, layer=lay))
        rank += 1
        lines.append(tpl.ATTENTION_PATH_ROW.format(rank=rank, node=node, weight=weight))
    text = "\n".join(lines) + "\n"
    _write(os.path.join(cfg.out_dir, f"forecast_{day.date()}.txt"), text)
    print(text, end="")


# --- ARGUMENTS ---

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="sectioned key=value run file (all keys optional)")
    common.add_argument("--seed", type=int, action="append",
                        help="top-level seed; repeat for several seeds (default: CSHT_SEED or 0)")
    common.add_argument("--out", help=f"output directory (default: CSHT_OUT_DIR or {Config.OUT_DIR!r})")
    common.add_argument("--task", choices=("regression", "classification", "both"), help="training objective (default: both)")
    common.add_argument("--no-causal-mask", action="store_true", help="ablation: attend to every node (default: masked)")
    common.add_argument("--no-spherical", action="store_true",
                        help="ablation: scaled dot-product instead of angular attention (default: spherical, lambda=10)")
    common.add_argument("--input-noise", type=float, metavar="SIGMA",
                        help="Gaussian noise on sentiment/news inputs during training (default: 0.0)")
    common.add_argument("--epochs", type=int, help="maximum training epochs (default: 100, patience 10)")

    parser = argparse.ArgumentParser(
        prog="csht",
        description="Causal sphere hypergraph forecaster: Granger hyperedges (max lag 5, FDR 0.01), "
                    "2-layer 4-head angular attention (width 64, lambda 10), lr 1e-4, batch 32.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic panel and its planted edges")
    sub.add_parser("discover", parents=[common], help="sliding-window Granger hypergraphs (window 504, stride 126)")
    sub.add_parser("train", parents=[common], help="train one model per seed")
    sub.add_parser("evaluate", parents=[common], help="MAE, regime accuracy, NDCG@10 and causal alignment on the test split")
    predict = sub.add_parser("predict", parents=[common], help="next-day forecasts and an attention path")
    predict.add_argument("--date", required=True, help="last observed trading day (YYYY-MM-DD)")
    predict.add_argument("--asset", help="asset whose attention path is reported (default: first asset)")
    return parser


def config_from_args(args) -> RunConfig:
    overrides = {
        "out_dir": args.out,
        "seeds": args.seed,
        "task": args.task,
        "epochs": args.epochs,
        "input_noise": args.input_noise,
        "use_causal_mask": False if args.no_causal_mask else None,
        "use_spherical_attention": False if args.no_spherical else None,
    }
    return load_run_config(args.config, overrides)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    torch.use_deterministic_algorithms(True)
    try:
        cfg = config_from_args(args)
        print("=" * 60)
        print(f"🚀 CSHT {args.command.upper()}: {time.strftime('%Y-%m-%d %H:%M:%S')}")
        print("=" * 60)
        if args.command == "generate":
            cmd_generate(cfg)
        elif args.command == "discover":
            cmd_discover(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "evaluate":
            cmd_evaluate(cfg)
        elif args.command == "predict":
            cmd_predict(cfg, args.date, args.asset)
    except ScheduleError as e:
        print(f"❌ {e}", file=sys.stderr)
        return 2
    except PipelineError as e:
        print(f"❌ {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
