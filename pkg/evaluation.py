"""Test-split metrics: MAE, regime accuracy, NDCG@k and causal alignment."""
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

import report_templates as tpl
from csht_core import (
    ModelConfig, ModelState, WindowBatch, WindowBuilder,
    causal_alignment, forward, panel_nodes,
)
from errors import EvaluationError, ScheduleError
from granger import GraphSchedule
from ingest import AssetPanel, NormStats
from run_config import NDCG_K, REGIME_HORIZON, Config, rng_for

UNDEFINED = float("nan")
METRICS = ("mae", "regime_accuracy", "ndcg", "causal_alignment")


# --- METRICS ---

def mae(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=float)
    t = np.asarray(targets, dtype=float)
    if p.shape != t.shape:
        raise EvaluationError(f"prediction shape {p.shape} != target shape {t.shape}")
    if p.size == 0:
        raise EvaluationError("mae of an empty input")
    return float(np.mean(np.abs(p - t)))


def regime_accuracy(predicted, true) -> float:
    p = np.asarray(predicted)
    t = np.asarray(true)
    if p.shape != t.shape:
        raise EvaluationError(f"label shape {p.shape} != {t.shape}")
    if p.size == 0:
        raise EvaluationError("accuracy of an empty input")
    if not (np.isin(p, (0, 1)).all() and np.isin(t, (0, 1)).all()):
        raise EvaluationError("regime labels must be binary")
    return float(np.mean(p == t))


def _tie_rank(ids: Optional[Sequence], n: int) -> np.ndarray:
    if ids is None:
        return np.arange(n)
    return np.unique(np.asarray(ids), return_inverse=True)[1].reshape(-1)


def rank_order(scores, ids: Optional[Sequence] = None) -> np.ndarray:
    """Descending by score; ties go to the smaller asset id."""
    scores = np.asarray(scores, dtype=float)
    return np.lexsort((_tie_rank(ids, len(scores)), -scores))


def top_k_relevance(realized, k: int = NDCG_K, ids: Optional[Sequence] = None) -> np.ndarray:
    """Binary relevance: membership in the realized top-k."""
    rel = np.zeros(len(realized))
    rel[rank_order(realized, ids)[:k]] = 1.0
    return rel


def ndcg_at_k(scores, relevance, k: int = NDCG_K, ids: Optional[Sequence] = None) -> float:
    """DCG of the top-k by predicted score (gain rel / log2(rank + 1)) over the ideal DCG.

    Returns NaN when no asset is relevant.
    """
    scores = np.asarray(scores, dtype=float)
    rel = np.asarray(relevance, dtype=float)
    if scores.shape != rel.shape or scores.ndim != 1:
        raise EvaluationError("scores and relevance must be equal-length vectors")
    if not 1 <= k <= len(scores):
        raise EvaluationError(f"k={k} must lie in 1..{len(scores)}")
    if not rel.any():
        return UNDEFINED
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    dcg = float(np.sum(rel[rank_order(scores, ids)[:k]] * discounts))
    ideal = float(np.sum(np.sort(rel)[::-1][:k] * discounts))
    return dcg / ideal


# --- FORECASTERS ---

@dataclass
class Forecast:
    returns: np.ndarray          # [batch, assets]
    regime_logits: np.ndarray    # [batch]
    alignment: float = UNDEFINED


class ModelForecaster:
    """Adapts a trained ModelState to the forecast(batch) interface."""

    def __init__(self, state: ModelState):
        self.state = state
        self.nodes = state.nodes
        self.config = state.config

    def forecast(self, batch: WindowBatch) -> Forecast:
        out = forward(self.state, batch)
        return Forecast(
            returns=out.returns.numpy(),
            regime_logits=out.regime_logits.numpy(),
            alignment=causal_alignment(out.attention, batch.graph, self.nodes),
        )


# --- REPORT ---

def _fmt(v: float) -> str:
    return "nan" if v is None or math.isnan(v) else f"{v:.6f}"


@dataclass
class EvalReport:
    mae: float
    regime_accuracy: float
    ndcg: float
    causal_alignment: float
    k: int = NDCG_K
    n_days: int = 0
    scope: str = "all"
    per_window: List[Dict] = field(default_factory=list)
    seeds: List[int] = field(default_factory=list)
    stdev: Optional[Dict[str, float]] = None
    per_day: Optional[pd.DataFrame] = None

    def metrics(self) -> Dict[str, float]:
        return {"mae": self.mae, "regime_accuracy": self.regime_accuracy,
                "ndcg": self.ndcg, "causal_alignment": self.causal_alignment}

    def to_table(self) -> str:
        lines = [tpl.EVAL_REPORT_HEADER.format(k=self.k, horizon=REGIME_HORIZON)]
        if self.seeds:
            lines.append(f"# seeds: {','.join(str(s) for s in self.seeds)}\n")
        lines.append(tpl.EVAL_TABLE_HEADER.format(
            scope="scope", mae="mae", acc="accuracy", ndcg=f"ndcg@{self.k}", align="alignment") + "\n")

        def cell(metric: str, value: float) -> str:
            if self.stdev is None:
                return _fmt(value)
            return f"{_fmt(value)}±{_fmt(self.stdev[metric])}"

        m = self.metrics()
        lines.append(tpl.EVAL_TABLE_ROW.format(
            scope=self.scope, mae=cell("mae", m["mae"]), acc=cell("regime_accuracy", m["regime_accuracy"]),
            ndcg=cell("ndcg", m["ndcg"]), align=cell("causal_alignment", m["causal_alignment"])) + "\n")
        for row in self.per_window:
            lines.append(tpl.EVAL_TABLE_ROW.format(
                scope=f"window {row['window']}", mae=_fmt(row["mae"]), acc=_fmt(row["regime_accuracy"]),
                ndcg=_fmt(row["ndcg"]), align=_fmt(row["causal_alignment"])) + "\n")
        return "".join(lines)

    def to_csv(self) -> str:
        cols = ["scope", "days", *METRICS]
        if self.stdev is not None:
            cols += [f"{m}_stdev" for m in METRICS]
        rows = [",".join(cols)]
        head = [self.scope, str(self.n_days)] + [_fmt(v) for v in self.metrics().values()]
        if self.stdev is not None:
            head += [_fmt(self.stdev[m]) for m in METRICS]
        rows.append(",".join(head))
        for w in self.per_window:
            row = [f"window {w['window']}", str(w["days"])] + [_fmt(w[m]) for m in METRICS]
            if self.stdev is not None:
                row += [""] * len(METRICS)
            rows.append(",".join(row))
        return "\n".join(rows) + "\n"

    def validate(self):
        if not (math.isnan(self.mae) or self.mae >= 0):
            raise EvaluationError(f"mae {self.mae} is negative")
        for name in ("regime_accuracy", "ndcg", "causal_alignment"):
            v = getattr(self, name)
            if not (math.isnan(v) or -1e-12 <= v <= 1 + 1e-12):
                raise EvaluationError(f"{name} {v} outside [0, 1]")
        return self


def _mean(values) -> float:
    values = np.asarray([v for v in values if not math.isnan(v)], dtype=float)
    return float(values.mean()) if values.size else UNDEFINED


def evaluate(model, panel: AssetPanel, schedule: GraphSchedule, config: Optional[ModelConfig] = None,
             period: Optional[Tuple] = None, regime: Optional[pd.Series] = None,
             stats: Optional[NormStats] = None, k: Optional[int] = None, seed: Optional[int] = None,
             progress: bool = False) -> EvalReport:
    """Scores one-step forecasts for every target day in ``period``.

    ``panel`` is the normalized calendar the forecasts read from (history before
    the period may be used as lags). ``model`` is a ModelState or any object with
    ``forecast(batch) -> Forecast``.
    """
    forecaster = ModelForecaster(model) if isinstance(model, ModelState) else model
    config = config or getattr(forecaster, "config", None) or ModelConfig()
    nodes = getattr(forecaster, "nodes", None) or panel_nodes(panel, config.max_lag)[0]
    k = min(k or NDCG_K, len(panel.assets))

    builder = WindowBuilder(panel, nodes, config, regime)
    start, end = period if period is not None else (None, None)
    rows = builder.anchors(start, end)
    if not len(rows):
        raise EvaluationError("no evaluation days in the requested period")
    # input_noise > 0 scores the robustness variant: perturbed sentiment/news inputs
    noise_rng = rng_for(config.seed if seed is None else seed, "noise") if config.input_noise > 0 else None
    try:
        batches = builder.batches(rows, schedule, config.batch_size, noise_rng=noise_rng)
    except ScheduleError as e:
        raise ScheduleError(f"evaluation days not covered by the graph schedule ({e.message})")

    ret_mean = stats.mean["return"].reindex(panel.assets).to_numpy() if stats is not None else 0.0
    ret_sd = stats.stdev["return"].reindex(panel.assets).to_numpy() if stats is not None else 1.0
    records = []
    for batch in tqdm(batches, desc="Evaluating", disable=not progress or Config.QUIET):
        fc = forecaster.forecast(batch)
        preds = np.asarray(fc.returns, dtype=float) * ret_sd + ret_mean
        targets = batch.return_targets.numpy() * ret_sd + ret_mean
        window = batch.graph.window_text() if batch.graph is not None else "-"
        for i, day in enumerate(batch.dates):
            label = float(batch.regime_targets[i])
            realized = targets[i]
            records.append({
                "date": day,
                "window": window,
                "mae": mae(preds[i], realized),
                "regime_correct": UNDEFINED if math.isnan(label) else float((fc.regime_logits[i] > 0) == (label == 1.0)),
                "ndcg": ndcg_at_k(preds[i], top_k_relevance(realized, k, panel.assets), k, panel.assets),
                "causal_alignment": fc.alignment,
            })
    per_day = pd.DataFrame(records).sort_values("date", kind="stable").reset_index(drop=True)

    per_window = []
    for window, grp in per_day.groupby("window", sort=True):
        per_window.append({
            "window": window, "days": len(grp), "mae": float(grp["mae"].mean()),
            "regime_accuracy": _mean(grp["regime_correct"]), "ndcg": _mean(grp["ndcg"]),
            "causal_alignment": _mean(grp["causal_alignment"]),
        })
    scope = "all" if period is None else f"{pd.Timestamp(start).date()}..{pd.Timestamp(end).date()}"
    return EvalReport(
        mae=float(per_day["mae"].mean()),
        regime_accuracy=_mean(per_day["regime_correct"]),
        ndcg=_mean(per_day["ndcg"]),
        causal_alignment=_mean(per_day["causal_alignment"]),
        k=k, n_days=len(per_day), scope=scope, per_window=per_window,
        seeds=[] if seed is None else [seed], per_day=per_day,
    ).validate()


def combine_reports(reports: Sequence[EvalReport]) -> EvalReport:
    """Mean and sample stdev of each metric across seeds."""
    if not reports:
        raise EvaluationError("no reports to combine")
    values = {m: [r.metrics()[m] for r in reports] for m in METRICS}
    stdev = {}
    for m, vs in values.items():
        clean = [v for v in vs if not math.isnan(v)]
        stdev[m] = float(np.std(clean, ddof=1)) if len(clean) > 1 else (0.0 if clean else UNDEFINED)
    windows = pd.DataFrame([w for r in reports for w in r.per_window])
    per_window = []
    if not windows.empty:
        for window, grp in windows.groupby("window", sort=True):
            per_window.append({"window": window, "days": int(grp["days"].iloc[0]),
                               **{m: _mean(grp[m]) for m in METRICS}})
    return EvalReport(
        mae=_mean(values["mae"]), regime_accuracy=_mean(values["regime_accuracy"]),
        ndcg=_mean(values["ndcg"]), causal_alignment=_mean(values["causal_alignment"]),
        k=reports[0].k, n_days=reports[0].n_days, scope=reports[0].scope, per_window=per_window,
        seeds=[s for r in reports for s in r.seeds], stdev=stdev,
    ).validate()
