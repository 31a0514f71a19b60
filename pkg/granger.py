import json
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import betainc
from tqdm import tqdm

from errors import GrangerError, InsufficientDataError, RankDeficiencyError, ScheduleError
from ingest import AssetPanel, NODE_MODALITIES
from run_config import MAX_LAG, FDR_ALPHA, INDEX_ID, Config
import report_templates as tpl

MIN_EXTRA_OBS = 10
RANK_TOL = 1e-10

PanelLike = Union[pd.DataFrame, AssetPanel]

# --- DOMAIN ENTITIES ---

@dataclass(frozen=True, order=True)
class LaggedNode:
    """One time-shifted variable: (modality, series, lag). Targets have lag 0."""
    modality: str
    series_id: str
    lag: int

    def __post_init__(self):
        if self.modality not in NODE_MODALITIES:
            raise GrangerError(f"unknown modality {self.modality!r}")
        if self.lag < 0:
            raise GrangerError(f"negative lag for {self.modality}:{self.series_id}")

    @property
    def column(self) -> str:
        return f"{self.modality}:{self.series_id}"

    def __str__(self) -> str:
        return f"{self.modality}:{self.series_id}:{self.lag}"

    @classmethod
    def parse(cls, text: str) -> "LaggedNode":
        modality, series_id, lag = text.strip().rsplit(":", 2)
        return cls(modality, series_id, int(lag))

    @classmethod
    def at(cls, column: str, lag: int) -> "LaggedNode":
        modality, series_id = column.split(":", 1)
        return cls(modality, series_id, lag)


@dataclass
class OLSFit:
    target: str
    regressors: List[LaggedNode]
    coefficients: Dict[str, float]
    rss: float
    n_obs: int

    @property
    def n_params(self) -> int:
        return len(self.regressors) + 1


@dataclass
class GrangerTestResult:
    target: LaggedNode
    source_group: FrozenSet[LaggedNode]
    f_statistic: float
    p_value: float
    rss_restricted: float
    rss_full: float
    dof_num: int
    dof_den: int

    def to_dict(self) -> Dict:
        return {
            "target": str(self.target), "sources": sorted(str(n) for n in self.source_group),
            "F": self.f_statistic, "p": self.p_value, "rss_restricted": self.rss_restricted,
            "rss_full": self.rss_full, "dof_num": self.dof_num, "dof_den": self.dof_den,
        }

    @classmethod
    def from_dict(cls, d: Dict) -> "GrangerTestResult":
        return cls(
            LaggedNode.parse(d["target"]), frozenset(LaggedNode.parse(s) for s in d["sources"]),
            float(d["F"]), float(d["p"]), float(d["rss_restricted"]), float(d["rss_full"]),
            int(d["dof_num"]), int(d["dof_den"]),
        )


@dataclass
class Hyperedge:
    parents: FrozenSet[LaggedNode]
    target: LaggedNode
    test: GrangerTestResult
    source_tests: List[GrangerTestResult] = field(default_factory=list)

    def source_columns(self) -> List[str]:
        return sorted({p.column for p in self.parents})


@dataclass
class CausalHypergraph:
    nodes: FrozenSet[LaggedNode]
    hyperedges: List[Hyperedge]
    window_range: Tuple[pd.Timestamp, pd.Timestamp]
    max_lag: int = MAX_LAG
    alpha: float = FDR_ALPHA
    p_values: List[float] = field(default_factory=list)

    def parents(self, target: LaggedNode) -> FrozenSet[LaggedNode]:
        for edge in self.hyperedges:
            if edge.target == target:
                return edge.parents
        return frozenset()

    def edge_pairs(self) -> set:
        """(source column, target column) pairs, lag-free."""
        return {(c, e.target.column) for e in self.hyperedges for c in e.source_columns()}

    def covers(self, date) -> bool:
        date = pd.Timestamp(date)
        return self.window_range[0] <= date <= self.window_range[1]

    def window_text(self) -> str:
        start, end = self.window_range
        return f"{pd.Timestamp(start).date()}..{pd.Timestamp(end).date()}"

    def to_text(self) -> str:
        lines = []
        for e in sorted(self.hyperedges, key=lambda h: h.target):
            lines.append(tpl.HYPEREDGE_LINE.format(
                target=e.target.column,
                parents=", ".join(str(p) for p in sorted(e.parents)),
                F=_fmt_stat(e.test.f_statistic), p=_fmt_stat(e.test.p_value), window=self.window_text(),
            ))
        return "\n".join(lines) + ("\n" if lines else "")

    def to_dict(self) -> Dict:
        return {
            "window": [str(pd.Timestamp(self.window_range[0]).date()), str(pd.Timestamp(self.window_range[1]).date())],
            "max_lag": self.max_lag,
            "alpha": self.alpha,
            "nodes": sorted(str(n) for n in self.nodes),
            "hyperedges": [
                {
                    "target": str(e.target),
                    "parents": sorted(str(p) for p in e.parents),
                    "test": e.test.to_dict(),
                    "source_tests": [t.to_dict() for t in e.source_tests],
                }
                for e in sorted(self.hyperedges, key=lambda h: h.target)
            ],
            "p_values": [float(p) for p in self.p_values],
        }

    @classmethod
    def from_dict(cls, d: Dict) -> "CausalHypergraph":
        return cls(
            nodes=frozenset(LaggedNode.parse(n) for n in d["nodes"]),
            hyperedges=[
                Hyperedge(
                    parents=frozenset(LaggedNode.parse(p) for p in h["parents"]),
                    target=LaggedNode.parse(h["target"]),
                    test=GrangerTestResult.from_dict(h["test"]),
                    source_tests=[GrangerTestResult.from_dict(t) for t in h.get("source_tests", [])],
                )
                for h in d["hyperedges"]
            ],
            window_range=(pd.Timestamp(d["window"][0]), pd.Timestamp(d["window"][1])),
            max_lag=int(d["max_lag"]),
            alpha=float(d["alpha"]),
            p_values=list(d.get("p_values", [])),
        )


def _fmt_stat(v: float) -> str:
    return "inf" if np.isinf(v) else f"{v:.6g}"


# --- DESIGN MATRICES ---

def as_series_frame(panel: PanelLike) -> pd.DataFrame:
    frame = panel.series_frame() if isinstance(panel, AssetPanel) else panel
    for column in frame.columns:
        if ":" not in str(column):
            raise GrangerError(f"series column {column!r} is not of the form modality:series")
    return frame


def _target_column(target: str) -> str:
    return target if ":" in target else f"return:{target}"


def _lagged(values: np.ndarray, lag: int, max_lag: int) -> np.ndarray:
    """Rows t = max_lag..T-1 of the series shifted by `lag`."""
    return values[max_lag - lag: len(values) - lag]


def _design(frame: pd.DataFrame, predictors: Sequence[LaggedNode], max_lag: int) -> np.ndarray:
    n = len(frame) - max_lag
    cols = [np.ones(n)]
    for node in predictors:
        if not 1 <= node.lag <= max_lag:
            raise GrangerError(f"predictor {node} has lag outside 1..{max_lag}")
        if node.column not in frame.columns:
            raise GrangerError(f"predictor {node} is not a panel series")
        cols.append(_lagged(frame[node.column].to_numpy(dtype=float), node.lag, max_lag))
    return np.column_stack(cols)


def _collinear(design: np.ndarray, names: Sequence[str]) -> List[str]:
    bad, kept = [], []
    for j in range(design.shape[1]):
        trial = design[:, kept + [j]]
        if np.linalg.matrix_rank(trial, tol=RANK_TOL * max(1.0, np.abs(trial).max())) < len(kept) + 1:
            bad.append(names[j])
        else:
            kept.append(j)
    return bad


def fit_lagged_ols(panel: PanelLike, target: str, predictors: Iterable[LaggedNode], max_lag: int = MAX_LAG) -> OLSFit:
    """OLS of target_t on an intercept and the lagged predictors, over rows max_lag..T-1."""
    frame = as_series_frame(panel)
    column = _target_column(target)
    if column not in frame.columns:
        raise GrangerError(f"target {column!r} is not a panel series")
    predictors = sorted(set(predictors))
    n_obs = len(frame) - max_lag
    if n_obs <= len(predictors) + 1:
        raise InsufficientDataError(
            f"{n_obs} observations cannot support {len(predictors)} regressors plus intercept"
        )
    X = _design(frame, predictors, max_lag)
    y = frame[column].to_numpy(dtype=float)[max_lag:]
    beta, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if rank < X.shape[1]:
        bad = _collinear(X, ["intercept"] + [str(p) for p in predictors])
        raise RankDeficiencyError(f"design for {column} is rank deficient; collinear: {', '.join(bad)}", bad)
    resid = y - X @ beta
    coefficients = {"intercept": float(beta[0])}
    coefficients.update({str(p): float(b) for p, b in zip(predictors, beta[1:])})
    return OLSFit(column, list(predictors), coefficients, float(resid @ resid), n_obs)


# --- TESTS ---

def f_pvalue(f_stat: float, dof_num: int, dof_den: int) -> float:
    """Upper tail of F(d1, d2) via the regularized incomplete beta function."""
    if np.isinf(f_stat):
        return 0.0
    if f_stat <= 0:
        return 1.0
    x = dof_den / (dof_den + dof_num * f_stat)
    return float(min(1.0, max(0.0, betainc(dof_den / 2.0, dof_num / 2.0, x))))


def _f_from_rss(rss_r: float, rss_f: float, q: int, dof_den: int) -> float:
    if q == 0:
        return 0.0
    gain = max(rss_r - rss_f, 0.0)
    if rss_f <= 0.0:
        return np.inf if gain > 0 else 0.0
    return (gain / q) / (rss_f / dof_den)


def granger_f_test(restricted: OLSFit, full: OLSFit) -> GrangerTestResult:
    if restricted.target != full.target:
        raise GrangerError("restricted and full fits have different targets")
    if restricted.n_obs != full.n_obs:
        raise GrangerError("restricted and full fits use different observations")
    if not set(restricted.regressors) <= set(full.regressors):
        raise GrangerError("restricted regressors must be a subset of the full model's")
    group = frozenset(set(full.regressors) - set(restricted.regressors))
    q = len(group)
    dof_den = full.n_obs - full.n_params
    f_stat = _f_from_rss(restricted.rss, full.rss, q, dof_den)
    return GrangerTestResult(
        target=LaggedNode.at(full.target, 0), source_group=group, f_statistic=float(f_stat),
        p_value=f_pvalue(f_stat, q, dof_den) if q else 1.0,
        rss_restricted=restricted.rss, rss_full=full.rss, dof_num=q, dof_den=dof_den,
    )


def bh_fdr(p_values: Sequence[float], alpha: float) -> List[int]:
    """Benjamini-Hochberg step-up; returns the rejected indices in ascending order."""
    p = np.asarray(list(p_values), dtype=float)
    if p.size == 0:
        return []
    if not 0.0 < alpha < 1.0:
        raise GrangerError(f"alpha must lie in (0, 1), got {alpha}")
    if ((p < 0) | (p > 1) | np.isnan(p)).any():
        raise GrangerError("p-values must lie in [0, 1]")
    order = np.argsort(p, kind="stable")
    m = p.size
    passed = np.flatnonzero(p[order] <= alpha * np.arange(1, m + 1) / m)
    if passed.size == 0:
        return []
    return sorted(int(i) for i in order[: passed[-1] + 1])


# --- DISCOVERY ---

def min_fit_length(max_lag: int) -> int:
    return max_lag + (2 * max_lag + 1) + MIN_EXTRA_OBS


def _block_tests(y: np.ndarray, own: np.ndarray, blocks: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    """rss of [1, own] and rss after adding each source block (n x S x K) in turn."""
    n = len(y)
    R = np.column_stack([np.ones(n), own])
    Q, _ = np.linalg.qr(R)
    e = y - Q @ (Q.T @ y)
    rss_r = float(e @ e)
    S, K = blocks.shape[1], blocks.shape[2]
    flat = blocks.reshape(n, S * K)
    Z = (flat - Q @ (Q.T @ flat)).reshape(n, S, K)
    G = np.einsum("nsk,nsl->skl", Z, Z)
    b = np.einsum("nsk,n->sk", Z, e)
    eig = np.linalg.eigvalsh(G)
    ok = (eig[:, -1] > 0) & (eig[:, 0] > RANK_TOL * eig[:, -1])
    gain = np.full(S, np.nan)
    if ok.any():
        solved = np.linalg.solve(G[ok], b[ok][..., None])[..., 0]
        gain[ok] = np.einsum("sk,sk->s", b[ok], solved)
    rss_f = rss_r - gain
    return rss_r, np.maximum(rss_f, 0.0), ok


def _constant_columns(frame: pd.DataFrame) -> List[str]:
    values = frame.to_numpy(dtype=float)
    return [c for c, sd in zip(frame.columns, values.std(axis=0)) if not sd > 0]


def _joint_result(frame: pd.DataFrame, target: str, own: List[LaggedNode], parents: List[LaggedNode],
                  max_lag: int) -> Optional[GrangerTestResult]:
    try:
        restricted = fit_lagged_ols(frame, target, own, max_lag)
        full = fit_lagged_ols(frame, target, own + parents, max_lag)
    except GrangerError:
        return None
    return granger_f_test(restricted, full)


def _prune_minimal(frame, target, own, sources, max_lag, alpha) -> List[str]:
    """Drops sources whose block is not significant in the joint model."""
    if len(sources) < 2:
        return sources
    kept = []
    blocks = {s: [LaggedNode.at(s, k) for k in range(1, max_lag + 1)] for s in sources}
    everything = [n for s in sources for n in blocks[s]]
    for s in sources:
        others = [n for n in everything if n.column != s]
        result = _joint_result(frame, target, own + others, blocks[s], max_lag)
        if result is None or result.p_value < alpha:
            kept.append(s)
    return kept or sources


def build_hypergraph(
    panel: PanelLike,
    max_lag: int = MAX_LAG,
    alpha: float = FDR_ALPHA,
    prune_minimal: bool = False,
    progress: bool = False,
) -> CausalHypergraph:
    """Per-source lag-block Granger tests for every return target, global BH-FDR, one hyperedge per target."""
    frame = as_series_frame(panel)
    T = len(frame)
    if T < min_fit_length(max_lag):
        raise InsufficientDataError(
            f"panel of {T} days is shorter than the minimum fit length {min_fit_length(max_lag)} for lag {max_lag}"
        )
    constant = set(_constant_columns(frame))
    if constant:
        print(f"   ⚠️ Skipping {len(constant)} degenerate (constant) series: {', '.join(sorted(constant)[:5])}")
    columns = [c for c in frame.columns if c not in constant]
    targets = [c for c in columns if c.startswith("return:") and c != f"return:{INDEX_ID}"]
    values = {c: frame[c].to_numpy(dtype=float) for c in columns}
    lags = {c: np.column_stack([_lagged(values[c], k, max_lag) for k in range(1, max_lag + 1)]) for c in columns}

    pending = []  # (target, source, rss_r, rss_f, dof_den)
    p_values = []
    n = T - max_lag
    q = max_lag
    dof_den = n - (1 + 2 * max_lag)
    for target in tqdm(targets, desc="Granger targets", disable=not progress or Config.QUIET):
        sources = [c for c in columns if c != target]
        if not sources:
            continue
        blocks = np.stack([lags[s] for s in sources], axis=1)
        rss_r, rss_f, ok = _block_tests(values[target][max_lag:], lags[target], blocks)
        for s, rf, good in zip(sources, rss_f, ok):
            if not good:
                print(f"   ⚠️ Skipping {s} -> {target}: collinear lag block")
                continue
            f_stat = _f_from_rss(rss_r, float(rf), q, dof_den)
            pending.append((target, s, rss_r, float(rf)))
            p_values.append(f_pvalue(f_stat, q, dof_den))

    accepted = bh_fdr(p_values, alpha)
    survivors: Dict[str, List[int]] = {}
    for i in accepted:
        survivors.setdefault(pending[i][0], []).append(i)

    nodes = {LaggedNode.at(c, k) for c in columns for k in range(1, max_lag + 1)}
    nodes |= {LaggedNode.at(t, 0) for t in targets}
    hyperedges = []
    for target in targets:
        idx = survivors.get(target)
        if not idx:
            continue
        tnode = LaggedNode.at(target, 0)
        source_tests = []
        for i in idx:
            _, s, rss_r, rss_f = pending[i]
            f_stat = _f_from_rss(rss_r, rss_f, q, dof_den)
            source_tests.append(GrangerTestResult(
                target=tnode, source_group=frozenset(LaggedNode.at(s, k) for k in range(1, max_lag + 1)),
                f_statistic=float(f_stat), p_value=p_values[i], rss_restricted=rss_r, rss_full=rss_f,
                dof_num=q, dof_den=dof_den,
            ))
        sources = sorted(pending[i][1] for i in idx)
        own = [LaggedNode.at(target, k) for k in range(1, max_lag + 1)]
        if prune_minimal:
            sources = _prune_minimal(frame, target, own, sources, max_lag, alpha)
            source_tests = [t for t in source_tests if next(iter(t.source_group)).column in sources]
        parents = [LaggedNode.at(s, k) for s in sources for k in range(1, max_lag + 1)]
        joint = _joint_result(frame, target, own, parents, max_lag) if len(sources) > 1 else None
        if joint is None:
            joint = min(source_tests, key=lambda t: t.p_value)
        hyperedges.append(Hyperedge(frozenset(parents), tnode, joint, source_tests))

    return CausalHypergraph(
        nodes=frozenset(nodes), hyperedges=hyperedges,
        window_range=(pd.Timestamp(frame.index[0]), pd.Timestamp(frame.index[-1])),
        max_lag=max_lag, alpha=alpha, p_values=p_values,
    )


def window_starts(n_days: int, window_length: int, stride: int) -> List[int]:
    starts = list(range(0, n_days - window_length + 1, stride))
    if starts and starts[-1] + window_length < n_days:
        starts.append(n_days - window_length)
    return starts


def sliding_window_update(
    panel: PanelLike,
    window_length: int,
    stride: int,
    max_lag: int = MAX_LAG,
    alpha: float = FDR_ALPHA,
    prune_minimal: bool = False,
    progress: bool = False,
) -> List[CausalHypergraph]:
    """One hypergraph per window position, each fitted on its window only."""
    frame = as_series_frame(panel)
    if stride < 1:
        raise GrangerError("stride must be >= 1")
    if window_length > len(frame):
        raise GrangerError(f"window length {window_length} exceeds the panel length {len(frame)}")
    if window_length < min_fit_length(max_lag):
        raise InsufficientDataError(f"window length {window_length} is below the minimum fit length")
    graphs = []
    for start in tqdm(window_starts(len(frame), window_length, stride), desc="Windows",
                      disable=not progress or Config.QUIET):
        graphs.append(build_hypergraph(frame.iloc[start:start + window_length], max_lag, alpha, prune_minimal))
    return graphs


def sensitivity_sweep(panel: PanelLike, lags=(3, 5, 7), alphas=(0.05, 0.01, 0.001),
                      reference: Tuple[int, float] = (MAX_LAG, FDR_ALPHA)) -> pd.DataFrame:
    """Edge counts and Jaccard overlap with the reference graph over a (lag, alpha) grid."""
    frame = as_series_frame(panel)
    base = build_hypergraph(frame, *reference).edge_pairs()
    rows = []
    for k in lags:
        for a in alphas:
            pairs = build_hypergraph(frame, k, a).edge_pairs()
            union = pairs | base
            rows.append({
                "max_lag": k, "alpha": a, "edges": len(pairs),
                "jaccard": len(pairs & base) / len(union) if union else 1.0,
            })
    return pd.DataFrame(rows)


# --- SCHEDULE ---

class GraphSchedule:
    """Hypergraphs ordered by window start; lookup picks the covering window that ends first."""

    def __init__(self, graphs: Sequence[CausalHypergraph]):
        self.graphs = sorted(graphs, key=lambda g: (g.window_range[0], g.window_range[1]))

    def __len__(self):
        return len(self.graphs)

    def index_for(self, date) -> int:
        """Among the windows covering ``date``, the one that ends first (least data after the date)."""
        date = pd.Timestamp(date)
        hits = [i for i, g in enumerate(self.graphs) if g.covers(date)]
        if not hits:
            raise ScheduleError(f"date {date.date()} is outside every hypergraph window")
        return min(hits, key=lambda i: (self.graphs[i].window_range[1], i))

    def graph_for(self, date) -> CausalHypergraph:
        return self.graphs[self.index_for(date)]

    def save(self, path: str):
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"graphs": [g.to_dict() for g in self.graphs]}, f, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path: str) -> "GraphSchedule":
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
        return cls([CausalHypergraph.from_dict(g) for g in data["graphs"]])

    def to_text(self) -> str:
        return "".join(g.to_text() for g in self.graphs)

    def summary(self) -> str:
        p_all = np.concatenate([np.asarray(g.p_values, dtype=float) for g in self.graphs]) if self.graphs else np.array([])
        counts, edges = np.histogram(p_all, bins=10, range=(0.0, 1.0))
        lines = [tpl.SCHEDULE_SUMMARY_HEADER.format(windows=len(self.graphs), tests=int(p_all.size))]
        for g in self.graphs:
            lines.append(tpl.WINDOW_SUMMARY_LINE.format(
                window=g.window_text(), hyperedges=len(g.hyperedges), pairs=len(g.edge_pairs()),
            ))
        lines.append("p-value histogram:")
        for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
            lines.append(tpl.HISTOGRAM_LINE.format(lo=lo, hi=hi, count=int(c)))
        return "\n".join(lines) + "\n"
