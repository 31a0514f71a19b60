"""Seeded VAR panels with planted lagged causal structure.

Noise is i.i.d. Gaussian drawn from numpy's PCG64 bit generator seeded with
``numpy.random.SeedSequence(seed)``; that pairing is the portable contract for
reproducing a panel from its spec.
"""
from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from errors import SyntheticSpecError
from run_config import INDEX_ID

BURN_IN = 200
STABILITY_TOL = 1e-8
DETECTABILITY_FLOOR = 0.1

# Export scales for the market view (z-scale process -> price-like units)
RETURN_SCALE = 0.01
SENTIMENT_SCALE = 0.25


@dataclass(frozen=True)
class PlantedEdge:
    source: int
    lag: int
    target: int
    coefficient: float


@dataclass
class PlantedSpec:
    num_series: int
    max_lag: int
    edges: List[PlantedEdge]
    noise_stdev: Union[float, Sequence[float]] = 1.0
    length: int = 2000
    seed: int = 0
    series_names: Optional[List[str]] = None
    detectability_floor: float = DETECTABILITY_FLOOR
    # piecewise regime: edges_after apply from break_day on
    break_day: Optional[int] = None
    edges_after: Optional[List[PlantedEdge]] = None

    def names(self) -> List[str]:
        if self.series_names is not None:
            return list(self.series_names)
        return [f"return:S{i}" for i in range(self.num_series)]

    def noise_vector(self) -> np.ndarray:
        sd = np.broadcast_to(np.asarray(self.noise_stdev, dtype=float), (self.num_series,)).copy()
        if (sd < 0).any():
            raise SyntheticSpecError("noise stdev must be non-negative")
        return sd


@dataclass(frozen=True)
class GroundTruthGraph:
    """Directed (source series, lag) -> target series triples."""
    edges: FrozenSet[Tuple[str, int, str]]

    def pairs(self) -> set:
        return {(s, t) for s, _, t in self.edges}

    def restrict(self, target_prefix: str) -> "GroundTruthGraph":
        return GroundTruthGraph(frozenset(e for e in self.edges if e[2].startswith(target_prefix)))

    def closure(self, max_lag: int) -> "GroundTruthGraph":
        """Chains of planted edges whose summed lag is at most max_lag, kept at their shortest lag.

        A per-source lag-block test sees every such chain, so these are the
        pairs discovery may legitimately report. Self pairs are left out.
        """
        children: Dict[str, List[Tuple[int, str]]] = {}
        for s, k, t in self.edges:
            children.setdefault(s, []).append((k, t))
        edges = set()
        for origin in children:
            best: Dict[str, int] = {}
            frontier = [(0, origin)]
            while frontier:
                lag, node = frontier.pop()
                for k, t in children.get(node, []):
                    total = lag + k
                    if total > max_lag or best.get(t, max_lag + 1) <= total:
                        continue
                    best[t] = total
                    frontier.append((total, t))
            edges.update((origin, lag, t) for t, lag in best.items() if t != origin)
        return GroundTruthGraph(frozenset(edges))

    def recovery(self, found_pairs: set, admissible: Optional[set] = None) -> Tuple[float, float]:
        """(precision, recall) of discovered (source, target) pairs; empty sets score 1.0.

        Recall is measured on the planted pairs; precision counts a find as correct
        when it is planted or in ``admissible`` (e.g. the pairs of ``closure``).
        """
        truth = self.pairs()
        found = set(found_pairs)
        allowed = truth | set(admissible or ())
        precision = len(found & allowed) / len(found) if found else 1.0
        recall = len(found & truth) / len(truth) if truth else 1.0
        return precision, recall

    def to_text(self) -> str:
        return "".join(f"{s} lag={k} -> {t}\n" for s, k, t in sorted(self.edges))

    @classmethod
    def from_text(cls, text: str) -> "GroundTruthGraph":
        edges = set()
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            left, target = line.split("->")
            source, lag = left.split()
            edges.add((source, int(lag.split("=")[1]), target.strip()))
        return cls(frozenset(edges))


# --- STABILITY ---

def companion_matrix(num_series: int, max_lag: int, edges: Sequence[PlantedEdge]) -> np.ndarray:
    n, p = num_series, max_lag
    comp = np.zeros((n * p, n * p))
    for e in edges:
        comp[e.target, (e.lag - 1) * n + e.source] += e.coefficient
    if p > 1:
        comp[n:, :-n] = np.eye(n * (p - 1))
    return comp


def spectral_radius(matrix: np.ndarray) -> float:
    if matrix.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(matrix))))


def _check_edges(spec: PlantedSpec, edges: Sequence[PlantedEdge], label: str):
    for e in edges:
        if not (0 <= e.source < spec.num_series and 0 <= e.target < spec.num_series):
            raise SyntheticSpecError(f"{label} edge {e} references an unknown series")
        if not 1 <= e.lag <= spec.max_lag:
            raise SyntheticSpecError(f"{label} edge {e} has lag outside 1..{spec.max_lag}")
        if abs(e.coefficient) < spec.detectability_floor:
            raise SyntheticSpecError(
                f"{label} edge {e} coefficient below the detectability floor {spec.detectability_floor}"
            )
    rho = spectral_radius(companion_matrix(spec.num_series, spec.max_lag, edges))
    if rho >= 1.0 - STABILITY_TOL:
        raise SyntheticSpecError(f"{label} coefficients are unstable (spectral radius {rho:.6f} >= 1)")


def validate_spec(spec: PlantedSpec):
    if spec.num_series < 1 or spec.max_lag < 1 or spec.length < 1:
        raise SyntheticSpecError("num_series, max_lag and length must be positive")
    if spec.series_names is not None and len(spec.series_names) != spec.num_series:
        raise SyntheticSpecError("series_names must name every series")
    spec.noise_vector()
    _check_edges(spec, spec.edges, "pre-break" if spec.break_day is not None else "planted")
    if spec.break_day is not None:
        if not spec.max_lag < spec.break_day < spec.length:
            raise SyntheticSpecError(f"break day {spec.break_day} must lie in ({spec.max_lag}, {spec.length})")
        _check_edges(spec, spec.edges_after or [], "post-break")


def _lag_tensor(spec: PlantedSpec, edges: Sequence[PlantedEdge]) -> np.ndarray:
    coef = np.zeros((spec.max_lag, spec.num_series, spec.num_series))
    for e in edges:
        coef[e.lag - 1, e.target, e.source] += e.coefficient
    return coef


# --- GENERATION ---

def gen_var_process(spec: PlantedSpec, start_date: str = "2018-01-01") -> Tuple[pd.DataFrame, GroundTruthGraph]:
    """Simulates x_t = sum_k A_k x_{t-k} + e_t; returns (days x series frame, planted graph)."""
    validate_spec(spec)
    n, p = spec.num_series, spec.max_lag
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(spec.seed)))
    total = BURN_IN + spec.length
    noise = rng.standard_normal((total, n)) * spec.noise_vector()

    before = _lag_tensor(spec, spec.edges)
    after = _lag_tensor(spec, spec.edges_after or []) if spec.break_day is not None else before
    switch = BURN_IN + spec.break_day if spec.break_day is not None else total

    x = np.zeros((total + p, n))
    for t in range(total):
        coef = before if t < switch else after
        # history[k] = x_{t-1-k}
        history = x[t + p - 1::-1][:p] if t + p - 1 >= 0 else x[:0]
        x[t + p] = np.einsum("kij,kj->i", coef, history) + noise[t]

    values = x[p + BURN_IN:]
    dates = pd.bdate_range(start=start_date, periods=spec.length)
    frame = pd.DataFrame(values, index=dates, columns=spec.names())
    return frame, ground_truth(spec)


def ground_truth(spec: PlantedSpec, after_break: bool = False) -> GroundTruthGraph:
    names = spec.names()
    edges = spec.edges_after if after_break and spec.break_day is not None else spec.edges
    return GroundTruthGraph(frozenset((names[e.source], e.lag, names[e.target]) for e in (edges or [])))


def plant_regime_shift(spec: PlantedSpec, break_day: int, new_edges: Sequence[PlantedEdge]) -> PlantedSpec:
    """Spec whose process uses spec.edges before break_day and new_edges from it on."""
    shifted = replace(spec, break_day=int(break_day), edges_after=list(new_edges))
    validate_spec(shifted)
    return shifted


# --- MARKET VIEW ---

def planted_market_spec(
    num_assets: int,
    length: int = 2000,
    seed: int = 0,
    max_lag: int = 5,
    cross_edges: int = 3,
    noise_stdev: float = 1.0,
    with_news: bool = True,
) -> PlantedSpec:
    """news_i -> sentiment_i -> return_i chains plus a few cross-asset return edges."""
    modalities = ["news", "sentiment", "return"] if with_news else ["sentiment", "return"]
    names = [f"{m}:A{i}" for i in range(num_assets) for m in modalities]
    col = {name: j for j, name in enumerate(names)}
    edges = []
    for i in range(num_assets):
        if with_news:
            edges.append(PlantedEdge(col[f"news:A{i}"], 1, col[f"sentiment:A{i}"], 0.5))
        edges.append(PlantedEdge(col[f"sentiment:A{i}"], 1, col[f"return:A{i}"], 0.6))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 7])))
    if num_assets > 1:
        for _ in range(cross_edges):
            src, dst = rng.choice(num_assets, size=2, replace=False)
            lag = int(rng.integers(1, max_lag + 1))
            edges.append(PlantedEdge(col[f"return:A{src}"], lag, col[f"return:A{dst}"], 0.3))
    return PlantedSpec(
        num_series=len(names), max_lag=max_lag, edges=edges, noise_stdev=noise_stdev,
        length=length, seed=seed, series_names=names,
    )


def market_frames(values: pd.DataFrame, seed: int = 0) -> Dict[str, pd.DataFrame]:
    """Turns a generated market process into raw price/volume/sentiment/news/index frames."""
    assets = sorted({c.split(":", 1)[1] for c in values.columns}, key=lambda a: (len(a), a))
    ret = pd.DataFrame({a: values[f"return:{a}"] * RETURN_SCALE for a in assets})
    # leading day at the base price so compute_returns recovers every generated return
    start = values.index[0] - pd.tseries.offsets.BDay(1)
    dates = pd.DatetimeIndex([start]).append(values.index)
    prices = pd.DataFrame(100.0, index=dates, columns=assets)
    prices.iloc[1:] = 100.0 * np.cumprod(1.0 + ret.to_numpy(), axis=0)

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 11])))
    volume = pd.DataFrame(
        np.round(1e6 * np.exp(0.2 * rng.standard_normal((len(dates), len(assets))))),
        index=dates, columns=assets,
    )
    sentiment = pd.DataFrame(
        {a: np.clip(values[f"sentiment:{a}"] * SENTIMENT_SCALE, -1.0, 1.0) for a in assets}
        if f"sentiment:{assets[0]}" in values.columns else {a: 0.0 for a in assets},
        index=values.index,
    )
    news = None
    if f"news:{assets[0]}" in values.columns:
        news = pd.DataFrame({a: values[f"news:{a}"] for a in assets}, index=values.index)
    index_prices = pd.Series(
        100.0 * np.concatenate([[1.0], np.cumprod(1.0 + ret.mean(axis=1).to_numpy())]),
        index=dates, name=INDEX_ID,
    )
    return {"prices": prices, "volume": volume, "sentiment": sentiment, "news": news, "index": index_prices}
