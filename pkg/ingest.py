import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from errors import PanelDataError
from run_config import (
    VOL_WINDOW, REGIME_HORIZON, INDEX_ID,
    PRICE_FILE, VOLUME_FILE, SENTIMENT_FILE, NEWS_FILE, INDEX_FILE,
)

FEATURES = ("return", "volatility", "volume", "sentiment")
OPTIONAL_FEATURES = ("news",)

# Modalities that can act as Granger sources / attention nodes
NODE_MODALITIES = ("news", "sentiment", "return")

DateLike = Union[str, pd.Timestamp]

# --- DOMAIN ENTITIES ---

@dataclass
class AssetPanel:
    """Time-aligned (days x assets) feature matrices plus the market index return."""
    dates: pd.DatetimeIndex
    assets: List[str]
    features: Dict[str, pd.DataFrame]
    index_return: Optional[pd.Series] = None
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.dates.is_monotonic_increasing or self.dates.has_duplicates:
            raise PanelDataError("dates must be strictly increasing without duplicates")
        for name, frame in self.features.items():
            if frame.shape != (len(self.dates), len(self.assets)):
                raise PanelDataError(
                    f"feature {name!r} has shape {frame.shape}, expected {(len(self.dates), len(self.assets))}"
                )
            if not frame.index.equals(self.dates) or list(frame.columns) != list(self.assets):
                raise PanelDataError(f"feature {name!r} is not aligned with the panel index")
            if frame.isna().to_numpy().any():
                raise PanelDataError(f"feature {name!r} contains missing values")
        if self.index_return is not None:
            if len(self.index_return) != len(self.dates) or not self.index_return.index.equals(self.dates):
                raise PanelDataError("index return is not aligned with the panel index")
            if self.index_return.isna().any():
                raise PanelDataError("index return contains missing values")

    @property
    def n_days(self) -> int:
        return len(self.dates)

    def feature(self, name: str) -> pd.DataFrame:
        if name not in self.features:
            raise PanelDataError(f"panel has no feature {name!r}")
        return self.features[name]

    def slice(self, start: Optional[DateLike] = None, end: Optional[DateLike] = None) -> "AssetPanel":
        """Half-open date slice [start, end)."""
        mask = np.ones(len(self.dates), dtype=bool)
        if start is not None:
            mask &= self.dates >= pd.Timestamp(start)
        if end is not None:
            mask &= self.dates < pd.Timestamp(end)
        return self.take(np.flatnonzero(mask))

    def take(self, rows: np.ndarray) -> "AssetPanel":
        dates = self.dates[rows]
        return AssetPanel(
            dates=dates,
            assets=list(self.assets),
            features={k: v.iloc[rows] for k, v in self.features.items()},
            index_return=None if self.index_return is None else self.index_return.iloc[rows],
            metadata=dict(self.metadata),
        )

    def series_frame(self, modalities=NODE_MODALITIES) -> pd.DataFrame:
        """Columns named ``modality:series`` for every candidate Granger source."""
        columns = {}
        for modality in modalities:
            if modality not in self.features:
                continue
            for asset in self.assets:
                columns[f"{modality}:{asset}"] = self.features[modality][asset].to_numpy()
        if self.index_return is not None and "return" in modalities:
            columns[f"return:{INDEX_ID}"] = self.index_return.to_numpy()
        return pd.DataFrame(columns, index=self.dates)


@dataclass
class NormStats:
    """Per-feature, per-asset mean and sample stdev from the training split."""
    mean: Dict[str, pd.Series]
    stdev: Dict[str, pd.Series]
    index_mean: float = 0.0
    index_stdev: float = 1.0

    def degenerate(self) -> List[Tuple[str, str]]:
        out = []
        for name, sd in self.stdev.items():
            out.extend((name, asset) for asset in sd.index[sd.to_numpy() == 0.0])
        return out

    def save(self, path: str):
        """Flat key=value text, one line per (feature, asset, statistic)."""
        lines = []
        for name in sorted(self.mean):
            for asset in self.mean[name].index:
                lines.append(f"{name}.{asset}.mean={self.mean[name][asset]!r}")
                lines.append(f"{name}.{asset}.stdev={self.stdev[name][asset]!r}")
        lines.append(f"index.{INDEX_ID}.mean={self.index_mean!r}")
        lines.append(f"index.{INDEX_ID}.stdev={self.index_stdev!r}")
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str) -> "NormStats":
        mean: Dict[str, Dict[str, float]] = {}
        stdev: Dict[str, Dict[str, float]] = {}
        index_mean, index_stdev = 0.0, 1.0
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                key, value = line.split("=", 1)
                name, rest = key.split(".", 1)
                asset, stat = rest.rsplit(".", 1)
                if name == "index":
                    if stat == "mean":
                        index_mean = float(value)
                    else:
                        index_stdev = float(value)
                    continue
                target = mean if stat == "mean" else stdev
                target.setdefault(name, {})[asset] = float(value)
        return cls(
            mean={k: pd.Series(v, dtype=float) for k, v in mean.items()},
            stdev={k: pd.Series(v, dtype=float) for k, v in stdev.items()},
            index_mean=index_mean,
            index_stdev=index_stdev,
        )


@dataclass
class TimeSplit:
    """Half-open [start, end) date ranges, ordered train < valid < test."""
    train_range: Tuple[DateLike, DateLike]
    valid_range: Tuple[DateLike, DateLike]
    test_range: Tuple[DateLike, DateLike]

    def __post_init__(self):
        ranges = [tuple(pd.Timestamp(x) for x in r) for r in (self.train_range, self.valid_range, self.test_range)]
        for start, end in ranges:
            if not start < end:
                raise PanelDataError(f"split range {start.date()}..{end.date()} is empty")
        if not (ranges[0][1] <= ranges[1][0] and ranges[1][1] <= ranges[2][0]):
            raise PanelDataError("split ranges must be non-overlapping and ordered train < valid < test")
        self.train_range, self.valid_range, self.test_range = ranges


# --- FEATURE CONSTRUCTION ---

def compute_returns(prices: Union[pd.DataFrame, pd.Series], log_returns: bool = False):
    """R_t = (P_t - P_{t-1}) / P_{t-1}; output is one row shorter than the input."""
    frame = prices.to_frame() if isinstance(prices, pd.Series) else prices
    if len(frame) < 2:
        raise PanelDataError("price series needs at least 2 observations")
    values = frame.to_numpy(dtype=float)
    bad = ~(values > 0)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise PanelDataError(
            f"non-positive price {values[row, col]!r} for asset {frame.columns[col]} on {frame.index[row]}"
        )
    if log_returns:
        out = np.diff(np.log(values), axis=0)
    else:
        out = (values[1:] - values[:-1]) / values[:-1]
    result = pd.DataFrame(out, index=frame.index[1:], columns=frame.columns)
    return result.iloc[:, 0] if isinstance(prices, pd.Series) else result


def realized_volatility(returns: Union[pd.DataFrame, pd.Series], window: int = VOL_WINDOW):
    """Rolling sample stdev (n-1); the first window-1 rows are NaN."""
    if window < 2:
        raise PanelDataError("volatility window must be >= 2")
    if len(returns) < window:
        raise PanelDataError(f"series of length {len(returns)} is shorter than the window {window}")
    return returns.rolling(window=window, min_periods=window).std(ddof=1)


def compute_norm_stats(panel: AssetPanel) -> NormStats:
    mean = {name: frame.mean(axis=0) for name, frame in panel.features.items()}
    stdev = {name: frame.std(axis=0, ddof=1).fillna(0.0) for name, frame in panel.features.items()}
    index_mean, index_stdev = 0.0, 1.0
    if panel.index_return is not None:
        index_mean = float(panel.index_return.mean())
        index_stdev = float(panel.index_return.std(ddof=1)) if panel.n_days > 1 else 0.0
    return NormStats(mean=mean, stdev=stdev, index_mean=index_mean, index_stdev=index_stdev)


def _check_stats(panel: AssetPanel, stats: NormStats):
    for name in panel.features:
        if name not in stats.mean:
            raise PanelDataError(f"stats have no entry for feature {name!r}")
        if list(stats.mean[name].index) != list(panel.assets):
            raise PanelDataError(f"stats for {name!r} do not match the panel's assets")


def znormalize(panel: AssetPanel, stats: NormStats) -> AssetPanel:
    """(x - mean) / stdev with training statistics; stdev == 0 gives zeros and a flag."""
    _check_stats(panel, stats)
    features = {}
    for name, frame in panel.features.items():
        sd = stats.stdev[name].to_numpy()
        safe = np.where(sd > 0, sd, 1.0)
        z = (frame.to_numpy() - stats.mean[name].to_numpy()) / safe
        z[:, sd == 0] = 0.0
        features[name] = pd.DataFrame(z, index=frame.index, columns=frame.columns)
    index_return = None
    if panel.index_return is not None:
        sd = stats.index_stdev if stats.index_stdev > 0 else 1.0
        index_return = (panel.index_return - stats.index_mean) / sd
    degenerate = stats.degenerate()
    if degenerate:
        print(f"   ⚠️ {len(degenerate)} degenerate (constant) feature columns set to zero.")
    metadata = dict(panel.metadata, degenerate=degenerate, normalized=True)
    return AssetPanel(panel.dates, list(panel.assets), features, index_return, metadata)


def denormalize(panel: AssetPanel, stats: NormStats) -> AssetPanel:
    _check_stats(panel, stats)
    features = {
        name: frame * stats.stdev[name] + stats.mean[name]
        for name, frame in panel.features.items()
    }
    index_return = None
    if panel.index_return is not None:
        index_return = panel.index_return * stats.index_stdev + stats.index_mean
    metadata = dict(panel.metadata, normalized=False)
    return AssetPanel(panel.dates, list(panel.assets), features, index_return, metadata)


def regime_label(index_returns: pd.Series, horizon: int = REGIME_HORIZON) -> pd.Series:
    """1 (bull) when the forward sum over (t, t+horizon] is > 0, else 0; last rows unlabeled."""
    if horizon < 1:
        raise PanelDataError("regime horizon must be >= 1")
    if len(index_returns) <= horizon:
        raise PanelDataError(f"need more than {horizon} index returns to label a regime")
    values = index_returns.to_numpy(dtype=float)
    n = len(values)
    forward = np.lib.stride_tricks.sliding_window_view(values[1:], horizon).sum(axis=1)
    labels = pd.array(np.concatenate([(forward > 0).astype(int), np.zeros(horizon, dtype=int)]), dtype="Int64")
    labels[n - horizon:] = pd.NA
    return pd.Series(labels, index=index_returns.index, name="regime")


def temporal_split(panel: AssetPanel, split: TimeSplit) -> Tuple[AssetPanel, AssetPanel, AssetPanel]:
    parts = []
    for label, (start, end) in zip(("train", "valid", "test"), (split.train_range, split.valid_range, split.test_range)):
        part = panel.slice(start, end)
        if part.n_days == 0:
            raise PanelDataError(f"{label} split {start.date()}..{end.date()} is empty")
        parts.append(part)
    return tuple(parts)


def concat_panels(*panels: AssetPanel) -> AssetPanel:
    """Joins consecutive panels over the same assets back into one calendar."""
    panels = [p for p in panels if p is not None and p.n_days]
    if not panels:
        raise PanelDataError("nothing to concatenate")
    assets = list(panels[0].assets)
    if any(list(p.assets) != assets for p in panels):
        raise PanelDataError("panels cover different assets")
    names = set(panels[0].features)
    if any(set(p.features) != names for p in panels):
        raise PanelDataError("panels carry different features")
    has_index = panels[0].index_return is not None
    return AssetPanel(
        dates=panels[0].dates.append([p.dates for p in panels[1:]]),
        assets=assets,
        features={k: pd.concat([p.features[k] for p in panels]) for k in panels[0].features},
        index_return=pd.concat([p.index_return for p in panels]) if has_index else None,
        metadata=dict(panels[0].metadata),
    )


def build_panel(
    prices: pd.DataFrame,
    volume: pd.DataFrame,
    sentiment: Optional[pd.DataFrame] = None,
    index_prices: Optional[pd.Series] = None,
    news: Optional[pd.DataFrame] = None,
    vol_window: int = VOL_WINDOW,
    log_returns: bool = False,
) -> AssetPanel:
    """Raw prices/volume/sentiment -> model-ready panel (warm-up rows dropped)."""
    prices = prices.sort_index()
    gappy = [a for a in prices.columns if prices[a].isna().any() or volume.get(a) is None or volume[a].isna().any()]
    if gappy:
        print(f"   ⚠️ Dropping {len(gappy)} assets with incomplete trading history: {', '.join(map(str, gappy[:5]))}")
    assets = [str(a) for a in prices.columns if a not in gappy]
    if not assets:
        raise PanelDataError("no asset has a complete trading history")
    prices = prices[assets]
    volume = volume.reindex(index=prices.index)[assets]

    returns = compute_returns(prices, log_returns=log_returns)
    volatility = realized_volatility(returns, vol_window)
    keep = volatility.index[vol_window - 1:]

    def _aligned(frame: Optional[pd.DataFrame], fill: Optional[float]) -> Optional[pd.DataFrame]:
        if frame is None:
            return None
        frame = frame.reindex(index=keep, columns=assets)
        return frame.fillna(fill) if fill is not None else frame

    features = {
        "return": returns.loc[keep],
        "volatility": volatility.loc[keep],
        "volume": _aligned(volume, None),
        # no matched news -> neutral sentiment
        "sentiment": _aligned(sentiment, 0.0) if sentiment is not None
        else pd.DataFrame(0.0, index=keep, columns=assets),
    }
    if news is not None:
        features["news"] = _aligned(news, 0.0)
    if features["volume"].isna().to_numpy().any():
        raise PanelDataError("volume has gaps after alignment")

    index_return = None
    if index_prices is not None:
        index_return = compute_returns(index_prices.sort_index().astype(float), log_returns=log_returns)
        index_return = index_return.reindex(keep)
        if index_return.isna().any():
            raise PanelDataError("index prices do not cover the panel calendar")
        index_return.name = INDEX_ID

    features = {k: v.astype(float) for k, v in features.items()}
    return AssetPanel(pd.DatetimeIndex(keep), assets, features, index_return, {"vol_window": vol_window})


# --- CSV I/O ---

def _read_frame(path: str) -> pd.DataFrame:
    frame = pd.read_csv(path, index_col=0, parse_dates=True)
    frame.index = pd.DatetimeIndex(frame.index)
    frame.columns = [str(c) for c in frame.columns]
    return frame


def load_raw_csvs(directory: str) -> Dict[str, pd.DataFrame]:
    """One CSV per feature: header = asset ids, first column = ISO-8601 date."""
    raw = {}
    for key, name in (("prices", PRICE_FILE), ("volume", VOLUME_FILE), ("sentiment", SENTIMENT_FILE),
                      ("news", NEWS_FILE), ("index", INDEX_FILE)):
        path = os.path.join(directory, name)
        if os.path.exists(path):
            raw[key] = _read_frame(path)
        elif key in ("prices", "volume"):
            raise PanelDataError(f"missing required file {path}")
    return raw


def load_panel_csvs(directory: str, vol_window: int = VOL_WINDOW, log_returns: bool = False) -> AssetPanel:
    raw = load_raw_csvs(directory)
    index_prices = raw["index"].iloc[:, 0] if "index" in raw else None
    panel = build_panel(
        raw["prices"], raw["volume"], raw.get("sentiment"), index_prices, raw.get("news"),
        vol_window=vol_window, log_returns=log_returns,
    )
    print(f"✅ Loaded panel: {panel.n_days} days x {len(panel.assets)} assets from {directory}")
    return panel


def save_raw_csvs(directory: str, prices: pd.DataFrame, volume: pd.DataFrame, sentiment: pd.DataFrame,
                  index_prices: Optional[pd.Series] = None, news: Optional[pd.DataFrame] = None):
    os.makedirs(directory, exist_ok=True)
    for name, frame in ((PRICE_FILE, prices), (VOLUME_FILE, volume), (SENTIMENT_FILE, sentiment), (NEWS_FILE, news)):
        if frame is None:
            continue
        out = frame.copy()
        out.index = out.index.strftime("%Y-%m-%d")
        out.index.name = "date"
        out.to_csv(os.path.join(directory, name), float_format="%.17g")
    if index_prices is not None:
        out = index_prices.to_frame(INDEX_ID)
        out.index = out.index.strftime("%Y-%m-%d")
        out.index.name = "date"
        out.to_csv(os.path.join(directory, INDEX_FILE), float_format="%.17g")
