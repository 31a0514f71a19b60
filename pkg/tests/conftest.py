import os
import sys

import numpy as np
import pandas as pd
import pytest

# Flat layout: modules live at the repository root
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from ingest import AssetPanel, build_panel  # noqa: E402
from synthetic import gen_var_process, market_frames, planted_market_spec  # noqa: E402


# --- PANEL HELPERS ---

def market_panel(num_assets: int = 3, length: int = 300, seed: int = 0, max_lag: int = 2,
                 cross_edges: int = 1, vol_window: int = 5) -> AssetPanel:
    """Raw (un-normalized) panel generated from a planted market spec."""
    spec = planted_market_spec(num_assets, length=length, seed=seed, max_lag=max_lag, cross_edges=cross_edges)
    values, _ = gen_var_process(spec)
    frames = market_frames(values, seed=seed)
    return build_panel(frames["prices"], frames["volume"], frames["sentiment"], frames["index"], frames["news"],
                       vol_window=vol_window)


def hand_panel(returns: np.ndarray, sentiment: np.ndarray = None, start: str = "2020-01-01",
               index_return: np.ndarray = None) -> AssetPanel:
    """Panel built directly from feature matrices (days x assets)."""
    T, A = returns.shape
    dates = pd.bdate_range(start, periods=T)
    assets = [f"A{i}" for i in range(A)]
    frame = lambda x: pd.DataFrame(x, index=dates, columns=assets)
    features = {
        "return": frame(returns),
        "volatility": frame(np.zeros((T, A))),
        "volume": frame(np.zeros((T, A))),
        "sentiment": frame(np.zeros((T, A)) if sentiment is None else sentiment),
    }
    idx = pd.Series(returns.mean(axis=1) if index_return is None else index_return, index=dates)
    return AssetPanel(dates, assets, features, idx)


@pytest.fixture
def small_market():
    return market_panel()


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: timing checks over larger synthetic panels")
