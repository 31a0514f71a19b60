import os
import re
import json
import zlib
import configparser
from dataclasses import dataclass, field, fields, asdict
from typing import Dict, List, Optional, Tuple, Any

import numpy as np
from dotenv import load_dotenv

from errors import ConfigError

load_dotenv()

# --- DEFAULTS ---
MAX_LAG = 5                 # Granger lag K
FDR_ALPHA = 0.01            # FDR-adjusted p threshold
VOL_WINDOW = 30             # realised volatility window (days)
REGIME_HORIZON = 3          # forward index return horizon (days)
NDCG_K = 10

# Default calendar (half-open, end exclusive)
DEFAULT_SPLIT = {
    "train": ("2018-01-01", "2021-01-01"),
    "valid": ("2021-01-01", "2022-01-01"),
    "test": ("2022-01-01", "2023-07-01"),
}

# Panel CSV layout
PRICE_FILE = "prices.csv"
VOLUME_FILE = "volume.csv"
SENTIMENT_FILE = "sentiment.csv"
NEWS_FILE = "news.csv"
INDEX_FILE = "index.csv"
INDEX_ID = "INDEX"


class Config:
    """Process-level settings read from the environment (.env supported)."""
    OUT_DIR = os.getenv("CSHT_OUT_DIR", "out")
    SEED = int(os.getenv("CSHT_SEED", "0"))
    DEBUG_MODE = os.getenv("CSHT_DEBUG", "0") == "1"
    QUIET = os.getenv("CSHT_QUIET", "0") == "1"


DEBUG_FOLDER = "debug"


def debug_dump(filename: str, data: Any):
    """Writes debug artifacts to disk for auditability."""
    if not Config.DEBUG_MODE: return
    if not os.path.exists(DEBUG_FOLDER): os.makedirs(DEBUG_FOLDER)
    clean_name = re.sub(r'[^a-zA-Z0-9_-]', '', filename)
    filepath = os.path.join(DEBUG_FOLDER, f"{clean_name}.json")
    with open(filepath, 'w', encoding='utf-8') as f:
        json.dump({"data": data}, f, indent=2, default=str, sort_keys=True)


# --- SEED STREAMS ---

def seed_sequence(seed: int, stream: str) -> np.random.SeedSequence:
    """Named sub-stream of the top-level seed; stable across runs and platforms."""
    return np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(stream.encode("utf-8")),))


def rng_for(seed: int, stream: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, stream)))


def int_seed_for(seed: int, stream: str) -> int:
    """63-bit integer seed for libraries that want a plain int (torch)."""
    return int(seed_sequence(seed, stream).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


# --- RUN CONFIG ---

@dataclass
class RunConfig:
    """Everything one CLI invocation needs."""
    # [paths]
    data_dir: str = ""                  # empty: <out_dir>/data
    out_dir: str = Config.OUT_DIR
    # [split]
    train_start: str = DEFAULT_SPLIT["train"][0]
    train_end: str = DEFAULT_SPLIT["train"][1]
    valid_start: str = DEFAULT_SPLIT["valid"][0]
    valid_end: str = DEFAULT_SPLIT["valid"][1]
    test_start: str = DEFAULT_SPLIT["test"][0]
    test_end: str = DEFAULT_SPLIT["test"][1]
    # [synthetic]
    num_assets: int = 8
    length: int = 1384
    start_date: str = "2018-01-01"
    cross_edges: int = 3
    noise_stdev: float = 1.0
    break_day: Optional[int] = None
    # [discovery]
    max_lag: int = MAX_LAG
    alpha: float = FDR_ALPHA
    window_length: int = 504
    stride: int = 126
    prune_minimal: bool = False
    log_returns: bool = False
    vol_window: int = VOL_WINDOW
    # [model]
    layers: int = 2
    hidden_width: int = 64
    heads: int = 4
    lam: float = 10.0
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 100
    patience: int = 10
    use_causal_mask: bool = True
    use_spherical_attention: bool = True
    input_noise: float = 0.0
    angular_cutoff: Optional[float] = None      # radians; empty disables
    embedding_step: Optional[float] = None      # empty: learning_rate
    # [run]
    task: str = "both"
    seeds: List[int] = field(default_factory=lambda: [Config.SEED])

    SECTIONS = {
        "paths": ("data_dir", "out_dir"),
        "split": ("train_start", "train_end", "valid_start", "valid_end", "test_start", "test_end"),
        "synthetic": ("num_assets", "length", "start_date", "cross_edges", "noise_stdev", "break_day"),
        "discovery": ("max_lag", "alpha", "window_length", "stride", "prune_minimal", "log_returns", "vol_window"),
        "model": ("layers", "hidden_width", "heads", "lam", "learning_rate", "batch_size", "epochs",
                  "patience", "use_causal_mask", "use_spherical_attention", "input_noise", "angular_cutoff",
                  "embedding_step"),
        "run": ("task", "seeds"),
    }

    def validate(self):
        if self.task not in ("regression", "classification", "both"):
            raise ConfigError(f"task must be regression, classification or both, got {self.task!r}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.max_lag < 1:
            raise ConfigError("max_lag must be >= 1")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not (self.train_start < self.train_end <= self.valid_start < self.valid_end <= self.test_start < self.test_end):
            raise ConfigError("split dates must be ordered train < valid < test")
        return self

    def split_ranges(self) -> Dict[str, Tuple[str, str]]:
        return {
            "train": (self.train_start, self.train_end),
            "valid": (self.valid_start, self.valid_end),
            "test": (self.test_start, self.test_end),
        }

    def data_path(self) -> str:
        return self.data_dir or os.path.join(self.out_dir, "data")

    def model_config(self, seed: int):
        from csht_core import ModelConfig
        return ModelConfig(
            layers=self.layers, hidden_width=self.hidden_width, heads=self.heads, lam=self.lam,
            learning_rate=self.learning_rate, batch_size=self.batch_size, max_lag=self.max_lag,
            use_causal_mask=self.use_causal_mask, use_spherical_attention=self.use_spherical_attention,
            input_noise=self.input_noise, angular_cutoff=self.angular_cutoff, embedding_step=self.embedding_step,
            epochs=self.epochs, patience=self.patience, seed=seed,
        ).validate()

    def to_text(self) -> str:
        """Serializes back to the sectioned key=value format."""
        values = asdict(self)
        lines = []
        for section, keys in self.SECTIONS.items():
            lines.append(f"[{section}]")
            for key in keys:
                value = values[key]
                if isinstance(value, list):
                    value = ",".join(str(v) for v in value)
                lines.append(f"{key} = {'' if value is None else value}")
            lines.append("")
        return "\n".join(lines)


# Keys whose empty value means "unset"
OPTIONAL_KEYS = {"break_day": int, "angular_cutoff": float, "embedding_step": float}


def _coerce(name: str, raw: str, default: Any):
    raw = raw.strip()
    kind = {f.name: f.type for f in fields(RunConfig)}[name]
    try:
        if name == "seeds":
            return [int(s) for s in raw.replace(" ", "").split(",") if s]
        if name in OPTIONAL_KEYS:
            return OPTIONAL_KEYS[name](raw) if raw else None
        if isinstance(default, bool) or kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int) or kind == "int":
            return int(raw)
        if isinstance(default, float) or kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}")
    return raw


def load_run_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Reads the sectioned key=value file, then applies explicit overrides."""
    cfg = RunConfig()
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        parser.read(path, encoding="utf-8")
        for section in parser.sections():
            allowed = RunConfig.SECTIONS.get(section)
            if allowed is None:
                raise ConfigError(f"unknown section [{section}] in {path}")
            for key, raw in parser.items(section):
                if key not in allowed:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                setattr(cfg, key, _coerce(key, raw, getattr(cfg, key)))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if not hasattr(cfg, key):
            raise ConfigError(f"unknown override {key!r}")
        setattr(cfg, key, value)
    return cfg.validate()
