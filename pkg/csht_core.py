import io
import json
import math
import time
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from errors import ModelError, ScheduleError, TrainingDivergedError
from granger import CausalHypergraph, GraphSchedule, LaggedNode
from ingest import AssetPanel, concat_panels
from run_config import MAX_LAG, INDEX_ID, Config, rng_for
from sphere import SphereEmbedding, torch_project, torch_riemannian_step

DTYPE = torch.float64
CHECKPOINT_MAGIC = "CSHT-CHECKPOINT v1"

MODALITY_IDS = {"news": 0, "sentiment": 1, "return": 2, "target": 3}
# Per-node feature channels; return nodes also carry volatility and volume
CHANNELS = ("value", "volatility", "volume")
UNDEFINED = float("nan")


# --- CONFIGURATION ---

@dataclass
class ModelConfig:
    """Architecture, optimisation and ablation switches."""
    layers: int = 2
    hidden_width: int = 64
    heads: int = 4
    lam: float = 10.0
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_lag: int = MAX_LAG
    use_causal_mask: bool = True
    use_spherical_attention: bool = True
    input_noise: float = 0.0
    angular_cutoff: Optional[float] = None      # radians; None disables
    embedding_step: Optional[float] = None      # defaults to learning_rate
    ffn_multiplier: int = 4
    epochs: int = 100
    patience: int = 10
    divergence_limit: float = 1e6
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.hidden_width % self.heads:
            raise ModelError(f"hidden width {self.hidden_width} is not divisible by {self.heads} heads")
        if not self.lam > 0:
            raise ModelError("lambda must be > 0")
        if self.learning_rate < 0 or (self.embedding_step is not None and self.embedding_step < 0):
            raise ModelError("step sizes must be >= 0")
        if self.layers < 1 or self.batch_size < 1 or self.max_lag < 1:
            raise ModelError("layers, batch size and max lag must be >= 1")
        if self.input_noise < 0:
            raise ModelError("input noise sigma must be >= 0")
        if self.angular_cutoff is not None and not 0.0 < self.angular_cutoff <= math.pi:
            raise ModelError("angular cutoff must lie in (0, pi] radians")
        return self

    @property
    def head_dim(self) -> int:
        return self.hidden_width // self.heads

    @property
    def embedding_eta(self) -> float:
        return self.learning_rate if self.embedding_step is None else self.embedding_step

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict) -> "ModelConfig":
        return cls(**d).validate()


# --- NODES & MASKS ---

def window_nodes(columns: Sequence[str], targets: Sequence[str], max_lag: int) -> List[LaggedNode]:
    """Every source column at lags 1..max_lag, then the lag-0 target nodes."""
    lagged = sorted(LaggedNode.at(c, k) for c in columns for k in range(1, max_lag + 1))
    return lagged + sorted(LaggedNode.at(t, 0) for t in targets)


def panel_nodes(panel: AssetPanel, max_lag: int) -> Tuple[List[LaggedNode], List[str]]:
    columns = list(panel.series_frame().columns)
    targets = [f"return:{a}" for a in panel.assets]
    return window_nodes(columns, targets, max_lag), list(panel.assets)


@dataclass
class MaskMatrix:
    """allowed[i, j] is True iff node j is a Granger parent of node i, or j == i."""
    nodes: List[LaggedNode]
    allowed: np.ndarray

    def __post_init__(self):
        if not self.allowed.diagonal().all():
            raise ModelError("every mask row must allow its self-edge")

    def active_rows(self) -> np.ndarray:
        """Rows that may attend to anything besides themselves."""
        return np.flatnonzero(self.allowed.sum(axis=1) > 1)


def build_mask(graph: Optional[CausalHypergraph], nodes: Sequence[LaggedNode], use_causal_mask: bool = True) -> MaskMatrix:
    if not nodes:
        raise ModelError("cannot build a mask over an empty node window")
    n = len(nodes)
    if not use_causal_mask:
        return MaskMatrix(list(nodes), np.ones((n, n), dtype=bool))
    index = {node: i for i, node in enumerate(nodes)}
    allowed = np.eye(n, dtype=bool)
    dropped = 0
    for edge in (graph.hyperedges if graph is not None else []):
        i = index.get(edge.target)
        if i is None:
            dropped += len(edge.parents)
            continue
        for parent in edge.parents:
            j = index.get(parent)
            if j is None:
                dropped += 1
                continue
            allowed[i, j] = True
    if dropped:
        print(f"   ⚠️ {dropped} hyperedge endpoints are not window nodes; dropped from the mask.")
    return MaskMatrix(list(nodes), allowed)


# --- ATTENTION ---

@dataclass
class AttentionMap:
    """Weights of one layer for the computed rows; other rows attend only to themselves."""
    rows: np.ndarray
    weights: torch.Tensor   # [batch, heads, len(rows), n_nodes]

    def dense(self) -> torch.Tensor:
        b, h, _, n = self.weights.shape
        full = torch.eye(n, dtype=self.weights.dtype).expand(b, h, n, n).clone()
        if len(self.rows):
            full[:, :, torch.as_tensor(self.rows)] = self.weights
        return full


def masked_attention(queries: torch.Tensor, keys: torch.Tensor, values: torch.Tensor, mask,
                     lam: float = 10.0, spherical: bool = True,
                     angular_cutoff: Optional[float] = None, self_mask=None):
    """exp(lam <q_i, k_j>) / Z_i over allowed j, exactly 0 elsewhere.

    With ``spherical`` the rows of q and k are projected onto the unit sphere so
    the inner product is a cosine; otherwise scaled dot-product scores are used.
    """
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if mask.shape != (queries.shape[-2], keys.shape[-2]):
        raise ModelError(f"mask shape {tuple(mask.shape)} does not match scores")
    if not bool(mask.any(dim=-1).all()):
        raise ModelError("attention row with no allowed entries")
    if spherical:
        q = F.normalize(queries, dim=-1, eps=1e-12)
        k = F.normalize(keys, dim=-1, eps=1e-12)
        cosine = q @ k.transpose(-2, -1)
        scores = lam * cosine
        if angular_cutoff is not None:
            keep = torch.as_tensor(self_mask, dtype=torch.bool) if self_mask is not None else torch.zeros_like(mask)
            mask = mask & ((cosine >= math.cos(angular_cutoff)) | keep)
    else:
        scores = (queries @ keys.transpose(-2, -1)) / math.sqrt(queries.shape[-1])
    scores = scores.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(scores, dim=-1).masked_fill(~mask, 0.0)
    return weights @ values, weights


class CausalSphereLayer(nn.Module):
    """Masked multi-head angular attention followed by a residual feed-forward block."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        H = config.hidden_width
        self.config = config
        self.q = nn.Linear(H, H, bias=False, dtype=DTYPE)
        self.k = nn.Linear(H, H, bias=False, dtype=DTYPE)
        self.v = nn.Linear(H, H, bias=False, dtype=DTYPE)
        self.o = nn.Linear(H, H, bias=False, dtype=DTYPE)
        self.ffn_in = nn.Linear(H, config.ffn_multiplier * H, dtype=DTYPE)
        self.ffn_out = nn.Linear(config.ffn_multiplier * H, H, dtype=DTYPE)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.config.heads, self.config.head_dim).transpose(1, 2)

    def forward(self, h: torch.Tensor, allowed: torch.Tensor, rows: np.ndarray):
        cfg = self.config
        b, n, width = h.shape
        v = self._split(self.v(h))
        mixed = v
        if len(rows):
            idx = torch.as_tensor(rows)
            q = self._split(self.q(h[:, idx]))
            k = self._split(self.k(h))
            self_mask = torch.zeros((len(rows), n), dtype=torch.bool)
            self_mask[torch.arange(len(rows)), idx] = True
            out, weights = masked_attention(
                q, k, v, allowed[idx], lam=cfg.lam, spherical=cfg.use_spherical_attention,
                angular_cutoff=cfg.angular_cutoff, self_mask=self_mask,
            )
            mixed = v.clone()
            mixed[:, :, idx] = out
        else:
            weights = torch.zeros((b, cfg.heads, 0, n), dtype=h.dtype)
        a = self.o(mixed.transpose(1, 2).reshape(b, n, width))
        return a + self.ffn_out(F.gelu(self.ffn_in(a))), AttentionMap(np.asarray(rows), weights)


@dataclass
class ForwardOutput:
    returns: torch.Tensor          # [batch, assets]
    regime_logits: torch.Tensor    # [batch]
    attention: List[AttentionMap]


class CSHTModel(nn.Module):
    """Sphere-embedded window nodes -> masked angular transformer -> return and regime heads."""

    def __init__(self, nodes: Sequence[LaggedNode], assets: Sequence[str], config: ModelConfig):
        super().__init__()
        self.config = config
        self.nodes = list(nodes)
        self.assets = list(assets)
        H = config.hidden_width
        node_index = {node: i for i, node in enumerate(self.nodes)}
        try:
            target_rows = [node_index[LaggedNode("return", a, 0)] for a in self.assets]
        except KeyError as e:
            raise ModelError(f"asset target node missing from the window: {e}")
        modality = [MODALITY_IDS["target"] if n.lag == 0 else MODALITY_IDS[n.modality] for n in self.nodes]
        self.register_buffer("target_rows", torch.as_tensor(target_rows, dtype=torch.long))
        self.register_buffer("modality_ids", torch.as_tensor(modality, dtype=torch.long))

        self.embeddings = nn.Parameter(torch.zeros(len(self.nodes), H, dtype=DTYPE))
        self.input_proj = nn.Parameter(torch.zeros(len(MODALITY_IDS), len(CHANNELS), H, dtype=DTYPE))
        self.layers = nn.ModuleList([CausalSphereLayer(config) for _ in range(config.layers)])
        self.regression_head = nn.Linear(H, 1, dtype=DTYPE)
        self.regime_head = nn.Linear(H, 1, dtype=DTYPE)
        self._initialise(rng_for(config.seed, "init"))

    @torch.no_grad()
    def _initialise(self, rng: np.random.Generator):
        H = self.config.hidden_width
        emb = SphereEmbedding.random(self.nodes, H, rng)
        self.embeddings.copy_(torch.as_tensor(emb.table))
        self.input_proj.copy_(torch.as_tensor(rng.standard_normal(self.input_proj.shape) / math.sqrt(H)))
        for name, p in self.named_parameters():
            if name in ("embeddings", "input_proj"):
                continue
            if name.endswith("bias"):
                p.zero_()
            elif name.startswith(("regression_head", "regime_head")):
                p.copy_(torch.as_tensor(0.01 * rng.standard_normal(p.shape)))
            else:
                bound = 1.0 / math.sqrt(p.shape[1])
                p.copy_(torch.as_tensor(rng.uniform(-bound, bound, p.shape)))

    def dense_parameters(self) -> List[nn.Parameter]:
        return [p for name, p in self.named_parameters() if name != "embeddings"]

    def forward(self, features: torch.Tensor, mask: MaskMatrix) -> ForwardOutput:
        if len(mask.nodes) != len(self.nodes):
            raise ModelError("mask node window does not match the model's nodes")
        emb = torch_project(self.embeddings)
        proj = self.input_proj[self.modality_ids]                   # [N, C, H]
        h = emb.unsqueeze(0) + torch.einsum("bnc,nch->bnh", features, proj)
        allowed = torch.as_tensor(mask.allowed)
        rows = mask.active_rows()
        maps = []
        for layer in self.layers:
            h, weights = layer(h, allowed, rows)
            maps.append(weights)
        ht = h[:, self.target_rows]
        returns = self.regression_head(ht).squeeze(-1)
        logits = self.regime_head(ht.mean(dim=1)).squeeze(-1)
        return ForwardOutput(returns, logits, maps)


# --- BATCHES ---

@dataclass
class WindowBatch:
    """tau-lag histories for a set of anchor days t; targets are r_{t+1} and the regime label at t."""
    dates: List[pd.Timestamp]
    features: torch.Tensor            # [batch, nodes, channels]
    return_targets: torch.Tensor      # [batch, assets]
    regime_targets: torch.Tensor      # [batch], NaN where unlabeled
    mask: MaskMatrix
    graph: Optional[CausalHypergraph] = None

    def __len__(self):
        return len(self.dates)


class WindowBuilder:
    """Realizes node feature values for anchor days of a (normalized) panel."""

    def __init__(self, panel: AssetPanel, nodes: Sequence[LaggedNode], config: ModelConfig,
                 regime: Optional[pd.Series] = None):
        self.panel = panel
        self.nodes = list(nodes)
        self.config = config
        self.tau = max([n.lag for n in self.nodes] + [1])
        T = panel.n_days
        channels = {}
        for asset in panel.assets:
            channels[f"return:{asset}"] = np.column_stack([
                panel.feature("return")[asset].to_numpy(),
                panel.features["volatility"][asset].to_numpy() if "volatility" in panel.features else np.zeros(T),
                panel.features["volume"][asset].to_numpy() if "volume" in panel.features else np.zeros(T),
            ])
            for modality in ("sentiment", "news"):
                if modality in panel.features:
                    channels[f"{modality}:{asset}"] = np.column_stack(
                        [panel.features[modality][asset].to_numpy(), np.zeros(T), np.zeros(T)]
                    )
        if panel.index_return is not None:
            channels[f"return:{INDEX_ID}"] = np.column_stack([panel.index_return.to_numpy(), np.zeros(T), np.zeros(T)])

        # table[t, n, c]: value of node n when the last observed day is t
        table = np.zeros((T, len(self.nodes), len(CHANNELS)))
        noisy = np.zeros(len(self.nodes), dtype=bool)
        for j, node in enumerate(self.nodes):
            if node.lag == 0:
                continue
            source = channels.get(node.column)
            if source is None:
                raise ModelError(f"panel has no series for node {node}")
            shift = node.lag - 1
            table[shift:, j] = source[:T - shift]
            noisy[j] = node.modality in ("sentiment", "news")
        self.table = table
        self.noisy = noisy
        self.returns = panel.feature("return").to_numpy()
        self.regime = None
        if regime is not None:
            self.regime = regime.reindex(panel.dates).astype("Float64").to_numpy(dtype=float, na_value=np.nan)

    def anchors(self, start=None, end=None, require_label: bool = False) -> np.ndarray:
        """Anchor rows t whose target day t+1 lies in [start, end)."""
        T = self.panel.n_days
        t = np.arange(self.tau - 1, T - 1)
        target_days = self.panel.dates[t + 1]
        keep = np.ones(len(t), dtype=bool)
        if start is not None:
            keep &= target_days >= pd.Timestamp(start)
        if end is not None:
            keep &= target_days < pd.Timestamp(end)
        if require_label:
            if self.regime is None:
                raise ModelError("classification needs regime labels")
            keep &= ~np.isnan(self.regime[t])
        return t[keep]

    def batch(self, rows: Sequence[int], mask: MaskMatrix, graph: Optional[CausalHypergraph] = None,
              noise_rng: Optional[np.random.Generator] = None) -> WindowBatch:
        rows = np.asarray(rows, dtype=int)
        feats = self.table[rows].copy()
        if self.config.input_noise > 0 and noise_rng is not None:
            draw = noise_rng.standard_normal((len(rows), int(self.noisy.sum())))
            feats[:, self.noisy, 0] += self.config.input_noise * draw
        regime = self.regime[rows] if self.regime is not None else np.full(len(rows), np.nan)
        # the last panel day has no realized next-day return
        ahead = rows + 1 < self.panel.n_days
        targets = np.full((len(rows), self.returns.shape[1]), np.nan)
        targets[ahead] = self.returns[rows[ahead] + 1]
        return WindowBatch(
            dates=[self.panel.dates[r] for r in rows],
            features=torch.as_tensor(feats, dtype=DTYPE),
            return_targets=torch.as_tensor(targets, dtype=DTYPE),
            regime_targets=torch.as_tensor(regime, dtype=DTYPE),
            mask=mask,
            graph=graph,
        )

    def batches(self, rows: Sequence[int], schedule: GraphSchedule, batch_size: int,
                rng: Optional[np.random.Generator] = None, noise_rng: Optional[np.random.Generator] = None,
                mask_cache: Optional[Dict[int, MaskMatrix]] = None) -> List[WindowBatch]:
        """Groups anchors by hypergraph window so each batch shares one mask."""
        mask_cache = {} if mask_cache is None else mask_cache
        groups: Dict[int, List[int]] = {}
        for r in rows:
            groups.setdefault(schedule.index_for(self.panel.dates[r]), []).append(int(r))
        chunks = []
        for gi in sorted(groups):
            members = np.asarray(groups[gi])
            if rng is not None:
                members = members[rng.permutation(len(members))]
            for s in range(0, len(members), batch_size):
                chunks.append((gi, members[s:s + batch_size]))
        if rng is not None:
            chunks = [chunks[i] for i in rng.permutation(len(chunks))]
        out = []
        for gi, members in chunks:
            if gi not in mask_cache:
                mask_cache[gi] = build_mask(schedule.graphs[gi], self.nodes, self.config.use_causal_mask)
            out.append(self.batch(members, mask_cache[gi], schedule.graphs[gi], noise_rng))
        return out


# --- STATE ---

@dataclass
class ModelState:
    model: CSHTModel
    config: ModelConfig
    optimizer: Optional[torch.optim.Optimizer] = None
    epoch: int = 0

    @property
    def nodes(self) -> List[LaggedNode]:
        return self.model.nodes

    @property
    def assets(self) -> List[str]:
        return self.model.assets

    def embedding(self) -> SphereEmbedding:
        return SphereEmbedding(self.nodes, self.model.embeddings.detach().numpy().copy())


def init_state(nodes: Sequence[LaggedNode], assets: Sequence[str], config: ModelConfig) -> ModelState:
    config.validate()
    model = CSHTModel(nodes, assets, config)
    optimizer = torch.optim.Adam(model.dense_parameters(), lr=config.learning_rate)
    return ModelState(model, config, optimizer)


def forward(state: ModelState, batch: WindowBatch, config: Optional[ModelConfig] = None,
            grad: bool = False) -> ForwardOutput:
    """Deterministic forward pass; attention weights are kept for the alignment metric."""
    if config is not None and config.use_causal_mask != state.config.use_causal_mask:
        raise ModelError("batch mask and model config disagree on causal masking")
    with torch.set_grad_enabled(grad):
        return state.model(batch.features, batch.mask)


# --- LOSS ---

def loss(predictions: torch.Tensor, targets: torch.Tensor, task: str) -> torch.Tensor:
    """Mean squared error (regression) or binary cross-entropy on logits (classification)."""
    predictions = torch.as_tensor(predictions, dtype=DTYPE)
    targets = torch.as_tensor(targets, dtype=DTYPE)
    bad = torch.isnan(predictions)
    if bool(bad.any()):
        sample = int(torch.nonzero(bad)[0][0])
        raise ModelError(f"NaN prediction at sample {sample}")
    if predictions.shape != targets.shape:
        raise ModelError(f"prediction shape {tuple(predictions.shape)} != target shape {tuple(targets.shape)}")
    if task == "regression":
        return torch.mean((predictions - targets) ** 2)
    if task == "classification":
        return F.binary_cross_entropy_with_logits(predictions, targets)
    raise ModelError(f"unknown task {task!r}")


def batch_loss(out: ForwardOutput, batch: WindowBatch, task: str) -> torch.Tensor:
    terms = []
    if task in ("regression", "both"):
        terms.append(loss(out.returns, batch.return_targets, "regression"))
    if task in ("classification", "both"):
        labelled = ~torch.isnan(batch.regime_targets)
        if bool(labelled.any()):
            terms.append(loss(out.regime_logits[labelled], batch.regime_targets[labelled], "classification"))
        elif task == "classification":
            raise ModelError("classification batch has no labelled samples")
    if not terms:
        raise ModelError(f"unknown task {task!r}")
    return sum(terms)


# --- ALIGNMENT ---

def causal_alignment(attention: Sequence[AttentionMap], graph: Optional[CausalHypergraph],
                     nodes: Sequence[LaggedNode]) -> float:
    """Sanctioned / cross-node attention mass over all (i, j) pairs, self-edges excluded.

    One ratio per (layer, sample, head), then averaged; NaN when no cross-node mass exists.
    """
    sanctioned = torch.as_tensor(build_mask(graph, nodes, True).allowed)
    ratios = []
    for amap in attention:
        cross = amap.dense().detach().clone()
        cross.diagonal(dim1=-2, dim2=-1).zero_()
        num = (cross * sanctioned.to(cross.dtype)).sum(dim=(-2, -1))
        den = cross.sum(dim=(-2, -1))
        ok = den > 0
        if bool(ok.any()):
            ratios.append((num[ok] / den[ok]).flatten())
    if not ratios:
        return UNDEFINED
    return float(torch.cat(ratios).mean())


def attention_path(state: ModelState, batch: WindowBatch, asset: str, top: int = 10,
                   sample: int = 0) -> List[Tuple[int, str, float]]:
    """Top attended nodes for an asset's prediction row, head-averaged, per layer."""
    target = LaggedNode("return", asset, 0)
    if target not in state.nodes:
        raise ModelError(f"unknown asset {asset!r}")
    row = state.nodes.index(target)
    out = forward(state, batch)
    path = []
    for layer, amap in enumerate(out.attention, start=1):
        dense = amap.dense()[sample, :, row].mean(dim=0)
        order = torch.argsort(dense, descending=True, stable=True)[:top]
        path.extend((layer, str(state.nodes[j]), float(dense[j])) for j in order.tolist() if dense[j] > 0)
    return path


# --- TRAINING ---

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_loss: float
    alignment: float
    seconds: float = 0.0


@dataclass
class TrainingLog:
    records: List[EpochRecord] = field(default_factory=list)
    stopped_early: bool = False
    best_epoch: int = 0

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,valid_loss,alignment"]
        for r in self.records:
            lines.append(f"{r.epoch},{r.train_loss!r},{r.valid_loss!r},{r.alignment!r}")
        return "\n".join(lines) + "\n"


def _evaluate_batches(state: ModelState, batches: Sequence[WindowBatch], task: str) -> Tuple[float, float]:
    total, count, aligns = 0.0, 0, []
    for b in batches:
        out = forward(state, b)
        total += float(batch_loss(out, b, task)) * len(b)
        count += len(b)
        a = causal_alignment(out.attention, b.graph, state.nodes)
        if not math.isnan(a):
            aligns.append(a)
    mean_loss = total / count if count else UNDEFINED
    return mean_loss, (float(np.mean(aligns)) if aligns else UNDEFINED)


def train(state: ModelState, panels: Sequence[AssetPanel], schedule: GraphSchedule,
          config: Optional[ModelConfig] = None, task: str = "regression",
          regime: Optional[pd.Series] = None, progress: bool = False) -> Tuple[ModelState, TrainingLog]:
    """Adam on dense weights, projected steps on embeddings, early stopping on validation loss.

    ``panels`` is (train, valid) of one normalized calendar; validation anchors may
    read history from the training days before them.
    """
    config = (config or state.config).validate()
    train_panel, valid_panel = panels[0], (panels[1] if len(panels) > 1 else None)
    full = concat_panels(train_panel, valid_panel) if valid_panel is not None and valid_panel.n_days else train_panel
    builder = WindowBuilder(full, state.nodes, config, regime)
    need_label = task == "classification"
    train_rows = builder.anchors(end=valid_panel.dates[0] if valid_panel is not None and valid_panel.n_days else None,
                                 require_label=need_label)
    valid_rows = builder.anchors(start=valid_panel.dates[0], require_label=need_label) \
        if valid_panel is not None and valid_panel.n_days else np.array([], dtype=int)
    if not len(train_rows):
        raise ModelError("no training samples (panel shorter than the lag window?)")

    batch_rng = rng_for(config.seed, "batching")
    noise_rng = rng_for(config.seed, "noise")
    masks: Dict[int, MaskMatrix] = {}
    fixed_train = builder.batches(train_rows, schedule, config.batch_size, None, None, masks)
    valid_batches = builder.batches(valid_rows, schedule, config.batch_size, None, None, masks) if len(valid_rows) else []
    optimizer = state.optimizer or torch.optim.Adam(state.model.dense_parameters(), lr=config.learning_rate)
    for group in optimizer.param_groups:
        group["lr"] = config.learning_rate
    state.optimizer = optimizer

    log = TrainingLog()
    init_train, _ = _evaluate_batches(state, fixed_train, task)
    init_valid, init_align = _evaluate_batches(state, valid_batches, task) if valid_batches else (UNDEFINED, UNDEFINED)
    log.records.append(EpochRecord(0, init_train, init_valid, init_align))
    best = init_valid
    best_params = {k: v.detach().clone() for k, v in state.model.state_dict().items()}
    since_best = 0

    bar = tqdm(range(1, config.epochs + 1), desc="Epochs", disable=not progress or Config.QUIET)
    for epoch in bar:
        started = time.perf_counter()
        total, count = 0.0, 0
        for b in builder.batches(train_rows, schedule, config.batch_size, batch_rng, noise_rng, masks):
            optimizer.zero_grad(set_to_none=False)
            state.model.embeddings.grad = None
            out = forward(state, b, grad=True)
            value = batch_loss(out, b, task)
            if not math.isfinite(float(value)) or float(value) > config.divergence_limit:
                raise TrainingDivergedError(f"loss {float(value):.6g} at epoch {epoch} exceeds the divergence limit", log)
            value.backward()
            optimizer.step()
            torch_riemannian_step(state.model.embeddings, config.embedding_eta)
            total += float(value) * len(b)
            count += len(b)
        state.epoch = epoch
        valid_loss, align = _evaluate_batches(state, valid_batches, task) if valid_batches else (UNDEFINED, UNDEFINED)
        record = EpochRecord(epoch, total / count, valid_loss, align, time.perf_counter() - started)
        log.records.append(record)
        bar.set_postfix(train=f"{record.train_loss:.4f}", valid=f"{valid_loss:.4f}", secs=f"{record.seconds:.1f}")

        if math.isnan(valid_loss):
            continue
        if math.isnan(best) or valid_loss < best:
            best, since_best, log.best_epoch = valid_loss, 0, epoch
            best_params = {k: v.detach().clone() for k, v in state.model.state_dict().items()}
        else:
            since_best += 1
            if since_best >= config.patience:
                log.stopped_early = True
                print(f"   ⏹️ Early stop at epoch {epoch} (best {log.best_epoch}, valid {best:.6f})")
                break

    if valid_batches:
        state.model.load_state_dict(best_params)
    return state, log


# --- CHECKPOINTS ---

def save_checkpoint(state: ModelState, path: str):
    """Header (config, node order, parameter shapes) then little-endian float64 parameters."""
    params = state.model.state_dict()
    float_params = [(k, v) for k, v in params.items() if v.is_floating_point()]
    header = {
        "config": state.config.to_dict(),
        "nodes": [str(n) for n in state.nodes],
        "assets": list(state.assets),
        "params": [[k, list(v.shape)] for k, v in float_params],
    }
    with open(path, "wb") as f:
        f.write((CHECKPOINT_MAGIC + "\n" + json.dumps(header, sort_keys=True) + "\n---\n").encode("utf-8"))
        for _, v in float_params:
            f.write(np.ascontiguousarray(v.detach().numpy(), dtype="<f8").tobytes())


def load_checkpoint(path: str) -> ModelState:
    with open(path, "rb") as f:
        blob = f.read()
    head, _, body = blob.partition(b"\n---\n")
    magic, _, meta = head.decode("utf-8").partition("\n")
    if magic != CHECKPOINT_MAGIC:
        raise ModelError(f"{path} is not a checkpoint")
    header = json.loads(meta)
    config = ModelConfig.from_dict(header["config"])
    state = init_state([LaggedNode.parse(n) for n in header["nodes"]], header["assets"], config)
    flat = np.frombuffer(body, dtype="<f8")
    offset = 0
    params = state.model.state_dict()
    for name, shape in header["params"]:
        size = int(np.prod(shape)) if shape else 1
        params[name].copy_(torch.as_tensor(flat[offset:offset + size].reshape(shape).copy()))
        offset += size
    if offset != flat.size:
        raise ModelError(f"checkpoint {path} has {flat.size - offset} trailing values")
    return state
