"""The assembled model: parameter storage and the end-to-end forward pass."""
import logging
import math
import threading
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from gallat.autodiff import Node
from gallat.config import TrainConfig
from gallat.ddw_graph import GeoMatrix, GridSpec, SnapshotGraph, geo_matrix
from gallat.errors import ContractError, DimensionError
from gallat.features import EmbeddingTables, FeatureConfig, FeatureScaler, build_features, build_target_features, init_tables
from gallat.spatial_attention import (
    SlotContext,
    SpatialParams,
    slot_context,
    spatial_embed,
    spatial_shapes,
    spatial_width,
)
from gallat.temporal_attention import (
    CHANNELS,
    FUSION,
    MIN_SLOTS_PER_DAY,
    ChannelParams,
    ChannelSpec,
    ChannelSequences,
    TemporalParams,
    channel_sequences,
    day_too_short,
    min_history,
    temporal_embed,
    temporal_shapes,
)
from gallat.transfer_attention import DenseTransferParams, TransferOutput, TransferParams, decode, transfer_shapes

logger = logging.getLogger(__name__)

LAYERS = ("spatial", "temporal", "transfer")
# weights applied as X W^T take their fan-in from the column count
TRANSPOSED_WEIGHTS = {"spatial.W_s", "spatial.W_a", "transfer.W_a"}
ZERO_INIT = {"transfer.b", "transfer.c"}


class BoundParams(NamedTuple):
    """Parameters wrapped as graph leaves for one forward pass."""
    tables: EmbeddingTables
    spatial: SpatialParams
    temporal: TemporalParams
    transfer: Union[TransferParams, DenseTransferParams]


class SnapshotSeries:
    """A snapshot sequence with its geography and cached per-slot neighbourhood data."""

    def __init__(self, snapshots: Sequence[SnapshotGraph], grid: GridSpec, L: float, epsilon: float):
        for t, g in enumerate(snapshots):
            if g.slot != t:
                raise ContractError(f"snapshot at position {t} carries slot {g.slot}")
            if g.n != grid.n:
                raise DimensionError("SnapshotSeries", g.counts.shape, (grid.n, grid.n))
        self.snapshots = list(snapshots)
        self.grid = grid
        self.geo: GeoMatrix = geo_matrix(grid)
        self.L = L
        self.epsilon = epsilon
        self._contexts: Dict[int, SlotContext] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.snapshots)

    def __getitem__(self, t: int) -> SnapshotGraph:
        return self.snapshots[t]

    def context(self, t: int) -> SlotContext:
        ctx = self._contexts.get(t)
        if ctx is None:
            ctx = slot_context(self.snapshots[t], self.geo, self.L, self.epsilon)
            with self._lock:
                self._contexts[t] = ctx
        return ctx


def param_shapes(cfg: TrainConfig, fcfg: FeatureConfig, n: int) -> Dict[str, Tuple[int, int]]:
    """Shapes of every learnable matrix, keyed by qualified name."""
    shapes = {
        "features.node_table": (n, fcfg.node_embed_dim),
        "features.slot_table": (fcfg.l, fcfg.slot_embed_dim),
        "features.dow_table": (7, fcfg.dow_embed_dim),
    }
    shapes.update({f"spatial.{k}": v for k, v in spatial_shapes(fcfg.d, cfg.d_e).items()})
    width = spatial_width(cfg.spatial_layer, cfg.d_e)
    shapes.update({f"temporal.{k}": v for k, v in temporal_shapes(fcfg.d_v, width).items()})
    shapes.update({f"transfer.{k}": v for k, v in transfer_shapes(n, width, cfg.transfer_layer).items()})
    return shapes


def init_params(cfg: TrainConfig, fcfg: FeatureConfig, n: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """Uniform +-sqrt(1/fan_in) weights, zero biases, small uniform embeddings."""
    params: Dict[str, np.ndarray] = {}
    tables = init_tables(n, fcfg, rng)
    for name, shape in param_shapes(cfg, fcfg, n).items():
        layer, _, short = name.partition(".")
        if layer == "features":
            params[name] = tables[short]
            continue
        if name in ZERO_INIT:
            params[name] = np.zeros(shape)
            continue
        fan_in = shape[1] if name in TRANSPOSED_WEIGHTS else shape[0]
        bound = math.sqrt(1.0 / max(fan_in, 1))
        params[name] = rng.uniform(-bound, bound, size=shape)
    return params


class GallatModel:
    """Learnable parameters plus everything needed to run a forward pass."""

    def __init__(
        self,
        cfg: TrainConfig,
        fcfg: FeatureConfig,
        grid: GridSpec,
        scaler: FeatureScaler,
        D_max: float,
        params: Dict[str, np.ndarray],
    ):
        expected = param_shapes(cfg, fcfg, grid.n)
        if set(expected) != set(params):
            missing = sorted(set(expected) ^ set(params))
            raise ContractError(f"parameter set mismatch: {', '.join(missing)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise DimensionError(name, params[name].shape, shape)
        if D_max <= 0:
            raise ContractError(f"D_max must be positive, got {D_max}")
        if fcfg.l < MIN_SLOTS_PER_DAY:
            raise ContractError(day_too_short(fcfg.l))
        self.cfg = cfg
        self.fcfg = fcfg
        self.grid = grid
        self.scaler = scaler
        self.D_max = float(D_max)
        self.params = params

    @classmethod
    def initialize(
        cls,
        cfg: TrainConfig,
        fcfg: FeatureConfig,
        grid: GridSpec,
        scaler: FeatureScaler,
        D_max: float,
        rng: np.random.Generator,
    ) -> "GallatModel":
        return cls(cfg, fcfg, grid, scaler, D_max, init_params(cfg, fcfg, grid.n, rng))

    @property
    def geo_threshold(self) -> float:
        return self.cfg.geo_threshold_km or self.grid.default_geo_threshold()

    @property
    def history_needed(self) -> int:
        return min_history(self.cfg.P, self.fcfg.l)

    def series(self, snapshots: Sequence[SnapshotGraph]) -> SnapshotSeries:
        return SnapshotSeries(snapshots, self.grid, self.geo_threshold, self.cfg.epsilon)

    def bind(self) -> BoundParams:
        leaf = {name: Node.parameter(name, value) for name, value in self.params.items()}

        def channel(unit: str) -> ChannelParams:
            return ChannelParams(*(leaf[f"temporal.{unit}.{m}"] for m in ("W_Q", "W_K", "W_V")))

        return BoundParams(
            tables=EmbeddingTables(*(leaf[f"features.{t}"] for t in ("node_table", "slot_table", "dow_table"))),
            spatial=SpatialParams(*(leaf[f"spatial.{k}"] for k in ("W_s", "W_a", "a"))),
            temporal=TemporalParams(tuple(channel(c) for c in CHANNELS), channel(FUSION)),
            transfer=self._bind_transfer(leaf),
        )

    def _bind_transfer(self, leaf: Dict[str, Node]) -> Union[TransferParams, DenseTransferParams]:
        if self.cfg.transfer_layer == "dense":
            return DenseTransferParams(*(leaf[f"transfer.{k}"] for k in ("w", "b", "W_d", "c")))
        return TransferParams(*(leaf[f"transfer.{k}"] for k in ("w", "b", "W_a", "a")))

    def sequences(self, target: int) -> ChannelSequences:
        return channel_sequences(ChannelSpec(P=self.cfg.P, l=self.fcfg.l, T=target - 1))

    def valid_targets(self, start: int, stop: int) -> List[int]:
        """Targets in [start, stop) whose channel histories exist."""
        return list(range(max(start, self.history_needed + 1), stop))

    def embed_slot(self, series: SnapshotSeries, t: int, bound: BoundParams) -> Node:
        g = series[t]
        V = build_features(g, t, bound.tables, self.fcfg, self.scaler)
        return spatial_embed(
            V, g, series.geo, bound.spatial, series.L, series.epsilon,
            self.cfg.leaky_slope, self.cfg.spatial_aggregator, series.context(t), self.cfg.spatial_layer,
        )

    def forward(self, series: SnapshotSeries, target: int, bound: Optional[BoundParams] = None) -> TransferOutput:
        """Predict slot ``target`` from the snapshots before it."""
        if target > len(series):
            raise ContractError(f"target slot {target} is beyond the next unobserved slot {len(series)}")
        bound = bound or self.bind()
        seqs = self.sequences(target)
        embeddings = {t: self.embed_slot(series, t, bound) for t in seqs.slots()}
        V_next = build_target_features(target, bound.tables, self.fcfg, self.scaler)
        M_prime = temporal_embed(
            V_next, embeddings, seqs, bound.temporal, self.cfg.temporal_mean, self.cfg.temporal_aggregator
        )
        return decode(M_prime, bound.transfer, self.D_max, self.cfg.leaky_slope)
