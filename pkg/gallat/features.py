"""Per-slot node feature matrices.

Historical slots get ``[row, col, out-degree, in-degree]`` followed by the
node, time-of-day and day-of-week embeddings; the target slot gets the same
minus the two degree columns, which are not observable in advance.
"""
from typing import NamedTuple, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from gallat.autodiff import Node, concat_cols, gather_rows
from gallat.ddw_graph import SnapshotGraph, stack_counts
from gallat.errors import ContractError, DimensionError

SCALAR_FEATURES = 4
TARGET_SCALAR_FEATURES = 2
EMBEDDING_INIT_RANGE = 0.1


class FeatureConfig(BaseModel):
    """Widths of the feature vectors and the calendar layout of slots."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    node_embed_dim: int = Field(default=8, ge=0, description="Width of the node-ID embedding")
    slot_embed_dim: int = Field(default=8, ge=0, description="Width of the time-of-day embedding")
    dow_embed_dim: int = Field(default=8, ge=0, description="Width of the day-of-week embedding")
    l: int = Field(default=24, gt=0, description="Slots per day")
    start_dow: int = Field(default=0, ge=0, le=6, description="Weekday of slot 0 (0 = Monday)")

    @property
    def d(self) -> int:
        return SCALAR_FEATURES + self.node_embed_dim + self.slot_embed_dim + self.dow_embed_dim

    @property
    def d_v(self) -> int:
        return self.d - (SCALAR_FEATURES - TARGET_SCALAR_FEATURES)

    def slot_of_day(self, t: int) -> int:
        return t % self.l

    def day_of_week(self, t: int) -> int:
        return (self.start_dow + t // self.l) % 7


class EmbeddingTables(NamedTuple):
    node_table: Node
    slot_table: Node
    dow_table: Node


class FeatureScaler(BaseModel):
    """Training-set mean/std of the scalar columns, plus the grid layout they refer to."""
    model_config = ConfigDict(frozen=True)

    n_rows: int
    n_cols: int
    mean: Sequence[float] = (0.0, 0.0, 0.0, 0.0)
    std: Sequence[float] = (1.0, 1.0, 1.0, 1.0)

    @classmethod
    def fit(cls, n_rows: int, n_cols: int, snapshots: Sequence[SnapshotGraph]) -> "FeatureScaler":
        n = n_rows * n_cols
        rows, cols = np.divmod(np.arange(n), n_cols)
        counts = stack_counts(snapshots)
        if counts.size:
            out_deg = counts.sum(axis=2).ravel().astype(np.float64)
            in_deg = counts.sum(axis=1).ravel().astype(np.float64)
        else:
            out_deg = in_deg = np.zeros(1)
        columns = [rows.astype(np.float64), cols.astype(np.float64), out_deg, in_deg]
        std = [float(c.std()) for c in columns]
        return cls(
            n_rows=n_rows,
            n_cols=n_cols,
            mean=[float(c.mean()) for c in columns],
            std=[s if s > 0 else 1.0 for s in std],
        )

    @property
    def n(self) -> int:
        return self.n_rows * self.n_cols

    def scalar_columns(self, g: Optional[SnapshotGraph] = None) -> np.ndarray:
        """Standardised [row, col, out, in] (or [row, col] without a snapshot)."""
        rows, cols = np.divmod(np.arange(self.n), self.n_cols)
        raw = [rows, cols]
        if g is not None:
            raw += [g.out_degree(), g.in_degree()]
        mean = np.asarray(self.mean[:len(raw)])
        std = np.asarray(self.std[:len(raw)])
        return (np.stack(raw, axis=1).astype(np.float64) - mean) / std


def init_tables(n: int, cfg: FeatureConfig, rng: np.random.Generator) -> dict:
    """Fresh embedding tables, uniform in [-0.1, 0.1]."""
    r = EMBEDDING_INIT_RANGE
    return {
        "node_table": rng.uniform(-r, r, size=(n, cfg.node_embed_dim)),
        "slot_table": rng.uniform(-r, r, size=(cfg.l, cfg.slot_embed_dim)),
        "dow_table": rng.uniform(-r, r, size=(7, cfg.dow_embed_dim)),
    }


def _check_tables(tables: EmbeddingTables, cfg: FeatureConfig, n: int) -> None:
    expected = {
        "node_table": (n, cfg.node_embed_dim),
        "slot_table": (cfg.l, cfg.slot_embed_dim),
        "dow_table": (7, cfg.dow_embed_dim),
    }
    for name, shape in expected.items():
        actual = getattr(tables, name).shape
        if actual != shape:
            raise DimensionError(name, actual, shape)


def _calendar_segments(t: int, tables: EmbeddingTables, cfg: FeatureConfig, n: int):
    return [
        tables.node_table,
        gather_rows(tables.slot_table, [cfg.slot_of_day(t)] * n),
        gather_rows(tables.dow_table, [cfg.day_of_week(t)] * n),
    ]


def build_features(
    g: SnapshotGraph, t: int, tables: EmbeddingTables, cfg: FeatureConfig, scaler: FeatureScaler
) -> Node:
    """Feature matrix V_t (n x d) for a historical slot."""
    if t != g.slot:
        raise ContractError(f"slot {t} does not match snapshot slot {g.slot}")
    if scaler.n != g.n:
        raise DimensionError("build_features", (scaler.n,), g.counts.shape)
    _check_tables(tables, cfg, g.n)
    scalars = Node.constant(scaler.scalar_columns(g))
    return concat_cols([scalars] + _calendar_segments(t, tables, cfg, g.n))


def build_target_features(
    t_next: int, tables: EmbeddingTables, cfg: FeatureConfig, scaler: FeatureScaler
) -> Node:
    """Feature matrix V_{T+1} (n x d_v) for the slot being predicted."""
    _check_tables(tables, cfg, scaler.n)
    scalars = Node.constant(scaler.scalar_columns())
    return concat_cols([scalars] + _calendar_segments(t_next, tables, cfg, scaler.n))
