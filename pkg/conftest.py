"""Shared fixtures: a six-cell micro city and small random snapshot sequences."""
import numpy as np
import pytest

from gallat.config import TrainConfig
from gallat.ddw_graph import GridSpec, SnapshotGraph, geo_matrix
from gallat.features import FeatureConfig, FeatureScaler
from gallat.model import GallatModel

MICRO_L = 4
MICRO_SLOTS = 14


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def grid():
    """2 x 3 cells (n = 6), roughly 1 km on a side."""
    return GridSpec(min_lat=39.90, min_lon=116.30, max_lat=39.92, max_lon=116.335, n_rows=2, n_cols=3)


@pytest.fixture
def geo(grid):
    return geo_matrix(grid)


def random_snapshots(rng, n, n_slots, density=0.5, high=6):
    """Sparse random count matrices with slots numbered from 0."""
    out = []
    for t in range(n_slots):
        counts = rng.integers(1, high, size=(n, n)) * (rng.random((n, n)) < density)
        out.append(SnapshotGraph(slot=t, counts=counts.astype(np.int64)))
    return out


@pytest.fixture
def snapshots(rng, grid):
    return random_snapshots(rng, grid.n, MICRO_SLOTS)


@pytest.fixture
def micro_config():
    """d = 10, d_v = 8, d_e = 4, P = 2."""
    return TrainConfig(
        d_e=4, P=2, node_embed_dim=2, slot_embed_dim=2, dow_embed_dim=2,
        batch_size=4, epochs=2, pretrain_epochs=2, test_days=1, val_fraction=0.2,
    )


@pytest.fixture
def micro_features():
    return FeatureConfig(node_embed_dim=2, slot_embed_dim=2, dow_embed_dim=2, l=MICRO_L, start_dow=2)


@pytest.fixture
def micro_model(micro_config, micro_features, grid, snapshots):
    scaler = FeatureScaler.fit(grid.n_rows, grid.n_cols, snapshots)
    return GallatModel.initialize(
        micro_config, micro_features, grid, scaler, 8.0, np.random.default_rng(7)
    )
