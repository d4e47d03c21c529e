"""Dynamic, directed, weighted (DDW) graph data model.

A city is cut into a regular grid of ``n`` cells; every time slot gets one
:class:`SnapshotGraph` whose ``counts[i, j]`` is the number of trips that
started in slot ``t`` from cell ``i`` towards cell ``j``. Cells are numbered
row-major starting at the south-west corner.
"""
import logging
from datetime import datetime, timedelta
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from gallat.errors import ContractError, DataFormatError, DimensionError

if TYPE_CHECKING:
    from gallat.data_pipeline import TripRecord

logger = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0
DEFAULT_EPSILON = 1e-8
GEO_THRESHOLD_FACTOR = 1.05
SNAPSHOT_COLUMNS = ["slot", "origin", "dest", "count"]


def haversine_km(lat1, lon1, lat2, lon2) -> np.ndarray:
    """Great-circle distance in km; accepts scalars or broadcastable arrays (degrees)."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(lon2) - np.radians(lon1)
    h = np.sin(dphi / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


class GridSpec(BaseModel):
    """Bounding box evenly divided into ``n_rows`` x ``n_cols`` cells."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    min_lat: float = Field(description="Southern edge of the bounding box (degrees)")
    min_lon: float = Field(description="Western edge of the bounding box (degrees)")
    max_lat: float = Field(description="Northern edge of the bounding box (degrees)")
    max_lon: float = Field(description="Eastern edge of the bounding box (degrees)")
    n_rows: int = Field(gt=0, description="Number of cell rows (south to north)")
    n_cols: int = Field(gt=0, description="Number of cell columns (west to east)")

    @model_validator(mode="after")
    def _check_box(self) -> "GridSpec":
        if not (self.max_lat > self.min_lat and self.max_lon > self.min_lon):
            raise ValueError("bounding box is degenerate")
        return self

    @property
    def n(self) -> int:
        return self.n_rows * self.n_cols

    @property
    def cell_height(self) -> float:
        return (self.max_lat - self.min_lat) / self.n_rows

    @property
    def cell_width(self) -> float:
        return (self.max_lon - self.min_lon) / self.n_cols

    def row_col(self, i: int) -> Tuple[int, int]:
        if not 0 <= i < self.n:
            raise ContractError(f"node index {i} out of range for n={self.n}")
        return divmod(i, self.n_cols)

    def centers(self) -> Tuple[np.ndarray, np.ndarray]:
        """Latitudes and longitudes of all cell centres, in node order."""
        rows, cols = np.divmod(np.arange(self.n), self.n_cols)
        lat = self.min_lat + (rows + 0.5) * self.cell_height
        lon = self.min_lon + (cols + 0.5) * self.cell_width
        return lat, lon

    def cell_of(self, lat, lon) -> np.ndarray:
        """Cell index for each coordinate pair, or -1 outside the bounding box.

        Points on the northern/eastern edge belong to the last row/column.
        """
        lat = np.asarray(lat, dtype=np.float64)
        lon = np.asarray(lon, dtype=np.float64)
        inside = (
            np.isfinite(lat) & np.isfinite(lon)
            & (lat >= self.min_lat) & (lat <= self.max_lat)
            & (lon >= self.min_lon) & (lon <= self.max_lon)
        )
        with np.errstate(invalid="ignore"):
            rows = np.floor((lat - self.min_lat) / self.cell_height)
            cols = np.floor((lon - self.min_lon) / self.cell_width)
        rows = np.clip(np.nan_to_num(rows), 0, self.n_rows - 1).astype(np.int64)
        cols = np.clip(np.nan_to_num(cols), 0, self.n_cols - 1).astype(np.int64)
        return np.where(inside, rows * self.n_cols + cols, -1)

    def cell_diagonal_km(self) -> float:
        """Distance from the first cell centre to its diagonal neighbour's centre."""
        lat0 = self.min_lat + 0.5 * self.cell_height
        lon0 = self.min_lon + 0.5 * self.cell_width
        return float(haversine_km(lat0, lon0, lat0 + self.cell_height, lon0 + self.cell_width))

    def default_geo_threshold(self) -> float:
        """Threshold L giving 8-adjacency on the grid."""
        return GEO_THRESHOLD_FACTOR * self.cell_diagonal_km()


class GeoMatrix(BaseModel):
    """Pairwise centre-to-centre distances in km."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    dist: np.ndarray

    @property
    def n(self) -> int:
        return self.dist.shape[0]


class SnapshotGraph(BaseModel):
    """Trip counts between all cell pairs for one time slot."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    slot: int
    counts: np.ndarray

    @model_validator(mode="after")
    def _check_counts(self) -> "SnapshotGraph":
        c = self.counts
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise DimensionError("SnapshotGraph", c.shape)
        if (c < 0).any():
            raise ContractError(f"snapshot {self.slot} has negative counts")
        return self

    @classmethod
    def empty(cls, slot: int, n: int) -> "SnapshotGraph":
        return cls(slot=slot, counts=np.zeros((n, n), dtype=np.int64))

    @property
    def n(self) -> int:
        return self.counts.shape[0]

    def out_degree(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def in_degree(self) -> np.ndarray:
        return self.counts.sum(axis=0)


class NeighborSets(BaseModel):
    """Forward, backward and geographical neighbourhoods of one node."""
    model_config = ConfigDict(frozen=True)

    forward: Tuple[int, ...]
    backward: Tuple[int, ...]
    geo: Tuple[int, ...]


class PreWeights(BaseModel):
    """Statistics-driven weights applied to neighbour features before attention."""
    model_config = ConfigDict(frozen=True)

    a: Dict[int, float]
    b: Dict[int, float]
    c: Dict[int, float]
    epsilon: float


class BuildReport(BaseModel):
    """Accounting of what happened to every input trip."""
    total: int = 0
    counted: int = 0
    dropped_out_of_bbox: int = 0
    dropped_out_of_span: int = 0

    @property
    def dropped(self) -> int:
        return self.dropped_out_of_bbox + self.dropped_out_of_span


def geo_matrix(grid: GridSpec) -> GeoMatrix:
    lat, lon = grid.centers()
    dist = haversine_km(lat[:, None], lon[:, None], lat[None, :], lon[None, :])
    dist = 0.5 * (dist + dist.T)
    np.fill_diagonal(dist, 0.0)
    return GeoMatrix(dist=dist)


def _check_pair(g: SnapshotGraph, r: GeoMatrix) -> None:
    if g.n != r.n:
        raise DimensionError("snapshot/geo", g.counts.shape, r.dist.shape)


def neighborhoods(g: SnapshotGraph, r: GeoMatrix, i: int, L: float) -> NeighborSets:
    _check_pair(g, r)
    if not 0 <= i < g.n:
        raise ContractError(f"node index {i} out of range for n={g.n}")
    if L <= 0:
        raise ContractError(f"distance threshold must be positive, got {L}")
    geo = np.flatnonzero(r.dist[i] <= L)
    return NeighborSets(
        forward=tuple(int(j) for j in np.flatnonzero(g.counts[i] > 0)),
        backward=tuple(int(j) for j in np.flatnonzero(g.counts[:, i] > 0)),
        geo=tuple(int(j) for j in geo if j != i),
    )


def pre_weights(
    g: SnapshotGraph, r: GeoMatrix, sets: NeighborSets, i: int, epsilon: float = DEFAULT_EPSILON
) -> PreWeights:
    if epsilon <= 0:
        raise ContractError(f"epsilon must be positive, got {epsilon}")
    out_total = float(sum(g.counts[i, j] for j in sets.forward))
    in_total = float(sum(g.counts[j, i] for j in sets.backward))
    inv = {j: 1.0 / float(r.dist[i, j]) for j in sets.geo}
    inv_total = sum(inv.values())
    return PreWeights(
        a={j: float(g.counts[i, j]) / (out_total + epsilon) for j in sets.forward},
        b={j: float(g.counts[j, i]) / (in_total + epsilon) for j in sets.backward},
        c={j: w / inv_total for j, w in inv.items()},
        epsilon=epsilon,
    )


def neighbor_masks(g: SnapshotGraph, r: GeoMatrix, L: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Boolean n x n masks; row i marks the forward, backward and geo neighbours of node i."""
    _check_pair(g, r)
    if L <= 0:
        raise ContractError(f"distance threshold must be positive, got {L}")
    forward = g.counts > 0
    backward = forward.T.copy()
    geo = r.dist <= L
    np.fill_diagonal(geo, False)
    return forward, backward, geo


def pre_weight_matrices(
    g: SnapshotGraph, r: GeoMatrix, L: float, epsilon: float = DEFAULT_EPSILON
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Dense form of :func:`pre_weights` for all nodes at once.

    Row i holds a_j, b_j and c_j for node i's neighbours and zeros elsewhere.
    """
    _, _, geo = neighbor_masks(g, r, L)
    out_counts = g.counts.astype(np.float64)
    in_counts = out_counts.T
    a = out_counts / (out_counts.sum(axis=1, keepdims=True) + epsilon)
    b = in_counts / (in_counts.sum(axis=1, keepdims=True) + epsilon)
    with np.errstate(divide="ignore"):
        inv = np.where(geo, 1.0 / np.where(geo, r.dist, 1.0), 0.0)
    inv_total = inv.sum(axis=1, keepdims=True)
    c = inv / np.where(inv_total > 0, inv_total, 1.0)
    return a, b, c


def semantic_pre_weight_matrix(g: SnapshotGraph, epsilon: float = DEFAULT_EPSILON) -> Tuple[np.ndarray, np.ndarray]:
    """Forward and backward neighbours merged into one undirected set.

    Returns the mask and pre-weights (g_ij + g_ji) / (sum_k (g_ik + g_ki) + epsilon).
    """
    if epsilon <= 0:
        raise ContractError(f"epsilon must be positive, got {epsilon}")
    both = (g.counts + g.counts.T).astype(np.float64)
    return both > 0, both / (both.sum(axis=1, keepdims=True) + epsilon)


def _slot_index(starts: np.ndarray, span: Tuple[datetime, datetime], slot_len: timedelta) -> Tuple[np.ndarray, int]:
    begin, end = span
    total = end - begin
    if total <= timedelta(0):
        raise ContractError(f"empty span {begin.isoformat()} .. {end.isoformat()}")
    if total % slot_len != timedelta(0):
        raise ContractError(f"slot length {slot_len} does not divide span {total}")
    n_slots = total // slot_len
    offsets = (starts - np.datetime64(begin)) / np.timedelta64(slot_len)
    slots = np.floor(offsets)
    slots = np.where((offsets >= 0) & (offsets < n_slots), slots, -1).astype(np.int64)
    return slots, int(n_slots)


def snapshots_from_arrays(
    start_times: np.ndarray,
    origin_lat: np.ndarray,
    origin_lon: np.ndarray,
    dest_lat: np.ndarray,
    dest_lon: np.ndarray,
    grid: GridSpec,
    slot_len: timedelta,
    span: Tuple[datetime, datetime],
) -> Tuple[List[SnapshotGraph], BuildReport]:
    """Counting core shared by :func:`build_snapshots` and CSV ingestion."""
    starts = np.asarray(start_times, dtype="datetime64[ns]")
    slots, n_slots = _slot_index(starts, span, slot_len)
    origin = grid.cell_of(origin_lat, origin_lon)
    dest = grid.cell_of(dest_lat, dest_lon)
    in_box = (origin >= 0) & (dest >= 0)
    in_span = slots >= 0
    keep = in_box & in_span
    counts = np.zeros((n_slots, grid.n, grid.n), dtype=np.int64)
    np.add.at(counts, (slots[keep], origin[keep], dest[keep]), 1)
    report = BuildReport(
        total=int(starts.size),
        counted=int(keep.sum()),
        dropped_out_of_bbox=int((~in_box).sum()),
        dropped_out_of_span=int((in_box & ~in_span).sum()),
    )
    return [SnapshotGraph(slot=t, counts=counts[t]) for t in range(n_slots)], report


def build_snapshots(
    trips: Sequence["TripRecord"],
    grid: GridSpec,
    slot_len: timedelta,
    span: Tuple[datetime, datetime],
) -> Tuple[List[SnapshotGraph], BuildReport]:
    """Bin trips by the slot containing their start time and their origin/destination cells."""
    starts = np.array([np.datetime64(t.start_time.replace(tzinfo=None)) for t in trips], dtype="datetime64[ns]")
    snapshots, report = snapshots_from_arrays(
        starts,
        np.array([t.origin_lat for t in trips], dtype=np.float64),
        np.array([t.origin_lon for t in trips], dtype=np.float64),
        np.array([t.dest_lat for t in trips], dtype=np.float64),
        np.array([t.dest_lon for t in trips], dtype=np.float64),
        grid,
        slot_len,
        (span[0].replace(tzinfo=None), span[1].replace(tzinfo=None)),
    )
    if report.dropped:
        logger.info(
            f"[Snapshots] dropped {report.dropped_out_of_bbox} trips outside the bounding box "
            f"and {report.dropped_out_of_span} outside the time span"
        )
    return snapshots, report


def stack_counts(snapshots: Sequence[SnapshotGraph]) -> np.ndarray:
    """Counts of a snapshot sequence as one (slots, n, n) array."""
    return np.stack([g.counts for g in snapshots]) if snapshots else np.zeros((0, 0, 0), dtype=np.int64)


def write_snapshots_csv(path: Union[str, Path], snapshots: Sequence[SnapshotGraph]) -> None:
    """Write nonzero entries as ``slot,origin,dest,count`` rows."""
    counts = stack_counts(snapshots)
    slot_idx, origin, dest = np.nonzero(counts)
    frame = pd.DataFrame({
        "slot": np.array([snapshots[k].slot for k in slot_idx], dtype=np.int64) if len(slot_idx) else slot_idx,
        "origin": origin,
        "dest": dest,
        "count": counts[slot_idx, origin, dest],
    }, columns=SNAPSHOT_COLUMNS)
    frame.to_csv(path, index=False)


def read_snapshots_csv(path: Union[str, Path], n: int, n_slots: int) -> List[SnapshotGraph]:
    """Inverse of :func:`write_snapshots_csv`; absent entries are zero."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"snapshot file not found: {path}")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    if list(frame.columns) != SNAPSHOT_COLUMNS:
        raise DataFormatError(f"expected header {','.join(SNAPSHOT_COLUMNS)}, got {','.join(map(str, frame.columns))}", row=1)
    counts = np.zeros((n_slots, n, n), dtype=np.int64)
    if len(frame):
        values = frame.apply(pd.to_numeric, errors="coerce").to_numpy(dtype=np.float64)
        not_integer = ~np.isfinite(values) | (values != np.floor(values))
        if not_integer.any():
            row = int(np.argmax(not_integer.any(axis=1)))
            column = SNAPSHOT_COLUMNS[int(np.argmax(not_integer[row]))]
            raise DataFormatError(f"{column} is not an integer: {frame.iloc[row][column]!r}", row=row + 2)
        bad = (
            (values[:, 0] < 0) | (values[:, 0] >= n_slots)
            | (values[:, 1] < 0) | (values[:, 1] >= n)
            | (values[:, 2] < 0) | (values[:, 2] >= n)
            | (values[:, 3] < 0)
        )
        if bad.any():
            raise DataFormatError("entry out of range", row=int(np.argmax(bad)) + 2)
        values = values.astype(np.int64)
        np.add.at(counts, (values[:, 0], values[:, 1], values[:, 2]), values[:, 3])
    return [SnapshotGraph(slot=t, counts=counts[t]) for t in range(n_slots)]
