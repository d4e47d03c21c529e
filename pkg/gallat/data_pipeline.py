"""Trip-record ingestion, the synthetic mobility generator and the on-disk dataset bundle."""
import json
import logging
from datetime import datetime, timedelta
from pathlib import Path
from typing import Dict, List, Literal, NamedTuple, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from gallat.ddw_graph import (
    GridSpec,
    SnapshotGraph,
    geo_matrix,
    read_snapshots_csv,
    snapshots_from_arrays,
    write_snapshots_csv,
)
from gallat.errors import ContractError, DataFormatError

logger = logging.getLogger(__name__)

TRIP_COLUMNS = ["start_time", "origin_lat", "origin_lon", "dest_lat", "dest_lon"]
RATE_COLUMNS = ["slot_of_day", "dow", "origin", "dest", "rate"]
SNAPSHOTS_FILE = "snapshots.csv"
META_FILE = "dataset.json"
RATES_FILE = "rates.csv"
SURGE_FILE = "surge.csv"
MINUTES_PER_DAY = 24 * 60

Role = Literal["residential", "business", "transit", "nightlife"]
ROLES: Tuple[str, ...] = ("residential", "business", "transit", "nightlife")

# (origin, dest) -> list of (centre hour, width in hours, amplitude) bumps on top of the base level
DEFAULT_PROFILES: Dict[Tuple[str, str], List[Tuple[float, float, float]]] = {
    ("residential", "business"): [(8.0, 1.5, 6.0)],
    ("business", "residential"): [(18.0, 1.5, 6.0)],
    ("residential", "transit"): [(7.5, 1.5, 3.0)],
    ("transit", "business"): [(8.5, 1.5, 3.0)],
    ("business", "transit"): [(17.5, 1.5, 3.0)],
    ("transit", "residential"): [(18.5, 1.5, 3.0)],
    ("residential", "nightlife"): [(21.0, 2.0, 3.0)],
    ("nightlife", "residential"): [(1.0, 2.0, 3.0)],
    ("business", "business"): [(12.5, 1.5, 1.5)],
}


class TripRecord(BaseModel):
    """One trip; only its start time matters for slotting."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    start_time: datetime
    origin_lat: float = Field(allow_inf_nan=False)
    origin_lon: float = Field(allow_inf_nan=False)
    dest_lat: float = Field(allow_inf_nan=False)
    dest_lon: float = Field(allow_inf_nan=False)


class IngestReport(BaseModel):
    """Counts for every parsed row: ``rows = malformed + counted + dropped``."""
    rows: int = 0
    malformed: int = 0
    counted: int = 0
    dropped_out_of_bbox: int = 0
    dropped_out_of_span: int = 0

    @property
    def dropped(self) -> int:
        return self.dropped_out_of_bbox + self.dropped_out_of_span


class DatasetMeta(BaseModel):
    """Everything besides the counts that a dataset directory records."""
    model_config = ConfigDict(extra="forbid")

    grid: GridSpec
    n_slots: int = Field(ge=0)
    slots_per_day: int = Field(ge=1)
    slot_minutes: int = Field(ge=1)
    start: datetime = Field(description="Wall-clock start of slot 0")
    start_dow: int = Field(ge=0, le=6, description="Weekday of slot 0 (0 = Monday)")

    @model_validator(mode="after")
    def _check_day(self) -> "DatasetMeta":
        if self.slots_per_day * self.slot_minutes != MINUTES_PER_DAY:
            raise ValueError(f"{self.slots_per_day} slots of {self.slot_minutes} minutes do not make a day")
        return self


def slots_per_day(slot_minutes: int) -> int:
    if slot_minutes <= 0 or MINUTES_PER_DAY % slot_minutes:
        raise ContractError(f"slot length of {slot_minutes} minutes does not divide a day")
    return MINUTES_PER_DAY // slot_minutes


def _parse_times(raw: pd.Series, utc_offset_hours: float) -> pd.Series:
    """Naive timestamps are local wall-clock times; timestamps with an offset are shifted to local time."""
    parsed = pd.to_datetime(raw, errors="coerce", utc=True, format="ISO8601")
    aware = raw.str.strip().str.contains(r"(?:Z|[+-]\d{2}:?\d{2})$", regex=True)
    shift = pd.to_timedelta(pd.Series(np.where(aware, utc_offset_hours, 0.0), index=raw.index), unit="h")
    return (parsed + shift).dt.tz_localize(None)


def ingest_csv(
    path: Union[str, Path],
    grid: GridSpec,
    slot_len: timedelta,
    span: Optional[Tuple[datetime, datetime]] = None,
    utc_offset_hours: float = 0.0,
) -> Tuple[List[SnapshotGraph], IngestReport, Tuple[datetime, datetime]]:
    """Read a trip CSV into snapshots; malformed rows are skipped and counted.

    Rows with unparsable fields, extra fields or undecodable bytes are malformed.

    Without ``span`` the sequence covers whole days from the first to the last trip.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"trip file not found: {path}")
    extra_fields: List[List[str]] = []

    def skip_bad_line(fields: List[str]) -> None:
        extra_fields.append(fields)
        logger.debug(f"[Ingest] {path}: skipping a row with {len(fields)} fields: {fields}")
        return None

    try:
        frame = pd.read_csv(
            path, dtype=str, keep_default_na=False, engine="python",
            on_bad_lines=skip_bad_line, encoding_errors="replace",
        )
    except pd.errors.EmptyDataError as e:
        raise DataFormatError(f"{path} has no header", row=1) from e
    if list(frame.columns) != TRIP_COLUMNS:
        raise DataFormatError(f"expected header {','.join(TRIP_COLUMNS)}, got {','.join(map(str, frame.columns))}", row=1)
    # short rows come back padded with NaN
    frame = frame.fillna("")

    starts = _parse_times(frame["start_time"], utc_offset_hours)
    coords = {c: pd.to_numeric(frame[c], errors="coerce") for c in TRIP_COLUMNS[1:]}
    ok = starts.notna().to_numpy()
    for values in coords.values():
        ok &= np.isfinite(values.to_numpy(dtype=np.float64))
    for row in np.flatnonzero(~ok):
        logger.debug(f"[Ingest] {path}: row {row + 2} is malformed: {frame.iloc[row].tolist()}")

    valid_starts = starts[ok].to_numpy(dtype="datetime64[ns]")
    if span is None:
        if not valid_starts.size:
            raise ContractError(f"{path} has no parsable trip; pass an explicit span")
        first = pd.Timestamp(valid_starts.min()).normalize().to_pydatetime()
        last = pd.Timestamp(valid_starts.max()).normalize().to_pydatetime()
        span = (first, last + timedelta(days=1))
    span = (span[0].replace(tzinfo=None), span[1].replace(tzinfo=None))
    snapshots, build = snapshots_from_arrays(
        valid_starts,
        *(coords[c].to_numpy(dtype=np.float64)[ok] for c in TRIP_COLUMNS[1:]),
        grid=grid,
        slot_len=slot_len,
        span=span,
    )
    report = IngestReport(
        rows=len(frame) + len(extra_fields),
        malformed=int((~ok).sum()) + len(extra_fields),
        counted=build.counted,
        dropped_out_of_bbox=build.dropped_out_of_bbox,
        dropped_out_of_span=build.dropped_out_of_span,
    )
    logger.info(
        f"[Ingest] {path}: {report.rows} rows, {report.counted} counted, {report.malformed} malformed, "
        f"{report.dropped_out_of_bbox} outside the bounding box, {report.dropped_out_of_span} outside the span"
    )
    return snapshots, report, span


class SynthConfig(BaseModel):
    """Planted-pattern city: cell roles, time-of-day profiles, a city-wide surge and Poisson noise.

    The surge is a mean-one lognormal multiplier on every rate of a slot whose log
    follows a stationary AR(1) process, so activity levels persist over hours and
    a history average over past weeks cannot anticipate them.
    """
    model_config = ConfigDict(extra="forbid", frozen=True)

    grid: GridSpec = Field(
        default=GridSpec(min_lat=39.85, min_lon=116.30, max_lat=39.95, max_lon=116.43, n_rows=5, n_cols=5),
        description="City layout",
    )
    days: int = Field(default=42, ge=1, description="Simulated days")
    l: int = Field(default=24, ge=2, description="Slots per day")
    start: datetime = Field(default=datetime(2024, 1, 1), description="Wall-clock start of slot 0")
    roles: Optional[List[Role]] = Field(default=None, description="Role per cell; a central business district layout when omitted")
    base_rate: float = Field(default=4.0, ge=0, description="Mean trips per slot between two roles at the base level")
    base_level: float = Field(default=0.5, ge=0, description="Profile value outside any peak")
    pair_scale: Dict[str, float] = Field(default_factory=dict, description="Rate multipliers keyed 'origin>dest'")
    weekend_scale: float = Field(default=0.6, ge=0, description="Rate multiplier on Saturdays and Sundays")
    distance_decay_km: Optional[float] = Field(default=None, gt=0, description="e-folding distance of trip rates; no decay when omitted")
    surge_sd: float = Field(default=0.5, ge=0, description="Standard deviation of the log surge multiplier")
    surge_persistence: float = Field(default=0.95, ge=0, lt=1, description="Slot-to-slot autocorrelation of the log surge")
    seed: int = Field(default=0, description="Master seed of the per-slot random streams")

    @field_validator("pair_scale")
    @classmethod
    def _check_pairs(cls, value: Dict[str, float]) -> Dict[str, float]:
        for key, scale in value.items():
            origin, _, dest = key.partition(">")
            if origin not in ROLES or dest not in ROLES:
                raise ValueError(f"unknown role pair {key!r}")
            if scale < 0:
                raise ValueError(f"negative scale for {key!r}")
        return value

    @model_validator(mode="after")
    def _check_roles(self) -> "SynthConfig":
        if self.roles is not None and len(self.roles) != self.grid.n:
            raise ValueError(f"{len(self.roles)} roles for {self.grid.n} cells")
        return self

    @property
    def n_slots(self) -> int:
        return self.days * self.l

    @property
    def slot_minutes(self) -> int:
        if MINUTES_PER_DAY % self.l:
            raise ContractError(f"{self.l} slots do not divide a day into whole minutes")
        return MINUTES_PER_DAY // self.l


class SynthResult(NamedTuple):
    snapshots: List[SnapshotGraph]
    rates: np.ndarray  # (l, 7, n, n)
    surge: np.ndarray  # (n_slots,)
    meta: DatasetMeta


def default_roles(grid: GridSpec) -> List[str]:
    """Business in the central third, a transit hub and a nightlife cell in two corners, residential elsewhere."""
    roles = []
    for i in range(grid.n):
        r, c = divmod(i, grid.n_cols)
        central = grid.n_rows // 3 <= r < grid.n_rows - grid.n_rows // 3 and grid.n_cols // 3 <= c < grid.n_cols - grid.n_cols // 3
        roles.append("business" if central else "residential")
    if grid.n >= 3:
        roles[0] = "transit"
        roles[-1] = "nightlife"
    return roles


def _bump(hours: np.ndarray, centre: float, width: float) -> np.ndarray:
    gap = np.abs(hours - centre) % 24.0
    gap = np.minimum(gap, 24.0 - gap)
    return np.exp(-0.5 * (gap / width) ** 2)


def time_profiles(cfg: SynthConfig) -> Dict[Tuple[str, str], np.ndarray]:
    """Per role pair, a length-l multiplier over the time of day."""
    hours = (np.arange(cfg.l) + 0.5) * 24.0 / cfg.l
    profiles = {}
    for origin in ROLES:
        for dest in ROLES:
            level = np.full(cfg.l, cfg.base_level)
            for centre, width, amplitude in DEFAULT_PROFILES.get((origin, dest), []):
                level = level + amplitude * _bump(hours, centre, width)
            profiles[(origin, dest)] = level * cfg.pair_scale.get(f"{origin}>{dest}", 1.0)
    return profiles


def rate_tensor(cfg: SynthConfig) -> np.ndarray:
    """Planted mean counts indexed (slot of day, weekday, origin, dest)."""
    roles = cfg.roles or default_roles(cfg.grid)
    n = cfg.grid.n
    decay = 1.0 if cfg.distance_decay_km is None else np.exp(-geo_matrix(cfg.grid).dist / cfg.distance_decay_km)
    profiles = time_profiles(cfg)
    by_pair = np.zeros((cfg.l, n, n))
    for i in range(n):
        for j in range(n):
            by_pair[:, i, j] = profiles[(roles[i], roles[j])]
    day = cfg.base_rate * by_pair * decay
    week = np.array([1.0] * 5 + [cfg.weekend_scale] * 2)
    return day[:, None, :, :] * week[None, :, None, None]


def surge_path(cfg: SynthConfig, seq: np.random.SeedSequence) -> np.ndarray:
    """Mean-one multiplier per slot; all ones when ``surge_sd`` is zero."""
    shocks = np.random.default_rng(seq).standard_normal(cfg.n_slots)
    sd, rho = cfg.surge_sd, cfg.surge_persistence
    z = np.empty(cfg.n_slots)
    z[0] = sd * shocks[0]
    step = sd * np.sqrt(1.0 - rho * rho)
    for t in range(1, cfg.n_slots):
        z[t] = rho * z[t - 1] + step * shocks[t]
    return np.exp(z - 0.5 * sd * sd)


def synth_generate(cfg: SynthConfig) -> SynthResult:
    """Poisson counts around the surged planted rates; slot t draws from its own spawned stream."""
    rates = rate_tensor(cfg)
    start_dow = cfg.start.weekday()
    root = np.random.SeedSequence(cfg.seed)
    # child 0 drives the surge and child t + 1 slot t, so a longer run extends a shorter one
    surge = surge_path(cfg, root.spawn(1)[0])
    streams = root.spawn(cfg.n_slots)
    snapshots = []
    for t, seq in enumerate(streams):
        rate = surge[t] * rates[t % cfg.l, (start_dow + t // cfg.l) % 7]
        snapshots.append(SnapshotGraph(slot=t, counts=np.random.default_rng(seq).poisson(rate).astype(np.int64)))
    meta = DatasetMeta(
        grid=cfg.grid,
        n_slots=cfg.n_slots,
        slots_per_day=cfg.l,
        slot_minutes=cfg.slot_minutes,
        start=cfg.start,
        start_dow=start_dow,
    )
    logger.info(
        f"[Synth] {cfg.n_slots} slots on {cfg.grid.n_rows}x{cfg.grid.n_cols} cells, "
        f"{int(sum(g.counts.sum() for g in snapshots))} trips"
    )
    return SynthResult(snapshots, rates, surge, meta)


def write_rates_csv(path: Union[str, Path], rates: np.ndarray) -> None:
    l, days, n, _ = rates.shape
    h, w, i, j = np.meshgrid(np.arange(l), np.arange(days), np.arange(n), np.arange(n), indexing="ij")
    frame = pd.DataFrame({
        "slot_of_day": h.ravel(), "dow": w.ravel(), "origin": i.ravel(), "dest": j.ravel(), "rate": rates.ravel(),
    }, columns=RATE_COLUMNS)
    frame.to_csv(path, index=False)


def write_surge_csv(path: Union[str, Path], surge: np.ndarray) -> None:
    pd.DataFrame({"slot": np.arange(surge.size), "multiplier": surge}).to_csv(path, index=False)


def write_dataset(directory: Union[str, Path], snapshots: List[SnapshotGraph], meta: DatasetMeta) -> List[Path]:
    """Write ``snapshots.csv`` and ``dataset.json``; returns the written paths."""
    if len(snapshots) != meta.n_slots:
        raise ContractError(f"{len(snapshots)} snapshots for a dataset of {meta.n_slots} slots")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_snapshots_csv(directory / SNAPSHOTS_FILE, snapshots)
    (directory / META_FILE).write_text(json.dumps(meta.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
    return [directory / SNAPSHOTS_FILE, directory / META_FILE]


def read_dataset(directory: Union[str, Path]) -> Tuple[List[SnapshotGraph], DatasetMeta]:
    directory = Path(directory)
    meta_path = directory / META_FILE
    if not meta_path.exists():
        raise FileNotFoundError(f"dataset metadata not found: {meta_path}")
    try:
        meta = DatasetMeta.model_validate_json(meta_path.read_text())
    except ValueError as e:
        raise DataFormatError(f"{meta_path}: {e}") from e
    snapshots = read_snapshots_csv(directory / SNAPSHOTS_FILE, meta.grid.n, meta.n_slots)
    return snapshots, meta


def slot_start(meta: DatasetMeta, t: int) -> datetime:
    return meta.start + timedelta(minutes=meta.slot_minutes * t)

