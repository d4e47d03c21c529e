"""Command that turns a trip-record CSV into a dataset directory."""
import time
from datetime import datetime, timedelta
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field

from ..data_pipeline import DatasetMeta, ingest_csv, slots_per_day, write_dataset
from ..ddw_graph import GridSpec
from ..errors import ConfigError
from ..interfaces.command import BaseCommandInput, Command, CommandResponse
from ..manifest import record_run
from ..temporal_attention import MIN_SLOTS_PER_DAY, day_too_short


class IngestInput(BaseCommandInput):
    """Input schema for the ingest command."""
    model_config = ConfigDict(json_schema_extra={
        "examples": [
            {
                "trips": "trips.csv", "output_dir": "data/city",
                "min_lat": 39.8, "min_lon": 116.2, "max_lat": 40.0, "max_lon": 116.5,
                "n_rows": 20, "n_cols": 20, "slot_minutes": 60,
            }
        ]
    })

    trips: str = Field(description="Trip CSV with header start_time,origin_lat,origin_lon,dest_lat,dest_lon")
    output_dir: str = Field(description="Dataset directory to write")
    min_lat: float = Field(description="Southern edge of the bounding box")
    min_lon: float = Field(description="Western edge of the bounding box")
    max_lat: float = Field(description="Northern edge of the bounding box")
    max_lon: float = Field(description="Eastern edge of the bounding box")
    n_rows: int = Field(gt=0, description="Grid rows")
    n_cols: int = Field(gt=0, description="Grid columns")
    slot_minutes: int = Field(default=60, gt=0, description="Slot length in minutes; must divide a day")
    start: Optional[str] = Field(default=None, description="ISO start of the span (whole days around the data if omitted)")
    end: Optional[str] = Field(default=None, description="ISO end of the span (exclusive)")
    utc_offset_hours: float = Field(default=0.0, description="Local UTC offset that timestamps with an offset are shifted to")


class IngestOutput(BaseModel):
    """Output schema for the ingest command."""
    rows: int = Field(description="Data rows read")
    malformed: int = Field(description="Rows skipped as unparsable")
    counted: int = Field(description="Trips counted into snapshots")
    dropped_out_of_bbox: int
    dropped_out_of_span: int
    n_slots: int
    outputs: List[str]


def _parse_time(value: str, flag: str) -> datetime:
    try:
        return datetime.fromisoformat(value)
    except ValueError as e:
        raise ConfigError(f"--{flag}: not an ISO timestamp: {value!r}") from e


class IngestCommand(Command):
    """Bins trip records into per-slot OD snapshots."""
    name = "ingest"
    description = "Build a dataset directory (snapshots.csv + dataset.json) from a trip CSV"
    input_model = IngestInput
    output_model = IngestOutput

    async def execute(self, input_data: IngestInput) -> CommandResponse:
        started = time.perf_counter()
        grid = GridSpec(
            min_lat=input_data.min_lat, min_lon=input_data.min_lon,
            max_lat=input_data.max_lat, max_lon=input_data.max_lon,
            n_rows=input_data.n_rows, n_cols=input_data.n_cols,
        )
        l = slots_per_day(input_data.slot_minutes)
        if l < MIN_SLOTS_PER_DAY:
            raise ConfigError(f"--slot-minutes: {day_too_short(l)}")
        span = None
        if (input_data.start is None) != (input_data.end is None):
            raise ConfigError("--start and --end must be given together")
        if input_data.start is not None:
            span = (_parse_time(input_data.start, "start"), _parse_time(input_data.end, "end"))
        snapshots, report, span = ingest_csv(
            input_data.trips, grid, timedelta(minutes=input_data.slot_minutes), span, input_data.utc_offset_hours
        )
        meta = DatasetMeta(
            grid=grid,
            n_slots=len(snapshots),
            slots_per_day=l,
            slot_minutes=input_data.slot_minutes,
            start=span[0],
            start_dow=span[0].weekday(),
        )
        outputs = write_dataset(input_data.output_dir, snapshots, meta)
        record_run(self.name, input_data.output_dir, started, [input_data.trips], outputs)
        return CommandResponse.from_model(IngestOutput(
            **report.model_dump(), n_slots=len(snapshots), outputs=[str(p) for p in outputs]
        ))
