"""Command that generates the synthetic planted-pattern dataset."""
import time
from datetime import datetime
from typing import List

from pydantic import BaseModel, ConfigDict, Field

from ..data_pipeline import (
    RATES_FILE,
    SURGE_FILE,
    SynthConfig,
    synth_generate,
    write_dataset,
    write_rates_csv,
    write_surge_csv,
)
from ..ddw_graph import GridSpec
from ..interfaces.command import BaseCommandInput, Command, CommandResponse
from ..manifest import record_run

DEFAULT_GRID = SynthConfig.model_fields["grid"].default


class SynthInput(BaseCommandInput):
    """Input schema for the synth command."""
    model_config = ConfigDict(json_schema_extra={
        "examples": [{"output_dir": "data/synth", "seed": 0}, {"output_dir": "data/tiny", "days": 21, "n_rows": 3, "n_cols": 3}]
    })

    output_dir: str = Field(description="Dataset directory to write")
    seed: int = Field(default=0, description="Master seed")
    days: int = Field(default=42, ge=1, description="Simulated days")
    slots_per_day: int = Field(default=24, ge=2, description="Slots per day")
    n_rows: int = Field(default=DEFAULT_GRID.n_rows, gt=0, description="Grid rows")
    n_cols: int = Field(default=DEFAULT_GRID.n_cols, gt=0, description="Grid columns")
    base_rate: float = Field(default=4.0, ge=0, description="Mean trips per slot and cell pair at the base level")
    weekend_scale: float = Field(default=0.6, ge=0, description="Rate multiplier on weekends")
    surge_sd: float = Field(default=0.5, ge=0, description="Standard deviation of the log city-wide surge (0 disables it)")
    surge_persistence: float = Field(default=0.95, ge=0, lt=1, description="Slot-to-slot autocorrelation of the log surge")
    start: datetime = Field(default=datetime(2024, 1, 1), description="ISO wall-clock start of slot 0")


class SynthOutput(BaseModel):
    """Output schema for the synth command."""
    n: int
    n_slots: int
    trips: int = Field(description="Total sampled trips")
    outputs: List[str]


class SynthCommand(Command):
    """Samples Poisson trip counts around planted commuting patterns."""
    name = "synth"
    description = "Generate a seeded synthetic dataset plus its ground-truth rates and surge"
    input_model = SynthInput
    output_model = SynthOutput

    async def execute(self, input_data: SynthInput) -> CommandResponse:
        started = time.perf_counter()
        grid = DEFAULT_GRID.model_copy(update={"n_rows": input_data.n_rows, "n_cols": input_data.n_cols})
        cfg = SynthConfig(
            grid=GridSpec(**grid.model_dump()),
            days=input_data.days,
            l=input_data.slots_per_day,
            start=input_data.start,
            base_rate=input_data.base_rate,
            weekend_scale=input_data.weekend_scale,
            surge_sd=input_data.surge_sd,
            surge_persistence=input_data.surge_persistence,
            seed=input_data.seed,
        )
        result = synth_generate(cfg)
        outputs = write_dataset(input_data.output_dir, result.snapshots, result.meta)
        rates_path = outputs[0].parent / RATES_FILE
        write_rates_csv(rates_path, result.rates)
        outputs.append(rates_path)
        surge_file = outputs[0].parent / SURGE_FILE
        write_surge_csv(surge_file, result.surge)
        outputs.append(surge_file)
        record_run(self.name, input_data.output_dir, started, [], outputs, seed=input_data.seed)
        return CommandResponse.from_model(SynthOutput(
            n=grid.n,
            n_slots=cfg.n_slots,
            trips=int(sum(int(g.counts.sum()) for g in result.snapshots)),
            outputs=[str(p) for p in outputs],
        ))
